"""Exception hierarchy shared across the package."""


class SERCError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SERCError, ValueError):
    pass


# -- trajectory model ---------------------------------------------------------


class TrajectoryError(SERCError):
    pass


class ObservationMismatch(TrajectoryError):
    """A tool-call step without an observation, or an observation on a non-tool step."""


class AppendedAfterFinal(TrajectoryError):
    pass


class NoFinalAnswer(TrajectoryError):
    pass


class AlreadyFinalized(TrajectoryError):
    pass


class MalformedRecord(TrajectoryError):
    """A serialized record failed validation; ``path`` names the offending field."""

    def __init__(self, path: str, message: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if message else path)


# -- tools ---------------------------------------------------------------------


class ToolError(SERCError):
    """Raised by a tool handler; surfaces to the policy as a tool-error observation."""


class MalformedToolCall(SERCError):
    pass


class DuplicateTool(SERCError):
    pass


class UnknownTool(SERCError):
    """The policy named a tool that is not registered (a protocol violation)."""


class CalcError(ToolError):
    pass


class CalcParseError(CalcError):
    pass


class CalcDivisionByZero(CalcError):
    pass


class CalcOverflow(CalcError):
    pass


class MissingRow(ToolError):
    pass


class MissingColumn(ToolError):
    pass


# -- wire schemas ------------------------------------------------------------


class SchemaError(SERCError, ValueError):
    pass


class RangeError(SchemaError):
    pass


class StepMismatch(SchemaError):
    pass


class UnknownRepairAction(SchemaError):
    pass


class PatchOutOfRange(SERCError, IndexError):
    pass


# -- policy backends -----------------------------------------------------------


class BackendError(SERCError):
    pass


class BackendTimeout(BackendError):
    pass


class BackendProtocolError(BackendError):
    pass


class HTTPStatusError(BackendError):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        super().__init__(f"endpoint returned HTTP {status}: {body[:200]}")


class AuthError(HTTPStatusError):
    pass


class UnknownTemplate(SERCError, KeyError):
    pass


class BackendNotDifferentiable(BackendError):
    pass


# -- optimisation --------------------------------------------------------------


class NonFiniteInput(SERCError, FloatingPointError):
    pass


class CandidatesForDifferentTasks(SERCError, ValueError):
    pass

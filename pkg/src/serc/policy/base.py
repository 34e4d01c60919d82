"""Role-indexed policy interface shared by all backends."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from importlib import resources
from typing import Protocol

import numpy as np

from ..envs import canonical_answer
from ..errors import BackendProtocolError, MalformedToolCall
from ..tools import find_tool_calls
from ..trajectory import FINAL_ANSWER, TEXT_STEP, TOOL_CALL, Action, Observation, SolverContext, Step, ToolCall
from ..verification import VerificationTuple

PROMPT_VERSION = "v1"


class RoleMode(enum.Enum):
    SOLVER = "solver"
    VERIFIER = "verifier"
    SELF_REPAIR = "self_repair"


@dataclass(frozen=True)
class ToolEvidence:
    """Result of a Verifier-issued tool re-check for one step."""

    call: ToolCall
    observation: Observation
    result: int  # +1 agrees with the step, -1 contradicts, 0 inconclusive


@dataclass(frozen=True)
class Generation:
    text: str
    template_id: int | None = None
    logp: float | None = None
    solver_conf: float | None = None
    truncated: bool = False


class Policy(Protocol):
    """Anything that can act in the three roles.

    Solver mode sees ``context`` (and ``context.patch`` when regenerating after a
    repair). Verifier mode additionally gets the ``step`` under review and, on
    its second turn, the ``evidence`` from its own tool re-check. Self-repair
    mode gets the step and its ``verification``.
    """

    def generate(
        self,
        context: SolverContext,
        mode: RoleMode,
        rng: np.random.Generator,
        *,
        step: Step | None = None,
        evidence: ToolEvidence | None = None,
        verification: VerificationTuple | None = None,
    ) -> Generation: ...


def load_prompt(mode: RoleMode, version: str = PROMPT_VERSION) -> str:
    return resources.files("serc").joinpath(f"assets/prompts/{version}/{mode.value}.txt").read_text(encoding="utf-8")


_FINAL = re.compile(r"FINAL_ANSWER:\s*(.*?)\s*$", re.MULTILINE)
_CONF = re.compile(r"CONFIDENCE:\s*([-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)")
DEFAULT_DECLARED_CONFIDENCE = 0.5


def parse_solver_action(text: str) -> tuple[Action, int]:
    """Turn Solver output into an Action.

    Returns the action and the number of tool calls found; more than one call
    in a single action is a protocol violation the caller reports as a
    tool-error observation.
    """
    try:
        calls = find_tool_calls(text)
    except MalformedToolCall as exc:
        raise BackendProtocolError(f"malformed tool call: {exc}") from None
    if calls:
        return Action(TOOL_CALL, text, tool_call=calls[0]), len(calls)
    final = _FINAL.search(text)
    if final:
        answer = final.group(1).rstrip(".").strip()
        conf_match = _CONF.search(text)
        conf = float(conf_match.group(1)) if conf_match else DEFAULT_DECLARED_CONFIDENCE
        conf = min(max(conf, 0.0), 1.0)
        return Action(FINAL_ANSWER, answer, declared_confidence=conf), 0
    return Action(TEXT_STEP, text), 0


def recheck_result(step: Step, observation: Observation) -> int:
    """Compare a Verifier's tool re-check against what the step claims.

    Tool-call steps claim their own observation; final answers claim their
    content; text steps are confirmed if they mention the re-checked value.
    An unsuccessful re-check is inconclusive.
    """
    if observation.status != "ok":
        return 0
    truth = canonical_answer(observation.payload)
    if step.action.kind == TOOL_CALL:
        claim = step.observation
        if claim is None or claim.status != "ok":
            return -1
        return 1 if canonical_answer(claim.payload) == truth else -1
    if step.action.kind == FINAL_ANSWER:
        return 1 if canonical_answer(step.action.content) == truth else -1
    return 1 if observation.payload.strip() in step.action.content else -1

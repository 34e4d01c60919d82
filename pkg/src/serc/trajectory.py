"""Trajectory data model, builder and line-delimited JSON codec.

A trajectory is the sequence of (state, action, observation) steps a Solver
produces for one task. States are deterministic text renderings of the task
plus the belief (every prior action/observation pair), so two builders fed the
same steps always produce the same digests.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from typing import Any, Mapping

from .errors import (
    AlreadyFinalized,
    AppendedAfterFinal,
    MalformedRecord,
    MalformedToolCall,
    NoFinalAnswer,
    ObservationMismatch,
)
from .verification import ProcessRewardBreakdown, VerificationTuple

TEXT_STEP = "text-step"
TOOL_CALL = "tool-call"
FINAL_ANSWER = "final-answer"
ACTION_KINDS = (TEXT_STEP, TOOL_CALL, FINAL_ANSWER)
OBSERVATION_STATUSES = ("ok", "tool-error", "timeout")
ANSWER_SPECS = ("integer", "decimal", "categorical")


@dataclass(frozen=True)
class TaskInstance:
    id: str
    question: str
    scene: Mapping[str, Any]
    answer_spec: str = "integer"
    kind: str = "arithmetic-chain"

    def __post_init__(self):
        if self.answer_spec not in ANSWER_SPECS:
            raise ValueError(f"unknown answer_spec {self.answer_spec!r}")

    def render(self) -> str:
        """Policy-visible rendering; the scene is shown, ground truth never is."""
        return f"question: {self.question}\nscene: {json.dumps(self.scene, sort_keys=True)}\n"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "question": self.question,
            "scene": self.scene,
            "answer_spec": self.answer_spec,
        }


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    tool_input: dict

    def __post_init__(self):
        if not isinstance(self.tool_name, str) or not self.tool_name:
            raise MalformedToolCall("tool_name must be a non-empty string")
        if not isinstance(self.tool_input, dict):
            raise MalformedToolCall("tool_input must be an object")
        _check_tree(self.tool_input, "tool_input")

    def to_dict(self) -> dict:
        return {"tool_name": self.tool_name, "tool_input": self.tool_input}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _check_tree(node, path: str) -> None:
    if isinstance(node, dict):
        for k, v in node.items():
            if not isinstance(k, str):
                raise MalformedToolCall(f"{path}: non-string key")
            _check_tree(v, f"{path}.{k}")
    elif isinstance(node, list):
        for i, v in enumerate(node):
            _check_tree(v, f"{path}[{i}]")
    elif isinstance(node, float):
        if not math.isfinite(node):
            raise MalformedToolCall(f"{path}: non-finite number")
    elif not (node is None or isinstance(node, (str, int, bool))):
        raise MalformedToolCall(f"{path}: unsupported value {type(node).__name__}")


@dataclass(frozen=True)
class Action:
    kind: str
    content: str
    tool_call: ToolCall | None = None
    declared_confidence: float | None = None

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise ValueError(f"unknown action kind {self.kind!r}")
        if (self.tool_call is not None) != (self.kind == TOOL_CALL):
            raise ValueError("tool_call must be present exactly on tool-call actions")
        if (self.declared_confidence is not None) != (self.kind == FINAL_ANSWER):
            raise ValueError("declared_confidence must be present exactly on final-answer actions")
        if self.declared_confidence is not None and not 0.0 <= self.declared_confidence <= 1.0:
            raise ValueError("declared_confidence outside [0, 1]")


@dataclass(frozen=True)
class Observation:
    source: str
    payload: str
    status: str = "ok"

    def __post_init__(self):
        if self.status not in OBSERVATION_STATUSES:
            raise ValueError(f"unknown observation status {self.status!r}")
        if self.status != "ok" and not self.payload:
            raise ValueError("non-ok observations must describe the error")


@dataclass(frozen=True)
class RepairRecord:
    """What happened when a step's confidence fell below the repair threshold."""

    attempts: int
    applied: bool
    original_verification: VerificationTuple
    original_content: str


@dataclass(frozen=True)
class Step:
    index: int
    state_digest: str
    action: Action
    observation: Observation | None = None
    verification: VerificationTuple | None = None
    process_reward: ProcessRewardBreakdown | None = None
    effective_reward: float | None = None
    repaired: bool = False
    template_id: int | None = None  # toy backend only: the sampled action template
    solver_conf: float | None = None
    repair: RepairRecord | None = None

    def __post_init__(self):
        if (self.observation is not None) != (self.action.kind == TOOL_CALL):
            raise ObservationMismatch(f"step {self.index}: observation presence does not match action kind")
        if (self.effective_reward is not None) != (self.verification is not None):
            raise ValueError(f"step {self.index}: effective_reward must accompany verification")

    @property
    def gate_conf(self) -> float | None:
        """Confidence that drove the repair gate (the pre-repair one if a repair was applied)."""
        if self.repair is not None:
            return self.repair.original_verification.conf
        return self.verification.conf if self.verification is not None else None


@dataclass(frozen=True)
class Trajectory:
    task: TaskInstance | None
    task_id: str
    steps: tuple[Step, ...]
    final_answer: str
    outcome_reward: float
    total_return: float | None = None
    seed: int = 0

    @property
    def truncated(self) -> bool:
        return not self.steps or self.steps[-1].action.kind != FINAL_ANSWER

    @property
    def step_rewards(self) -> list[float]:
        return [0.0 if s.effective_reward is None else s.effective_reward for s in self.steps]


@dataclass(frozen=True)
class SolverContext:
    task: TaskInstance
    belief: tuple[tuple[Action, Observation | None], ...] = ()
    # a pending repair instruction for the step about to be (re)generated
    patch: Any = None

    @property
    def turn(self) -> int:
        return len(self.belief) + 1

    def render(self) -> str:
        return self.task.render() + "".join(render_pair(a, o) for a, o in self.belief)

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()[:16]

    def extend(self, action: Action, observation: Observation | None) -> "SolverContext":
        return SolverContext(self.task, self.belief + ((action, observation),))

    def with_patch(self, patch) -> "SolverContext":
        return replace(self, patch=patch)


def render_pair(action: Action, observation: Observation | None) -> str:
    text = f"[{action.kind}] {action.content}\n"
    if observation is not None:
        text += f"tool_output: ({observation.status}) {observation.payload}\n"
    return text


class TrajectoryBuilder:
    """Single-owner accumulator of steps; ``finalize`` freezes it into a Trajectory."""

    def __init__(self, task: TaskInstance, seed: int):
        self.task = task
        self.seed = seed
        self.steps: list[Step] = []
        self.context = SolverContext(task)
        self._finalized = False

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def turn(self) -> int:
        return self.context.turn

    def append_step(
        self,
        action: Action,
        observation: Observation | None = None,
        **annotations,
    ) -> "TrajectoryBuilder":
        if self._finalized:
            raise AlreadyFinalized("builder already finalized")
        if self.steps and self.steps[-1].action.kind == FINAL_ANSWER:
            raise AppendedAfterFinal("cannot append after a final answer")
        if (observation is not None) != (action.kind == TOOL_CALL):
            raise ObservationMismatch("observation presence does not match action kind")
        step = Step(self.T + 1, self.context.digest(), action, observation, **annotations)
        self.steps.append(step)
        self.context = self.context.extend(action, observation)
        return self

    def finalize(self, outcome_reward: float, total_return: float | None = None, allow_truncated: bool = False) -> Trajectory:
        if self._finalized:
            raise AlreadyFinalized("builder already finalized")
        last = self.steps[-1] if self.steps else None
        if last is None or last.action.kind != FINAL_ANSWER:
            if not allow_truncated:
                raise NoFinalAnswer("trajectory does not end in a final answer")
            final_answer = ""
        else:
            final_answer = last.action.content
        self._finalized = True
        return Trajectory(self.task, self.task.id, tuple(self.steps), final_answer, float(outcome_reward), total_return, self.seed)


def begin_trajectory(task: TaskInstance, seed: int) -> TrajectoryBuilder:
    return TrajectoryBuilder(task, seed)


def append_step(builder: TrajectoryBuilder, action: Action, observation: Observation | None = None, **annotations) -> TrajectoryBuilder:
    return builder.append_step(action, observation, **annotations)


def finalize(builder: TrajectoryBuilder, outcome_reward: float, **kwargs) -> Trajectory:
    return builder.finalize(outcome_reward, **kwargs)


# -- serialization ----------------------------------------------------------------


def _action_to_dict(a: Action) -> dict:
    d: dict = {"kind": a.kind, "content": a.content}
    if a.tool_call is not None:
        d["tool_call"] = a.tool_call.to_dict()
    if a.declared_confidence is not None:
        d["declared_confidence"] = a.declared_confidence
    return d


def _verification_to_dict(v: VerificationTuple) -> dict:
    d = v.to_dict()
    if v.claimed_tool_check is not None:
        d["claimed_tool_check"] = v.claimed_tool_check
    return d


def step_to_dict(s: Step) -> dict:
    d: dict = {"index": s.index, "state_digest": s.state_digest, "action": _action_to_dict(s.action)}
    if s.observation is not None:
        d["observation"] = {"source": s.observation.source, "payload": s.observation.payload, "status": s.observation.status}
    if s.verification is not None:
        d["verification"] = _verification_to_dict(s.verification)
    if s.process_reward is not None or s.effective_reward is not None:
        rewards = s.process_reward.to_dict() if s.process_reward is not None else {}
        rewards["effective"] = s.effective_reward
        d["rewards"] = rewards
    d["repaired"] = s.repaired
    if s.template_id is not None:
        d["template_id"] = s.template_id
    if s.solver_conf is not None:
        d["solver_conf"] = s.solver_conf
    if s.repair is not None:
        d["repair"] = {
            "attempts": s.repair.attempts,
            "applied": s.repair.applied,
            "original_verification": _verification_to_dict(s.repair.original_verification),
            "original_content": s.repair.original_content,
        }
    return d


def trajectory_to_dict(t: Trajectory) -> dict:
    return {
        "task_id": t.task_id,
        "seed": t.seed,
        "steps": [step_to_dict(s) for s in t.steps],
        "final_answer": t.final_answer,
        "outcome_reward": t.outcome_reward,
        "total_return": t.total_return,
    }


def encode_trajectory(t: Trajectory) -> str:
    """One JSON line, no trailing newline. Floats use shortest round-trip repr."""
    return json.dumps(trajectory_to_dict(t), ensure_ascii=False, allow_nan=False, separators=(",", ":"))


def _need(d: Mapping, key: str, path: str, kinds) -> Any:
    if not isinstance(d, Mapping) or key not in d:
        raise MalformedRecord(path, "missing")
    value = d[key]
    if kinds is not None:
        if isinstance(value, bool) and bool not in (kinds if isinstance(kinds, tuple) else (kinds,)):
            raise MalformedRecord(path, "wrong type bool")
        if not isinstance(value, kinds):
            raise MalformedRecord(path, f"wrong type {type(value).__name__}")
    return value


_NUM = (int, float)


def _decode_verification(d, path: str) -> VerificationTuple:
    try:
        v = VerificationTuple(
            step_index=_need(d, "step_index", f"{path}.step_index", int),
            score=_need(d, "score", f"{path}.score", _NUM),
            conf=_need(d, "confidence", f"{path}.confidence", _NUM),
            critique=_need(d, "critique", f"{path}.critique", str),
            tool_check=_need(d, "tool_check", f"{path}.tool_check", bool),
            tool_result=_need(d, "tool_result", f"{path}.tool_result", int),
            claimed_tool_check=d.get("claimed_tool_check"),
        )
    except MalformedRecord:
        raise
    except ValueError as exc:
        raise MalformedRecord(path, str(exc)) from None
    return v


def _decode_step(d, path: str) -> Step:
    index = _need(d, "index", f"{path}.index", int)
    a = _need(d, "action", f"{path}.action", dict)
    try:
        tool_call = None
        if "tool_call" in a:
            tc = _need(a, "tool_call", f"{path}.action.tool_call", dict)
            tool_call = ToolCall(
                _need(tc, "tool_name", f"{path}.action.tool_call.tool_name", str),
                _need(tc, "tool_input", f"{path}.action.tool_call.tool_input", dict),
            )
        action = Action(
            _need(a, "kind", f"{path}.action.kind", str),
            _need(a, "content", f"{path}.action.content", str),
            tool_call,
            a.get("declared_confidence"),
        )
    except MalformedRecord:
        raise
    except (ValueError, MalformedToolCall) as exc:
        raise MalformedRecord(f"{path}.action", str(exc)) from None
    observation = None
    if "observation" in d:
        o = _need(d, "observation", f"{path}.observation", dict)
        try:
            observation = Observation(
                _need(o, "source", f"{path}.observation.source", str),
                _need(o, "payload", f"{path}.observation.payload", str),
                _need(o, "status", f"{path}.observation.status", str),
            )
        except ValueError as exc:
            raise MalformedRecord(f"{path}.observation", str(exc)) from None
    verification = _decode_verification(d["verification"], f"{path}.verification") if "verification" in d else None
    breakdown, effective = None, None
    if "rewards" in d:
        r = _need(d, "rewards", f"{path}.rewards", dict)
        effective = r.get("effective")
        if "r_proc" in r:
            try:
                breakdown = ProcessRewardBreakdown.from_dict(r)
            except (KeyError, TypeError) as exc:
                raise MalformedRecord(f"{path}.rewards", str(exc)) from None
    repair = None
    if "repair" in d:
        rp = _need(d, "repair", f"{path}.repair", dict)
        repair = RepairRecord(
            _need(rp, "attempts", f"{path}.repair.attempts", int),
            _need(rp, "applied", f"{path}.repair.applied", bool),
            _decode_verification(_need(rp, "original_verification", f"{path}.repair.original_verification", dict), f"{path}.repair.original_verification"),
            _need(rp, "original_content", f"{path}.repair.original_content", str),
        )
    try:
        return Step(
            index=index,
            state_digest=_need(d, "state_digest", f"{path}.state_digest", str),
            action=action,
            observation=observation,
            verification=verification,
            process_reward=breakdown,
            effective_reward=effective,
            repaired=_need(d, "repaired", f"{path}.repaired", bool),
            template_id=d.get("template_id"),
            solver_conf=d.get("solver_conf"),
            repair=repair,
        )
    except ValueError as exc:
        raise MalformedRecord(path, str(exc)) from None


def decode_trajectory(text: str, tasks: Mapping[str, TaskInstance] | None = None) -> Trajectory:
    """Inverse of :func:`encode_trajectory`.

    Records carry only ``task_id``; pass ``tasks`` to re-attach full task instances.
    """
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedRecord("$", f"invalid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise MalformedRecord("$", "record is not an object")
    task_id = _need(d, "task_id", "task_id", str)
    seed = _need(d, "seed", "seed", int)
    raw_steps = _need(d, "steps", "steps", list)
    steps = []
    finals = 0
    for i, raw in enumerate(raw_steps):
        step = _decode_step(raw, f"steps[{i}]")
        if step.index != i + 1:
            raise MalformedRecord(f"steps[{i}].index", f"expected {i + 1}, got {step.index}")
        if finals:
            raise MalformedRecord(f"steps[{i}]", "step after final answer")
        finals += step.action.kind == FINAL_ANSWER
        steps.append(step)
    final_answer = _need(d, "final_answer", "final_answer", str)
    outcome = _need(d, "outcome_reward", "outcome_reward", _NUM)
    total = d.get("total_return", None)
    if "total_return" not in d:
        raise MalformedRecord("total_return", "missing")
    if total is not None and (isinstance(total, bool) or not isinstance(total, _NUM)):
        raise MalformedRecord("total_return", "wrong type")
    task = tasks.get(task_id) if tasks is not None else None
    return Trajectory(task, task_id, tuple(steps), final_answer, outcome, total, seed)


def read_trajectories(path, tasks: Mapping[str, TaskInstance] | None = None) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return [decode_trajectory(line, tasks) for line in fh if line.strip()]


def write_trajectories(path, trajectories) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            fh.write(encode_trajectory(t) + "\n")


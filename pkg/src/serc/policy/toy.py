"""Trainable toy policy with closed-form log-probabilities.

One shared tanh feature layer feeds three heads:

* solver head  -> logits over a fixed action-template vocabulary
* verifier head -> (pre-squash score, pre-squash confidence)
* confidence head -> the Solver's declared confidence

Each head sees the embedding with a constant 1 appended, so its last row acts
as a bias. All heads at zero give a uniform Solver, score 0 and confidence 0.5.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..envs import ARITHMETIC, LabeledTask, correct_call, corrupted_call, generate_tasks, guess_answer
from ..errors import UnknownTemplate
from ..tools import ToolLimits, ToolRegistry, default_registry, invoke
from ..trajectory import FINAL_ANSWER, TEXT_STEP, TOOL_CALL, SolverContext, Step
from ..verification import VerificationTuple
from .base import Generation, RoleMode, ToolEvidence, parse_solver_action, recheck_result

CALL_CORRECT, CALL_CORRUPTED, ANSWER_LAST_OUTPUT, ANSWER_GUESS, RESTATE = range(5)


@dataclass(frozen=True)
class ActionTemplate:
    id: int
    kind: str
    description: str


TEMPLATES = (
    ActionTemplate(CALL_CORRECT, TOOL_CALL, "call the tool on the scene's own query"),
    ActionTemplate(CALL_CORRUPTED, TOOL_CALL, "call the tool on a corrupted query"),
    ActionTemplate(ANSWER_LAST_OUTPUT, FINAL_ANSWER, "answer with the last tool output"),
    ActionTemplate(ANSWER_GUESS, FINAL_ANSWER, "answer with a guess"),
    ActionTemplate(RESTATE, TEXT_STEP, "restate the goal"),
)
N_TEMPLATES = len(TEMPLATES)

# feature layout
(F_BIAS, F_SOLVER, F_VERIFIER, F_HAS_OUTPUT, F_LAST_TOOL, F_TURN,
 F_AGREE, F_CONTRADICT, F_IS_TEXT, F_IS_FINAL, F_REPEAT) = range(11)
N_FEATURES = 11
HORIZON_SCALE = 8.0

VERIFIER_CONF_TARGET = 0.9
VERIFIER_SCORE_TARGET = 0.8


@dataclass
class PolicyParameters:
    shared: np.ndarray  # (n_features, embed_dim)
    solver_head: np.ndarray  # (embed_dim + 1, n_templates)
    verifier_head: np.ndarray  # (embed_dim + 1, 2)
    conf_head: np.ndarray  # (embed_dim + 1, 1)

    def __post_init__(self):
        d, e = self.shared.shape
        for name, arr, width in (
            ("solver_head", self.solver_head, None),
            ("verifier_head", self.verifier_head, 2),
            ("conf_head", self.conf_head, 1),
        ):
            if arr.shape[0] != e + 1 or (width is not None and arr.shape[1] != width):
                raise ValueError(f"{name} has shape {arr.shape}, inconsistent with embed_dim {e}")

    @classmethod
    def zeros(cls, n_features: int = N_FEATURES, embed_dim: int = 8, n_templates: int = N_TEMPLATES) -> "PolicyParameters":
        return cls(
            np.zeros((n_features, embed_dim)),
            np.zeros((embed_dim + 1, n_templates)),
            np.zeros((embed_dim + 1, 2)),
            np.zeros((embed_dim + 1, 1)),
        )

    @property
    def embed_dim(self) -> int:
        return self.shared.shape[1]

    @property
    def n_templates(self) -> int:
        return self.solver_head.shape[1]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.shared, self.solver_head, self.verifier_head, self.conf_head)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec: np.ndarray) -> "PolicyParameters":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got {vec.shape}")
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return PolicyParameters(*out)

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(*(a.copy() for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def to_dict(self) -> dict:
        return {
            "shared": self.shared.tolist(),
            "solver_head": self.solver_head.tolist(),
            "verifier_head": self.verifier_head.tolist(),
            "conf_head": self.conf_head.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParameters":
        return cls(*(np.array(d[k], dtype=float) for k in ("shared", "solver_head", "verifier_head", "conf_head")))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def embed(params: PolicyParameters, phi: np.ndarray) -> np.ndarray:
    """tanh features with a trailing constant; works on a single vector or a row batch."""
    e = np.tanh(phi @ params.shared)
    ones = np.ones(e.shape[:-1] + (1,))
    return np.concatenate([e, ones], axis=-1)


def last_output(context: SolverContext) -> str | None:
    for action, obs in reversed(context.belief):
        if obs is not None and obs.status == "ok":
            return obs.payload
    return None


def solver_features(context: SolverContext) -> np.ndarray:
    phi = np.zeros(N_FEATURES)
    phi[F_BIAS] = 1.0
    phi[F_SOLVER] = 1.0
    phi[F_HAS_OUTPUT] = float(last_output(context) is not None)
    phi[F_LAST_TOOL] = float(bool(context.belief) and context.belief[-1][0].kind == TOOL_CALL)
    phi[F_TURN] = min(len(context.belief), HORIZON_SCALE) / HORIZON_SCALE
    return phi


def repeats_earlier_call(context: SolverContext, step: Step) -> bool:
    """The step issues a tool call identical to one already in the prefix."""
    call = step.action.tool_call
    return call is not None and any(a.tool_call == call for a, _ in context.belief)


def verifier_features(step: Step, evidence: ToolEvidence | None, repeat: bool = False) -> np.ndarray:
    phi = np.zeros(N_FEATURES)
    phi[F_BIAS] = 1.0
    phi[F_VERIFIER] = 1.0
    result = evidence.result if evidence is not None else 0
    phi[F_AGREE] = float(result > 0)
    phi[F_CONTRADICT] = float(result < 0)
    phi[F_IS_TEXT] = float(step.action.kind == TEXT_STEP)
    phi[F_IS_FINAL] = float(step.action.kind == FINAL_ANSWER)
    phi[F_REPEAT] = float(repeat)
    return phi


Strategy = Callable[[SolverContext, np.random.Generator], int]


class ToyPolicy:
    """Categorical template policy; also plays Verifier and Self-Repair deterministically.

    ``strategy`` replaces sampling with a scripted template choice (log-probs are
    still reported under the parameters), which is how scripted demonstrators
    and ceiling/floor policies are built.
    """

    differentiable = True

    def __init__(self, params: PolicyParameters, strategy: Strategy | None = None):
        if not params.is_finite():
            raise ValueError("policy parameters must be finite")
        self.params = params
        self.strategy = strategy

    def with_params(self, params: PolicyParameters) -> "ToyPolicy":
        return ToyPolicy(params, self.strategy)

    # -- solver ---------------------------------------------------------------

    def log_probs(self, context: SolverContext) -> np.ndarray:
        e = embed(self.params, solver_features(context))
        return log_softmax(e @ self.params.solver_head)

    def action_log_prob(self, context: SolverContext, template_id: int) -> float:
        if not 0 <= template_id < self.params.n_templates:
            raise UnknownTemplate(template_id)
        return float(self.log_probs(context)[template_id])

    def declared_confidence(self, context: SolverContext) -> float:
        e = embed(self.params, solver_features(context))
        return _sigmoid(float(e @ self.params.conf_head[:, 0]))

    def sample_template(self, context: SolverContext, rng: np.random.Generator) -> int:
        logp = self.log_probs(context)
        if self.strategy is not None:
            return int(self.strategy(context, rng))
        cdf = np.cumsum(np.exp(logp))
        return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(cdf) - 1))

    def render_template(self, template_id: int, context: SolverContext, rng: np.random.Generator, conf: float) -> str:
        task = context.task
        if template_id == CALL_CORRECT:
            return "<think>Query the tool with the scene's values.</think>\n" + correct_call(task).to_json()
        if template_id == CALL_CORRUPTED:
            return "<think>Query the tool.</think>\n" + corrupted_call(task, rng).to_json()
        if template_id == ANSWER_LAST_OUTPUT:
            answer = last_output(context) or "unknown"
            return f"<think>Use the last tool output.</think>\nCONFIDENCE: {conf:.6f}\nFINAL_ANSWER: {answer}"
        if template_id == ANSWER_GUESS:
            return f"<think>Estimate directly.</think>\nCONFIDENCE: {conf:.6f}\nFINAL_ANSWER: {guess_answer(task, rng)}"
        if template_id == RESTATE:
            return f"<think>Restate the goal: {task.question}</think>"
        raise UnknownTemplate(template_id)

    def _solve(self, context: SolverContext, rng: np.random.Generator) -> Generation:
        if context.patch is not None:
            # regeneration after a repair follows the patch verbatim
            return Generation(context.patch.new_content)
        tid = self.sample_template(context, rng)
        logp = float(self.log_probs(context)[tid])
        conf = round(self.declared_confidence(context), 6)
        return Generation(self.render_template(tid, context, rng, conf), template_id=tid, logp=logp, solver_conf=conf)

    # -- verifier -------------------------------------------------------------

    def verifier_outputs(self, context: SolverContext, step: Step, evidence: ToolEvidence | None = None) -> tuple[float, float]:
        e = embed(self.params, verifier_features(step, evidence, repeats_earlier_call(context, step)))
        s, c = e @ self.params.verifier_head
        score = math.tanh(float(s))
        conf = _sigmoid(float(c))
        if evidence is not None and evidence.result != 0:
            score = float(evidence.result)
        return score, conf

    def _verify(self, context: SolverContext, step: Step, evidence: ToolEvidence | None) -> Generation:
        repeat = repeats_earlier_call(context, step)
        if evidence is None and step.action.kind in (TOOL_CALL, FINAL_ANSWER) and not repeat:
            return Generation("<think>Re-check the claim with a tool.</think>\n" + correct_call(context.task).to_json())
        score, conf = self.verifier_outputs(context, step, evidence)
        if repeat:
            critique = "The call repeats an earlier one and adds no information."
        elif evidence is None:
            critique = "No tool evidence; the step restates the task."
        elif evidence.result > 0:
            critique = "Tool re-check agrees with the step."
        elif evidence.result < 0:
            critique = f"Tool re-check contradicts the step; it returned {evidence.observation.payload}."
        else:
            critique = "Tool re-check was inconclusive."
        line = {
            "step_index": step.index,
            "score": score,
            "confidence": conf,
            "critique": critique,
            "tool_check": evidence is not None and evidence.result != 0,
        }
        return Generation("<think>Compare the step with the evidence.</think>\n" + json.dumps(line))

    # -- self-repair ----------------------------------------------------------

    def _repair(self, context: SolverContext, step: Step, v: VerificationTuple) -> Generation:
        task = context.task
        t = step.index
        if v.tool_result < 0 and step.action.kind == TOOL_CALL:
            patch = {
                "action": "PATCH",
                "target_step": t,
                "patch_type": "tool_call",
                "new_content": correct_call(task).to_json(),
                "justification": "The call does not match the scene; re-issue it with the scene's values.",
            }
        elif v.tool_result < 0 and step.action.kind == FINAL_ANSWER:
            validated = _validated_output(context)
            if validated is None:
                patch = {"action": "NO_CHANGE", "target_step": t, "reason": "No validated tool output in the prefix to anchor a fix."}
            else:
                conf = round(self.declared_confidence(context), 6)
                patch = {
                    "action": "PATCH",
                    "target_step": t,
                    "patch_type": "text",
                    "new_content": f"CONFIDENCE: {conf:.6f}\nFINAL_ANSWER: {validated}",
                    "justification": "The answer disagrees with the validated tool output.",
                }
        else:
            patch = {"action": "NO_CHANGE", "target_step": t, "reason": "Evidence does not point to a specific error."}
        return Generation("<think>Locate the faulty segment.</think>\n" + json.dumps(patch))

    def generate(self, context, mode, rng, *, step=None, evidence=None, verification=None) -> Generation:
        if mode is RoleMode.SOLVER:
            return self._solve(context, rng)
        if mode is RoleMode.VERIFIER:
            return self._verify(context, step, evidence)
        if mode is RoleMode.SELF_REPAIR:
            return self._repair(context, step, verification)
        raise ValueError(f"unsupported mode {mode}")


def _validated_output(context: SolverContext) -> str | None:
    """Output of the most recent call in the prefix that matches the scene's own query."""
    target = correct_call(context.task)
    for action, obs in reversed(context.belief):
        if action.tool_call == target and obs is not None and obs.status == "ok":
            return obs.payload
    return None


# -- scripted strategies ----------------------------------------------------------


def canonical_strategy(context: SolverContext, rng: np.random.Generator) -> int:
    """Call the tool on the scene's query, then answer with its output."""
    return ANSWER_LAST_OUTPUT if last_output(context) is not None else CALL_CORRECT


def guess_strategy(context: SolverContext, rng: np.random.Generator) -> int:
    return ANSWER_GUESS


def never_answer_strategy(context: SolverContext, rng: np.random.Generator) -> int:
    return RESTATE


def noisy_strategy(noise: float) -> Strategy:
    def strategy(context: SolverContext, rng: np.random.Generator) -> int:
        if rng.random() < noise:
            return int(rng.integers(N_TEMPLATES))
        return canonical_strategy(context, rng)

    return strategy


# -- cold start -------------------------------------------------------------------


@dataclass(frozen=True)
class ColdStartConfig:
    n_demos: int = 100
    embed_dim: int = 8
    demo_noise: float = 0.5
    init_scale: float = 1.0
    ridge: float = 1e-3
    max_turns: int = 8


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _demonstrations(tasks: list[LabeledTask], policy: ToyPolicy, rng, registry: ToolRegistry, limits: ToolLimits, max_turns: int):
    """Roll the demonstrator out with tool execution; yields (context, step, template_id) per step."""
    from ..trajectory import begin_trajectory

    for task in tasks:
        builder = begin_trajectory(task.instance, 0)
        for _ in range(max_turns):
            ctx = builder.context
            gen = policy.generate(ctx, RoleMode.SOLVER, rng)
            action, _ = parse_solver_action(gen.text)
            obs = invoke(registry, action.tool_call, limits, task.instance.scene) if action.kind == TOOL_CALL else None
            builder.append_step(action, obs)
            yield task, ctx, builder.steps[-1], gen.template_id
            if action.kind == FINAL_ANSWER:
                break


def cold_start(
    kind: str = ARITHMETIC,
    difficulty: int = 2,
    seed: int = 0,
    cfg: ColdStartConfig = ColdStartConfig(),
    registry: ToolRegistry | None = None,
) -> ToyPolicy:
    """Supervised initialisation from a scripted demonstrator.

    The Solver head is set to the demonstrator's template frequencies (a
    state-independent prior), the Verifier head is ridge-fit to step labels
    (re-checked correct, re-checked wrong or repeated, or neutral text), and
    the confidence head to the demonstrator's answer accuracy.
    """
    registry = registry or default_registry()
    limits = ToolLimits()
    rng = np.random.default_rng([seed, 0xC01D])
    params = PolicyParameters.zeros(embed_dim=cfg.embed_dim)
    params.shared[:] = rng.normal(scale=cfg.init_scale / math.sqrt(N_FEATURES), size=params.shared.shape)

    demo_tasks = generate_tasks(kind, difficulty, range(10**6 + seed * cfg.n_demos, 10**6 + (seed + 1) * cfg.n_demos))
    demonstrator = ToyPolicy(params, strategy=noisy_strategy(cfg.demo_noise))
    counts = np.ones(N_TEMPLATES)
    ver_phi, ver_label = [], []
    finals = [0, 0]
    for task, ctx, step, tid in _demonstrations(demo_tasks, demonstrator, rng, registry, limits, cfg.max_turns):
        counts[tid] += 1
        repeat = repeats_earlier_call(ctx, step)
        if step.action.kind == TEXT_STEP:
            evidence, label = None, 0  # neither right nor wrong
        elif repeat:
            evidence, label = None, -1  # adds nothing over the earlier identical call
        else:
            check = correct_call(task.instance)
            obs = invoke(registry, check, limits, task.instance.scene)
            evidence = ToolEvidence(check, obs, recheck_result(step, obs))
            label = 1 if evidence.result > 0 else -1
        ver_phi.append(verifier_features(step, evidence, repeat))
        ver_label.append(label)
        if step.action.kind == FINAL_ANSWER:
            finals[0] += int(label > 0)
            finals[1] += 1

    prior = counts / counts.sum()
    params.solver_head[-1, :] = np.log(prior) - np.log(prior).mean()

    X = embed(params, np.array(ver_phi))
    y = np.array(ver_label, dtype=float)
    # label +1/-1 -> confident right/wrong; 0 -> score 0 at confidence 0.5
    conf_target = y * _logit(VERIFIER_CONF_TARGET)
    score_target = y * math.atanh(VERIFIER_SCORE_TARGET)
    gram = X.T @ X + cfg.ridge * np.eye(X.shape[1])
    params.verifier_head[:, 0] = np.linalg.solve(gram, X.T @ score_target)
    params.verifier_head[:, 1] = np.linalg.solve(gram, X.T @ conf_target)

    accuracy = (finals[0] + 1) / (finals[1] + 2)
    params.conf_head[-1, 0] = _logit(min(max(accuracy, 0.05), 0.95))
    return ToyPolicy(params)

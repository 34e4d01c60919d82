"""Verifier output contract and step-level rewards.

The step reward is built in three stages::

    r_proc = lambda_tool * r_tool + score * conf - beta_div * KL(conf || solver_conf)
    g      = sigmoid(kappa * (tau_c - conf))
    r_t    = r_proc - g * c_repair

The divergence term is the Bernoulli KL between the Verifier's confidence and
the Solver's own confidence for the step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from .errors import RangeError, SchemaError, StepMismatch

KL_CLAMP = 1e-6


@dataclass(frozen=True)
class VerificationTuple:
    step_index: int
    score: float
    conf: float
    critique: str
    tool_check: bool = False
    tool_result: int = 0  # +1 confirmed by a tool re-check, -1 contradicted, 0 none
    # what the Verifier's JSON asserted; tool_check itself reflects an executed re-check
    claimed_tool_check: bool | None = field(default=None, compare=False)

    def __post_init__(self):
        if not -1.0 <= self.score <= 1.0:
            raise RangeError(f"score {self.score} outside [-1, 1]")
        if not 0.0 <= self.conf <= 1.0:
            raise RangeError(f"confidence {self.conf} outside [0, 1]")
        if self.tool_result not in (-1, 0, 1):
            raise RangeError(f"tool_result {self.tool_result} not in {{-1, 0, 1}}")
        if (self.tool_result == 0) == bool(self.tool_check):
            raise SchemaError("tool_result must be nonzero exactly when tool_check is set")

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "score": self.score,
            "confidence": self.conf,
            "critique": self.critique,
            "tool_check": self.tool_check,
            "tool_result": self.tool_result,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationTuple":
        return cls(
            step_index=d["step_index"],
            score=d["score"],
            conf=d["confidence"],
            critique=d["critique"],
            tool_check=d["tool_check"],
            tool_result=d.get("tool_result", 0),
        )

    def with_tool_result(self, result: int) -> "VerificationTuple":
        return replace(self, tool_check=result != 0, tool_result=result)


@dataclass(frozen=True)
class RewardConfig:
    lambda_tool: float = 0.5
    beta_div: float = 0.01
    kappa: float = 10.0
    tau_c: float = 0.7
    c_repair: float = 0.05

    def __post_init__(self):
        if self.lambda_tool < 0 or self.beta_div < 0 or self.c_repair < 0:
            raise ValueError("lambda_tool, beta_div and c_repair must be non-negative")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not 0.0 < self.tau_c < 1.0:
            raise ValueError("tau_c must lie in (0, 1)")


@dataclass(frozen=True)
class ProcessRewardBreakdown:
    tool_term: float
    semantic_term: float
    divergence_term: float
    r_proc: float
    gate: float | None = None
    repair_triggered: bool | None = None
    r_t: float | None = None

    def to_dict(self) -> dict:
        return {
            "tool_term": self.tool_term,
            "semantic_term": self.semantic_term,
            "divergence_term": self.divergence_term,
            "r_proc": self.r_proc,
            "gate": self.gate,
            "repair_triggered": self.repair_triggered,
            "r_t": self.r_t,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProcessRewardBreakdown":
        return cls(**{k: d[k] for k in ("tool_term", "semantic_term", "divergence_term", "r_proc", "gate", "repair_triggered", "r_t")})


_REQUIRED = {
    "step_index": int,
    "score": (int, float),
    "confidence": (int, float),
    "critique": str,
    "tool_check": bool,
}


def _json_objects(text: str):
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, end = decoder.raw_decode(text, pos)
        except ValueError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            yield obj
        pos = text.find("{", end)


def parse_verification(text: str, expected_step: int, tool_result: int = 0) -> VerificationTuple:
    """Parse the Verifier's JSON line, tolerating prose around it.

    ``tool_result`` is the outcome of the re-check the caller executed for this
    step (0 if none ran); ``tool_check`` on the result follows it.
    """
    candidate = None
    for obj in _json_objects(text):
        if "step_index" in obj or "score" in obj:
            candidate = obj
            break
    if candidate is None:
        raise SchemaError("no verification object found")
    for key, kind in _REQUIRED.items():
        if key not in candidate:
            raise SchemaError(f"missing field {key!r}")
        value = candidate[key]
        bad_bool = kind is not bool and isinstance(value, bool)
        if bad_bool or not isinstance(value, kind):
            raise SchemaError(f"field {key!r} has wrong type {type(value).__name__}")
    score, conf = float(candidate["score"]), float(candidate["confidence"])
    if not -1.0 <= score <= 1.0:
        raise RangeError(f"score {score} outside [-1, 1]")
    if not 0.0 <= conf <= 1.0:
        raise RangeError(f"confidence {conf} outside [0, 1]")
    if candidate["step_index"] != expected_step:
        raise StepMismatch(f"expected step {expected_step}, got {candidate['step_index']}")
    return VerificationTuple(
        expected_step,
        score,
        conf,
        candidate["critique"],
        tool_result != 0,
        tool_result,
        claimed_tool_check=candidate["tool_check"],
    )


def bernoulli_kl(p: float, q: float) -> float:
    """KL(Bern(p) || Bern(q)) in nats, with q clamped to [1e-6, 1 - 1e-6]."""
    q = min(max(q, KL_CLAMP), 1.0 - KL_CLAMP)
    kl = 0.0
    if p > 0.0:
        kl += p * math.log(p / q)
    if p < 1.0:
        kl += (1.0 - p) * math.log((1.0 - p) / (1.0 - q))
    return max(kl, 0.0)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def process_reward(v: VerificationTuple, solver_conf: float, cfg: RewardConfig) -> ProcessRewardBreakdown:
    tool_term = cfg.lambda_tool * v.tool_result
    semantic_term = v.score * v.conf
    divergence_term = cfg.beta_div * bernoulli_kl(v.conf, solver_conf)
    return ProcessRewardBreakdown(tool_term, semantic_term, divergence_term, tool_term + semantic_term - divergence_term)


def repair_gate(conf: float, cfg: RewardConfig) -> tuple[float, bool]:
    """Soft gate value and the hard trigger ``conf < tau_c``."""
    return sigmoid(cfg.kappa * (cfg.tau_c - conf)), conf < cfg.tau_c


def effective_step_reward(breakdown: ProcessRewardBreakdown, gate: tuple[float, bool], cfg: RewardConfig) -> float:
    """The soft penalty applies at every step, triggered or not."""
    return breakdown.r_proc - gate[0] * cfg.c_repair


def score_step(
    v: VerificationTuple,
    solver_conf: float,
    cfg: RewardConfig,
    gate_conf: float | None = None,
) -> ProcessRewardBreakdown:
    """Complete breakdown for one verified step.

    ``gate_conf`` overrides the confidence fed to the gate; after a repair it is
    the confidence that triggered the repair, while ``v`` is the re-verification.
    """
    base = process_reward(v, solver_conf, cfg)
    gate = repair_gate(v.conf if gate_conf is None else gate_conf, cfg)
    return replace(base, gate=gate[0], repair_triggered=gate[1], r_t=effective_step_reward(base, gate, cfg))

"""Confidence-gated self-repair: patch parsing, local patching and the repair cycle."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import BackendProtocolError, PatchOutOfRange, SchemaError, UnknownRepairAction
from .policy.base import Policy, RoleMode
from .trajectory import Step, SolverContext
from .verification import VerificationTuple

PATCH = "PATCH"
NO_CHANGE = "NO_CHANGE"
PATCH_TYPES = ("text", "code", "tool_call", "parameter")


@dataclass(frozen=True)
class RepairDecision:
    action: str
    target_step: int
    patch_type: str | None = None
    new_content: str | None = None
    justification: str = ""
    reason: str = ""

    def __post_init__(self):
        if self.action == PATCH:
            if self.patch_type not in PATCH_TYPES or self.new_content is None:
                raise SchemaError("PATCH needs patch_type and new_content")
        elif self.action != NO_CHANGE:
            raise UnknownRepairAction(self.action)


@dataclass(frozen=True)
class RepairOutcome:
    applied: bool
    original_step: Step
    repaired_step: Step | None
    re_verification: VerificationTuple | None
    attempts: int

    def __post_init__(self):
        if self.applied and (self.repaired_step is None or self.re_verification is None):
            raise ValueError("an applied repair needs the repaired step and its re-verification")


def parse_repair_decision(text: str) -> RepairDecision:
    """Parse a PATCH / NO_CHANGE object, tolerating prose before and after it."""
    decoder = json.JSONDecoder()
    obj = None
    pos = text.find("{")
    while pos != -1:
        try:
            candidate, end = decoder.raw_decode(text, pos)
        except ValueError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(candidate, dict) and "action" in candidate:
            obj = candidate
            break
        pos = text.find("{", end)
    if obj is None:
        raise SchemaError("no repair decision object found")
    action = obj["action"]
    if action not in (PATCH, NO_CHANGE):
        raise UnknownRepairAction(str(action))
    target = obj.get("target_step")
    if not isinstance(target, int) or isinstance(target, bool):
        raise SchemaError("target_step must be an integer")
    if action == PATCH:
        for key in ("patch_type", "new_content", "justification"):
            if not isinstance(obj.get(key), str):
                raise SchemaError(f"PATCH field {key!r} missing or not a string")
        if obj["patch_type"] not in PATCH_TYPES:
            raise SchemaError(f"unknown patch_type {obj['patch_type']!r}")
        return RepairDecision(PATCH, target, obj["patch_type"], obj["new_content"], justification=obj["justification"])
    if not isinstance(obj.get("reason"), str):
        raise SchemaError("NO_CHANGE field 'reason' missing or not a string")
    return RepairDecision(NO_CHANGE, target, reason=obj["reason"])


def apply_patch(prefix: Sequence[Step], decision: RepairDecision) -> list[Step]:
    """Rewrite the target step's content and drop everything after it.

    NO_CHANGE returns the prefix unchanged. The rewritten step keeps its old
    action kind; callers regenerate it from the patch before use.
    """
    if decision.action == NO_CHANGE:
        return list(prefix)
    t = decision.target_step
    if not 1 <= t <= len(prefix):
        raise PatchOutOfRange(f"target_step {t} outside 1..{len(prefix)}")
    target = prefix[t - 1]
    rewritten = replace(target, action=replace(target.action, content=decision.new_content), repaired=True)
    return list(prefix[: t - 1]) + [rewritten]


# (context, rng) -> (candidate step, verification); supplied by the runner, which owns tool execution
Regenerate = Callable[[SolverContext, np.random.Generator], tuple[Step, VerificationTuple]]


@dataclass(frozen=True)
class RepairConfig:
    max_repairs_per_step: int = 1
    tau_c: float = 0.7


def run_repair_cycle(
    policy: Policy,
    context: SolverContext,
    step: Step,
    v: VerificationTuple,
    cfg: RepairConfig,
    regenerate: Regenerate,
    rng: np.random.Generator,
) -> RepairOutcome:
    """Ask for a patch to ``step``, regenerate it under the patch, and re-verify.

    ``context`` is the state before ``step``. A patch aimed at any other step
    would rewrite validated context and counts as a failed attempt, as does
    unparseable output. Stops at NO_CHANGE, at a re-verification with
    confidence >= tau_c, or when the attempt budget runs out.
    """
    attempts = 0
    current_step, current_v = step, v
    applied = False
    while attempts < cfg.max_repairs_per_step:
        attempts += 1
        text = policy.generate(context, RoleMode.SELF_REPAIR, rng, step=current_step, verification=current_v).text
        try:
            decision = parse_repair_decision(text)
        except SchemaError:
            continue
        if decision.action == NO_CHANGE:
            break
        if decision.target_step != step.index:
            continue
        try:
            new_step, new_v = regenerate(context.with_patch(decision), rng)
        except BackendProtocolError:
            continue
        current_step, current_v = replace(new_step, repaired=True), new_v
        applied = True
        if new_v.conf >= cfg.tau_c:
            break
    if not applied:
        return RepairOutcome(False, step, None, None, attempts)
    return RepairOutcome(True, step, current_step, current_v, attempts)

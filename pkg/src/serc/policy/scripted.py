"""Policy that replays fixed texts per role; for tests and fixtures."""

from __future__ import annotations

from collections import deque
from typing import Iterable

from .base import Generation, RoleMode


class ScriptedPolicy:
    """Pops the next scripted text for the requested mode.

    A mode whose queue runs dry repeats its last text; a mode with no script
    raises ``LookupError``.
    """

    differentiable = False

    def __init__(self, solver: Iterable[str] = (), verifier: Iterable[str] = (), self_repair: Iterable[str] = ()):
        self._queues = {
            RoleMode.SOLVER: deque(solver),
            RoleMode.VERIFIER: deque(verifier),
            RoleMode.SELF_REPAIR: deque(self_repair),
        }
        self._last: dict[RoleMode, str] = {}
        self.calls: list[RoleMode] = []

    def generate(self, context, mode, rng, *, step=None, evidence=None, verification=None) -> Generation:
        self.calls.append(mode)
        q = self._queues[mode]
        if q:
            self._last[mode] = q.popleft()
        elif mode not in self._last:
            raise LookupError(f"no scripted output for {mode.value}")
        return Generation(self._last[mode])

"""Policy backends: toy (trainable), remote (evaluation only) and scripted (tests)."""

from .base import Generation, Policy, RoleMode, ToolEvidence, load_prompt, parse_solver_action, recheck_result
from .toy import ColdStartConfig, PolicyParameters, ToyPolicy, cold_start

__all__ = [
    "ColdStartConfig",
    "Generation",
    "Policy",
    "PolicyParameters",
    "RoleMode",
    "ToolEvidence",
    "ToyPolicy",
    "cold_start",
    "load_prompt",
    "parse_solver_action",
    "recheck_result",
]

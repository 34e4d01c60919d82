"""Self-evolving reasoning cycle at desk scale.

A single policy plays Solver, Verifier and Self-Repair roles. Tool-grounded
step verification yields process rewards, low-confidence steps are patched
and re-verified, and group-relative policy optimisation closes the loop.
"""

from .envs import EnvConfig, generate_task, outcome_reward
from .grpo import OptimConfig, ReturnConfig, edlp_gradient, edlp_loss, group_advantages, trajectory_return
from .runner import RunConfig, best_of_n, run_inner_loop, run_outer_iteration, run_serc
from .verification import RewardConfig, VerificationTuple, process_reward, repair_gate

__version__ = "0.1.0"

__all__ = [
    "EnvConfig",
    "OptimConfig",
    "ReturnConfig",
    "RewardConfig",
    "RunConfig",
    "VerificationTuple",
    "best_of_n",
    "edlp_gradient",
    "edlp_loss",
    "generate_task",
    "group_advantages",
    "outcome_reward",
    "process_reward",
    "repair_gate",
    "run_inner_loop",
    "run_outer_iteration",
    "run_serc",
    "trajectory_return",
]

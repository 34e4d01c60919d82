"""The self-evolving loop: roll out, verify, repair, score; then one GRPO step.

Output layout of :func:`run_serc` (``out_dir``)::

    metrics.csv                      one row per outer iteration
    tasks.jsonl                      every task used, with ground truth
    trajectories/iter_000.jsonl      scored trajectories of iteration 0, ...
    batches.jsonl                    one record per GRPO group
    policy/iter_000.json             parameters before iteration 0's update, ...
    policy/final.json
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import EnvConfig, LabeledTask, correct_call, corrupted_call, generate_tasks, outcome_reward, task_to_record
from .errors import BackendError, CandidatesForDifferentTasks, ConfigError, MalformedToolCall, SchemaError, UnknownTool
from .grpo import OptimConfig, ReturnConfig, apply_update, batch_record, build_batch, edlp_gradient, edlp_loss, trajectory_return
from .policy.base import Policy, RoleMode, ToolEvidence, parse_solver_action, recheck_result
from .policy.toy import ColdStartConfig, ToyPolicy, cold_start
from .repair import RepairConfig, run_repair_cycle
from .tools import ToolLimits, ToolRegistry, default_registry, find_tool_calls, invoke
from .trajectory import (
    FINAL_ANSWER,
    TOOL_CALL,
    Action,
    Observation,
    RepairRecord,
    SolverContext,
    Step,
    ToolCall,
    Trajectory,
    begin_trajectory,
    encode_trajectory,
)
from .verification import RewardConfig, VerificationTuple, parse_verification, score_step

log = logging.getLogger(__name__)

METRICS_HEADER = ("iteration", "mean_return", "solve_rate", "mean_conf", "repair_rate", "loss", "wall_clock_ms")
DEFAULT_SOLVER_CONF = 0.5
EVAL_SEED_OFFSET = 10**7


@dataclass(frozen=True)
class RunConfig:
    n_iter: int = 3
    tasks_per_iter: int = 64
    rollouts_per_task: int = 4
    group_size: int = 8
    max_steps: int = 8
    max_repairs_per_step: int = 1
    reward: RewardConfig = field(default_factory=RewardConfig)
    returns: ReturnConfig = field(default_factory=ReturnConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    cold_start: ColdStartConfig = field(default_factory=ColdStartConfig)
    tools: ToolLimits = field(default_factory=ToolLimits)
    seed: int = 0
    width: int = 1
    warmup_iters: int = 0
    eval_tasks: int = 64
    record_wall_clock: bool = False
    backend: str = "toy"

    def __post_init__(self):
        for name in ("tasks_per_iter", "rollouts_per_task", "group_size", "max_steps", "width", "eval_tasks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.n_iter < 0 or self.warmup_iters < 0 or self.max_repairs_per_step < 0:
            raise ConfigError("n_iter, warmup_iters and max_repairs_per_step must be non-negative")
        if self.group_size % self.rollouts_per_task:
            raise ConfigError("group_size must be a multiple of rollouts_per_task")
        if self.optim.group_size != self.group_size:
            raise ConfigError("optim.group_size and group_size disagree")
        if self.backend not in ("toy", "remote"):
            raise ConfigError(f"unknown backend {self.backend!r}")

    @property
    def tasks_per_group(self) -> int:
        return self.group_size // self.rollouts_per_task

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class IterationMetrics:
    iteration: int
    mean_return: float
    solve_rate: float
    mean_conf: float
    repair_rate: float
    loss: float
    wall_clock_ms: int = 0
    n_trajectories: int = 0
    n_solved: int = 0
    n_aborted: int = 0
    n_degenerate_groups: int = 0
    surrogate: float = 0.0
    kl: float = 0.0
    entropy: float = 0.0

    def csv_row(self) -> list:
        return [self.iteration, repr(self.mean_return), repr(self.solve_rate), repr(self.mean_conf),
                repr(self.repair_rate), repr(self.loss), self.wall_clock_ms]


# -- one step ---------------------------------------------------------------------------


def _run_tool(registry: ToolRegistry, call: ToolCall, limits: ToolLimits, scene) -> Observation:
    try:
        return invoke(registry, call, limits, scene)
    except UnknownTool as exc:
        return Observation(call.tool_name, f"UnknownTool: {exc}", "tool-error")


def propose_step(policy: Policy, context: SolverContext, rng, registry, limits, *, template_id=None, solver_conf=None) -> Step:
    """One Solver generation, parsed and (for tool calls) executed; not yet verified."""
    gen = policy.generate(context, RoleMode.SOLVER, rng)
    action, n_calls = parse_solver_action(gen.text)
    obs = None
    if action.kind == TOOL_CALL:
        if n_calls > 1:
            obs = Observation(action.tool_call.tool_name, "protocol: more than one tool call in a single action", "tool-error")
        else:
            obs = _run_tool(registry, action.tool_call, limits, context.task.scene)
    if gen.template_id is not None:
        template_id = gen.template_id
    if gen.solver_conf is not None:
        solver_conf = gen.solver_conf
    if solver_conf is None:
        solver_conf = action.declared_confidence if action.declared_confidence is not None else DEFAULT_SOLVER_CONF
    return Step(
        index=context.turn,
        state_digest=context.digest(),
        action=action,
        observation=obs,
        template_id=template_id,
        solver_conf=solver_conf,
    )


class VerifierProtocolError(BackendError):
    """Verifier output that does not parse as a verification tuple."""


def verify_step(policy: Policy, context: SolverContext, step: Step, rng, registry, limits) -> VerificationTuple:
    """Verifier pass with an optional tool re-check in between.

    If the first Verifier output contains a tool call, it is executed and the
    Verifier is asked again with the evidence; the tool_result of the tuple is
    the re-check outcome, not the Verifier's claim.
    """
    first = policy.generate(context, RoleMode.VERIFIER, rng, step=step).text
    try:
        calls = find_tool_calls(first)
    except MalformedToolCall:
        calls = []
    # a line that is already a verification tuple wins over a stray call-like object
    if calls and '"step_index"' not in first:
        call = calls[0]
        obs = _run_tool(registry, call, limits, context.task.scene)
        evidence = ToolEvidence(call, obs, recheck_result(step, obs))
        text = policy.generate(context, RoleMode.VERIFIER, rng, step=step, evidence=evidence).text
        tool_result = evidence.result
    else:
        text, tool_result = first, 0
    try:
        return parse_verification(text, step.index, tool_result)
    except SchemaError as exc:
        raise VerifierProtocolError(f"step {step.index}: {exc}") from exc


# -- one trajectory ---------------------------------------------------------------------


def rollout_seed(run_seed: int, iteration: int, task_index: int, rollout: int) -> int:
    """Independent stream per (iteration, task, rollout); iteration -1 is the evaluation stream."""
    return int(np.random.SeedSequence([run_seed, iteration + 1, task_index, rollout]).generate_state(1)[0])


def run_trajectory(
    policy: Policy,
    task: LabeledTask,
    cfg: RunConfig,
    seed: int,
    registry: ToolRegistry | None = None,
) -> Trajectory:
    registry = registry or default_registry()
    rng = np.random.default_rng(seed)
    limits = cfg.tools
    rcfg = RepairConfig(cfg.max_repairs_per_step, cfg.reward.tau_c)
    builder = begin_trajectory(task.instance, seed)
    for _ in range(cfg.max_steps):
        ctx = builder.context
        step = propose_step(policy, ctx, rng, registry, limits)
        v = verify_step(policy, ctx, step, rng, registry, limits)
        repair = None
        final_step, final_v = step, v
        if v.conf < cfg.reward.tau_c and cfg.max_repairs_per_step > 0:

            def regenerate(pctx, r, _orig=step):
                new = propose_step(policy, pctx, r, registry, limits, template_id=_orig.template_id, solver_conf=_orig.solver_conf)
                new = replace(new, index=_orig.index, state_digest=_orig.state_digest, template_id=_orig.template_id, solver_conf=_orig.solver_conf)
                return new, verify_step(policy, ctx, new, r, registry, limits)

            outcome = run_repair_cycle(policy, ctx, step, v, rcfg, regenerate, rng)
            repair = RepairRecord(outcome.attempts, outcome.applied, v, step.action.content)
            if outcome.applied:
                final_step, final_v = outcome.repaired_step, outcome.re_verification
        breakdown = score_step(final_v, final_step.solver_conf, cfg.reward, gate_conf=v.conf)
        builder.append_step(
            final_step.action,
            final_step.observation,
            verification=final_v,
            process_reward=breakdown,
            effective_reward=breakdown.r_t,
            repaired=final_step is not step,
            template_id=final_step.template_id,
            solver_conf=final_step.solver_conf,
            repair=repair,
        )
        if final_step.action.kind == FINAL_ANSWER:
            break
    truncated = builder.steps[-1].action.kind != FINAL_ANSWER
    r_out = 0.0 if truncated else outcome_reward(task, builder.steps[-1].action.content)
    rewards = [s.effective_reward for s in builder.steps]
    return builder.finalize(r_out, trajectory_return(rewards, r_out, cfg.returns), allow_truncated=True)


# -- inner loop ---------------------------------------------------------------------------


@dataclass
class InnerResult:
    trajectories: list[Trajectory]  # task-major, rollout-minor; aborted ones omitted
    owners: list[int]  # task index of each trajectory
    n_aborted: int


def run_inner_loop(
    policy: Policy,
    tasks: Sequence[LabeledTask],
    cfg: RunConfig,
    iteration: int = 0,
    registry: ToolRegistry | None = None,
) -> InnerResult:
    registry = registry or default_registry()
    jobs = [(j, r, rollout_seed(cfg.seed, iteration, j, r)) for j in range(len(tasks)) for r in range(cfg.rollouts_per_task)]

    def work(job):
        j, r, seed = job
        try:
            return run_trajectory(policy, tasks[j], cfg, seed, registry)
        except BackendError as exc:
            log.warning("trajectory aborted (task %s, rollout %d): %s", tasks[j].id, r, exc)
            return None

    if cfg.width > 1:
        with ThreadPoolExecutor(max_workers=cfg.width) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]
    kept = [(job[0], t) for job, t in zip(jobs, results) if t is not None]
    return InnerResult([t for _, t in kept], [j for j, _ in kept], len(results) - len(kept))


def summarize(trajectories: Sequence[Trajectory], iteration: int, tau_c: float, **extra) -> IterationMetrics:
    n = len(trajectories)
    solved = sum(1 for t in trajectories if t.outcome_reward == 1.0)
    steps = [s for t in trajectories for s in t.steps]
    confs = [s.verification.conf for s in steps if s.verification is not None]
    triggered = [s for s in steps if s.gate_conf is not None and s.gate_conf < tau_c]
    repaired = sum(1 for s in steps if s.repaired)
    return IterationMetrics(
        iteration=iteration,
        mean_return=math.fsum(t.total_return for t in trajectories) / n if n else 0.0,
        solve_rate=solved / n if n else 0.0,
        mean_conf=math.fsum(confs) / len(confs) if confs else 0.0,
        repair_rate=repaired / len(triggered) if triggered else 0.0,
        n_trajectories=n,
        n_solved=solved,
        **extra,
    )


def evaluate(policy: Policy, tasks: Sequence[LabeledTask], cfg: RunConfig, registry=None, stream: int = -1) -> tuple[IterationMetrics, list[Trajectory]]:
    """Inner loop only; the policy is left untouched. ``stream`` selects the rollout seeds."""
    res = run_inner_loop(policy, tasks, cfg, stream, registry)
    m = summarize(res.trajectories, 0, cfg.reward.tau_c, loss=0.0, n_aborted=res.n_aborted)
    return m, res.trajectories


# -- outer loop ---------------------------------------------------------------------------


@dataclass
class OuterResult:
    policy: ToyPolicy
    metrics: IterationMetrics
    trajectories: list[Trajectory]
    batch_records: list[dict]


def task_seeds(cfg: RunConfig, iteration: int) -> range:
    start = cfg.env.seed + iteration * cfg.tasks_per_iter
    return range(start, start + cfg.tasks_per_iter)


def iteration_tasks(cfg: RunConfig, iteration: int) -> list[LabeledTask]:
    return generate_tasks(cfg.env.kind, cfg.env.difficulty, task_seeds(cfg, iteration))


def eval_task_set(cfg: RunConfig) -> list[LabeledTask]:
    start = cfg.env.seed + EVAL_SEED_OFFSET
    return generate_tasks(cfg.env.kind, cfg.env.difficulty, range(start, start + cfg.eval_tasks))


def run_outer_iteration(
    policy: ToyPolicy,
    cfg: RunConfig,
    iteration: int = 0,
    tasks: Sequence[LabeledTask] | None = None,
    registry: ToolRegistry | None = None,
) -> OuterResult:
    """Rollouts under a frozen snapshot, then a single update over all groups.

    Groups whose returns are all equal have zero advantages; they are counted as
    degenerate and contribute only through the KL and entropy terms.
    """
    if not getattr(policy, "differentiable", False):
        raise ConfigError("training needs the toy backend")
    t0 = time.perf_counter()
    old = policy.with_params(policy.params.copy())
    tasks = iteration_tasks(cfg, iteration) if tasks is None else list(tasks)
    res = run_inner_loop(old, tasks, cfg, iteration, registry)

    warm = iteration < cfg.warmup_iters
    by_group: dict[int, list[Trajectory]] = {}
    for owner, traj in zip(res.owners, res.trajectories):
        by_group.setdefault(owner // cfg.tasks_per_group, []).append(traj)
    batches, degenerate = [], 0
    for g in sorted(by_group):
        group = by_group[g]
        returns = [cfg.returns.alpha_out * t.outcome_reward for t in group] if warm else None
        batch = build_batch(group, old, returns=returns, eps=cfg.optim.adv_epsilon)
        if np.ptp(batch.returns) == 0.0:
            degenerate += 1
        batches.append(batch)

    records = []
    if batches:
        loss, br = edlp_loss(batches, old, old, cfg.optim)
        grad = edlp_gradient(batches, old, old, cfg.optim)
        new = apply_update(old, grad, cfg.optim.learning_rate)
        for g, batch in enumerate(batches):
            _, gbr = edlp_loss(batch, old, old, cfg.optim)
            records.append(batch_record(batch, gbr, iteration=iteration, group=g, warmup=warm))
    else:
        loss, br, new = 0.0, None, old
    wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.record_wall_clock else 0
    metrics = summarize(
        res.trajectories,
        iteration,
        cfg.reward.tau_c,
        loss=float(loss),
        wall_clock_ms=wall,
        n_aborted=res.n_aborted,
        n_degenerate_groups=degenerate,
        surrogate=br.surrogate if br else 0.0,
        kl=br.kl if br else 0.0,
        entropy=br.entropy if br else 0.0,
    )
    return OuterResult(new, metrics, res.trajectories, records)


@dataclass
class RunResult:
    metrics: list[IterationMetrics]
    initial_policy: ToyPolicy
    policy: ToyPolicy


def initial_policy(cfg: RunConfig, registry=None) -> ToyPolicy:
    return cold_start(cfg.env.kind, cfg.env.difficulty, cfg.seed, cfg.cold_start, registry)


def metrics_csv(metrics: Sequence[IterationMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in metrics:
        w.writerow(m.csv_row())
    return buf.getvalue()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def run_serc(cfg: RunConfig, out_dir=None, policy: ToyPolicy | None = None, registry=None) -> RunResult:
    """n_iter outer iterations; everything written under ``out_dir`` if given."""
    if cfg.backend != "toy":
        raise ConfigError("run needs the toy backend; use eval for remote backends")
    registry = registry or default_registry()
    policy = policy or initial_policy(cfg, registry)
    start = policy
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "trajectories").mkdir(parents=True, exist_ok=True)
        (out / "policy").mkdir(exist_ok=True)
        _write_json(out / "config.json", cfg.to_dict())
        for name in ("tasks.jsonl", "batches.jsonl"):
            (out / name).write_text("", encoding="utf-8")
    metrics: list[IterationMetrics] = []
    for k in range(cfg.n_iter):
        tasks = iteration_tasks(cfg, k)
        result = run_outer_iteration(policy, cfg, k, tasks, registry)
        if out is not None:
            _write_json(out / "policy" / f"iter_{k:03d}.json", policy.params.to_dict())
            with open(out / "tasks.jsonl", "a", encoding="utf-8") as fh:
                for t in tasks:
                    fh.write(json.dumps(task_to_record(t), separators=(",", ":")) + "\n")
            with open(out / "trajectories" / f"iter_{k:03d}.jsonl", "w", encoding="utf-8") as fh:
                for t in result.trajectories:
                    fh.write(encode_trajectory(t) + "\n")
            with open(out / "batches.jsonl", "a", encoding="utf-8") as fh:
                for rec in result.batch_records:
                    fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
        metrics.append(result.metrics)
        log.info("iteration %d: solve_rate=%.3f mean_return=%.4f loss=%.5f", k, result.metrics.solve_rate, result.metrics.mean_return, result.metrics.loss)
        policy = result.policy
    if out is not None:
        (out / "metrics.csv").write_text(metrics_csv(metrics), encoding="utf-8")
        _write_json(out / "policy" / "final.json", policy.params.to_dict())
    return RunResult(metrics, start, policy)


# -- log consistency ----------------------------------------------------------------------


def check_log(trajectories: Sequence[Trajectory], reward: RewardConfig, returns: ReturnConfig) -> list[str]:
    """Recompute every r_t and g(tau) from the logged tuples; returns mismatch descriptions."""
    problems = []
    for t in trajectories:
        for s in t.steps:
            if s.verification is None:
                problems.append(f"{t.task_id}/seed {t.seed} step {s.index}: no verification")
                continue
            r = score_step(s.verification, s.solver_conf, reward, gate_conf=s.gate_conf).r_t
            if r != s.effective_reward:
                problems.append(f"{t.task_id}/seed {t.seed} step {s.index}: r_t {s.effective_reward!r} != {r!r}")
            if s.repair is not None and s.repair.attempts > 0 and s.repair.original_verification.conf >= reward.tau_c:
                problems.append(f"{t.task_id}/seed {t.seed} step {s.index}: repair at conf >= tau_c")
            if s.repaired and s.repair is None:
                problems.append(f"{t.task_id}/seed {t.seed} step {s.index}: repaired without repair record")
        g = trajectory_return(t.step_rewards, t.outcome_reward, returns)
        if g != t.total_return:
            problems.append(f"{t.task_id}/seed {t.seed}: return {t.total_return!r} != {g!r}")
    return problems


# -- best of n ----------------------------------------------------------------------------


@dataclass(frozen=True)
class BoNResult:
    index: int
    scores: tuple[float, ...]


def _context_before(traj: Trajectory, step_index: int) -> SolverContext:
    ctx = SolverContext(traj.task)
    for s in traj.steps[: step_index - 1]:
        ctx = ctx.extend(s.action, s.observation)
    return ctx


def prm_score(policy: Policy, traj: Trajectory, reward: RewardConfig, returns: ReturnConfig, rng, registry=None, limits=None) -> float:
    """g(tau) from fresh step verifications with alpha_out = 0."""
    registry = registry or default_registry()
    limits = limits or ToolLimits()
    rewards = []
    for s in traj.steps:
        v = verify_step(policy, _context_before(traj, s.index), s, rng, registry, limits)
        solver_conf = s.solver_conf if s.solver_conf is not None else (
            s.action.declared_confidence if s.action.declared_confidence is not None else DEFAULT_SOLVER_CONF
        )
        rewards.append(score_step(v, solver_conf, reward).r_t)
    return trajectory_return(rewards, 0.0, replace(returns, alpha_out=0.0))


def best_of_n(
    policy: Policy,
    candidates: Sequence[Trajectory],
    reward: RewardConfig = RewardConfig(),
    returns: ReturnConfig = ReturnConfig(),
    seed: int = 0,
    registry=None,
) -> BoNResult:
    """Index of the candidate the Verifier ranks highest (lowest index on ties)."""
    if not candidates:
        raise ValueError("best_of_n needs at least one candidate")
    ids = {c.task_id for c in candidates}
    if len(ids) > 1:
        raise CandidatesForDifferentTasks(f"candidates span tasks {sorted(ids)}")
    scores = []
    for i, c in enumerate(candidates):
        if c.task is None:
            raise ValueError(f"candidate {i} has no task attached")
        scores.append(prm_score(policy, c, reward, returns, np.random.default_rng(seed), registry))
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return BoNResult(best, tuple(scores))


def make_bon_candidates(
    task: LabeledTask,
    rng: np.random.Generator,
    n: int = 8,
    correct_index: int | None = None,
    registry=None,
    declared_confidence: float = 0.9,
) -> tuple[list[Trajectory], int]:
    """n unscored two-step candidates (call, answer with its output); exactly one uses the right call."""
    registry = registry or default_registry()
    limits = ToolLimits()
    if correct_index is None:
        correct_index = int(rng.integers(n))
    out = []
    for i in range(n):
        call = correct_call(task.instance) if i == correct_index else corrupted_call(task.instance, rng)
        builder = begin_trajectory(task.instance, i)
        obs = _run_tool(registry, call, limits, task.instance.scene)
        builder.append_step(Action(TOOL_CALL, call.to_json(), tool_call=call), obs)
        answer = obs.payload if obs.status == "ok" else "unknown"
        builder.append_step(Action(FINAL_ANSWER, answer, declared_confidence=declared_confidence))
        out.append(builder.finalize(outcome_reward(task, answer)))
    return out, correct_index

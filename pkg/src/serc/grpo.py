"""Trajectory returns, group-relative advantages and the clipped GRPO objective.

The loss over a group of G trajectories is::

    L = -mean_i min(rho_i * A_i, clip(rho_i, 1 - eps, 1 + eps) * A_i)
        + beta_kl * KL(pi || pi_old) - beta_ent * H(pi)

with rho_i the product of per-action probability ratios along trajectory i
(policy-sampled actions only) and KL/H averaged over the visited Solver
states. Gradients are closed-form for the toy policy; clip and min are
treated as piecewise selections, with zero gradient at exact ties between
branches whose slopes differ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import BackendNotDifferentiable, NonFiniteInput
from .policy.toy import N_FEATURES, PolicyParameters, ToyPolicy, embed, log_softmax, solver_features
from .trajectory import SolverContext, Trajectory


# the toy policy and a hosted model live on very different loss scales
TOY_LEARNING_RATE = 0.5
REMOTE_LEARNING_RATE = 5e-7


@dataclass(frozen=True)
class ReturnConfig:
    alpha_out: float = 1.0
    gamma: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class OptimConfig:
    group_size: int = 8
    adv_epsilon: float = 1e-8
    clip_range: float = 0.2
    beta_kl: float = 0.001
    beta_ent: float = 0.01
    learning_rate: float = TOY_LEARNING_RATE
    ratio_cap: float = 1e6

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if not 0.0 < self.clip_range < 1.0:
            raise ValueError("clip_range must lie in (0, 1)")
        if self.adv_epsilon < 0 or self.beta_kl < 0 or self.beta_ent < 0:
            raise ValueError("adv_epsilon, beta_kl and beta_ent must be non-negative")
        if not self.learning_rate > 0 or not self.ratio_cap > 0:
            raise ValueError("learning_rate and ratio_cap must be positive")


def trajectory_return(step_rewards: Sequence[float], r_out: float, cfg: ReturnConfig) -> float:
    if len(step_rewards) < 1:
        raise ValueError("a trajectory has at least one step")
    total = cfg.alpha_out * r_out
    for t, r in enumerate(step_rewards):
        total += cfg.gamma**t * r
    return total


def group_advantages(returns: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """(g - mean) / (std + eps) with the population std.

    Mean and deviations are computed exactly over the float inputs, so a shift
    or power-of-two scale that is exact on the inputs leaves the output
    bit-for-bit unchanged.
    """
    g = [Fraction(float(x)) for x in returns]
    if not g:
        raise ValueError("empty group")
    if not all(math.isfinite(float(x)) for x in returns):
        raise NonFiniteInput("non-finite return")
    mean = sum(g, Fraction(0)) / len(g)
    dev = [x - mean for x in g]
    std = math.sqrt(sum((d * d for d in dev), Fraction(0)) / len(g))
    denom = std + eps
    if denom == 0.0:
        return np.zeros(len(g))
    return np.array([float(d) / denom for d in dev])


def importance_ratio(logp_new: float, logp_old: float, ratio_cap: float = 1e6) -> tuple[float, bool]:
    """min(exp(logp_new - logp_old), ratio_cap) and whether the cap bit."""
    if not (math.isfinite(logp_new) and math.isfinite(logp_old)):
        raise NonFiniteInput("log-probabilities must be finite")
    d = logp_new - logp_old
    if d >= math.log(ratio_cap):
        return ratio_cap, True
    rho = math.exp(d)
    if rho >= ratio_cap:
        return ratio_cap, True
    return rho, False


def clipped_surrogate(rho: float, advantage: float, clip_range: float) -> tuple[float, float]:
    """min(rho*A, clip(rho)*A) and its derivative in rho (active branch, 0 at ties)."""
    lo, hi = 1.0 - clip_range, 1.0 + clip_range
    unclipped = rho * advantage
    clipped = min(max(rho, lo), hi) * advantage
    active = lo < rho < hi or unclipped < clipped
    return min(unclipped, clipped), (advantage if active else 0.0)


@dataclass
class GroupBatch:
    """G trajectories flattened to their policy-sampled Solver decisions.

    ``state_features[s]`` / ``state_actions[s]`` describe decision s, taken in
    trajectory ``state_owner[s]``.
    """

    returns: np.ndarray
    advantages: np.ndarray
    state_features: np.ndarray
    state_actions: np.ndarray
    state_owner: np.ndarray
    logp_old: np.ndarray
    logp_new: np.ndarray | None = None
    task_ids: tuple[str, ...] = ()
    trajectories: tuple[Trajectory, ...] = field(default=(), repr=False)

    def __post_init__(self):
        G = len(self.returns)
        for name in ("advantages", "logp_old"):
            if len(getattr(self, name)) != G:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {G}")
        if len(self.state_actions) != len(self.state_features) or len(self.state_owner) != len(self.state_features):
            raise ValueError("state arrays disagree in length")

    @property
    def G(self) -> int:
        return len(self.returns)


@dataclass(frozen=True)
class LossBreakdown:
    surrogate: float
    kl: float
    entropy: float
    total: float

    def to_dict(self) -> dict:
        return {"surrogate": self.surrogate, "kl": self.kl, "entropy": self.entropy, "total": self.total}


def decision_states(trajectory: Trajectory) -> list[tuple[SolverContext, int]]:
    """(state, template) for every step whose action the policy sampled."""
    if trajectory.task is None:
        raise ValueError(f"trajectory {trajectory.task_id} has no task attached")
    ctx = SolverContext(trajectory.task)
    out = []
    for step in trajectory.steps:
        if step.template_id is not None:
            out.append((ctx, step.template_id))
        ctx = ctx.extend(step.action, step.observation)
    return out


def build_batch(
    trajectories: Sequence[Trajectory],
    old_policy: ToyPolicy,
    returns: Sequence[float] | None = None,
    eps: float = 1e-8,
) -> GroupBatch:
    returns = np.array([t.total_return for t in trajectories] if returns is None else returns, dtype=float)
    feats, actions, owner = [], [], []
    for i, traj in enumerate(trajectories):
        for ctx, tid in decision_states(traj):
            feats.append(solver_features(ctx))
            actions.append(tid)
            owner.append(i)
    batch = GroupBatch(
        returns=returns,
        advantages=group_advantages(returns, eps),
        state_features=np.array(feats).reshape(len(feats), N_FEATURES),
        state_actions=np.array(actions, dtype=int),
        state_owner=np.array(owner, dtype=int),
        logp_old=np.zeros(len(trajectories)),
        task_ids=tuple(t.task_id for t in trajectories),
        trajectories=tuple(trajectories),
    )
    batch.logp_old = trajectory_log_probs(batch, old_policy.params)
    batch.logp_new = batch.logp_old.copy()
    return batch


def _forward(params: PolicyParameters, phi: np.ndarray):
    e1 = embed(params, phi)
    logp = log_softmax(e1 @ params.solver_head)
    return e1, logp


def trajectory_log_probs(batch: GroupBatch, params: PolicyParameters) -> np.ndarray:
    if len(batch.state_actions) == 0:
        return np.zeros(batch.G)
    _, logp = _forward(params, batch.state_features)
    chosen = logp[np.arange(len(batch.state_actions)), batch.state_actions]
    return np.bincount(batch.state_owner, weights=chosen, minlength=batch.G)


def _require_toy(policy) -> PolicyParameters:
    if not getattr(policy, "differentiable", False):
        raise BackendNotDifferentiable(f"{type(policy).__name__} has no closed-form gradients")
    return policy.params


def _pieces(batch: GroupBatch, params: PolicyParameters, old_params: PolicyParameters, cfg: OptimConfig):
    e1, logp = _forward(params, batch.state_features)
    _, logq = _forward(old_params, batch.state_features)
    S = len(batch.state_actions)
    idx = np.arange(S)
    lp_new = np.bincount(batch.state_owner, weights=logp[idx, batch.state_actions], minlength=batch.G)
    lp_old = np.bincount(batch.state_owner, weights=logq[idx, batch.state_actions], minlength=batch.G)
    terms = np.empty(batch.G)
    slope = np.empty(batch.G)  # d term_i / d rho_i
    rhos = np.empty(batch.G)
    for i in range(batch.G):
        rho, capped = importance_ratio(float(lp_new[i]), float(lp_old[i]), cfg.ratio_cap)
        terms[i], slope[i] = clipped_surrogate(rho, float(batch.advantages[i]), cfg.clip_range)
        if capped:
            slope[i] = 0.0
        rhos[i] = rho
    p = np.exp(logp)
    if S:
        kl_s = np.sum(p * (logp - logq), axis=1)
        ent_s = -np.sum(p * logp, axis=1)
        kl, ent = float(np.mean(kl_s)), float(np.mean(ent_s))
    else:
        kl_s = ent_s = np.zeros(0)
        kl = ent = 0.0
    return e1, logp, logq, p, kl_s, ent_s, kl, ent, terms, slope, rhos


def _as_list(batches) -> list[GroupBatch]:
    return [batches] if isinstance(batches, GroupBatch) else list(batches)


def edlp_loss(batches, policy, old_policy, cfg: OptimConfig) -> tuple[float, LossBreakdown]:
    """Loss for one GroupBatch, or the mean over a sequence of them."""
    params, old_params = _require_toy(policy), _require_toy(old_policy)
    parts = []
    for batch in _as_list(batches):
        *_, kl, ent, terms, _, _ = _pieces(batch, params, old_params, cfg)
        surrogate = -float(np.mean(terms))
        parts.append((surrogate, kl, ent, surrogate + cfg.beta_kl * kl - cfg.beta_ent * ent))
    if not parts:
        raise ValueError("no batches")
    if len(parts) == 1:
        return parts[0][3], LossBreakdown(*parts[0])
    s, k, h, tot = (float(np.mean([p[j] for p in parts])) for j in range(4))
    return tot, LossBreakdown(s, k, h, tot)


def edlp_gradient(batches, policy, old_policy, cfg: OptimConfig) -> PolicyParameters:
    """Closed-form gradient of :func:`edlp_loss` with respect to ``policy.params``."""
    params, old_params = _require_toy(policy), _require_toy(old_policy)
    batches = _as_list(batches)
    grad = PolicyParameters(*(np.zeros_like(a) for a in params.arrays()))
    E = params.embed_dim
    for batch in batches:
        S = len(batch.state_actions)
        if S == 0:
            continue
        e1, logp, logq, p, kl_s, ent_s, _, _, _, slope, rhos = _pieces(batch, params, old_params, cfg)
        # d loss / d (sum of log-probs of trajectory i)
        coef = -(slope * rhos) / batch.G
        onehot = np.zeros_like(p)
        onehot[np.arange(S), batch.state_actions] = 1.0
        dz = coef[batch.state_owner][:, None] * (onehot - p)
        dz += (cfg.beta_kl / S) * p * (logp - logq - kl_s[:, None])
        dz += (cfg.beta_ent / S) * p * (logp + ent_s[:, None])
        dz /= len(batches)
        grad.solver_head += e1.T @ dz
        de = (dz @ params.solver_head.T)[:, :E]
        dh = de * (1.0 - e1[:, :E] ** 2)
        grad.shared += batch.state_features.T @ dh
    return grad


def finite_diff_check(batches, policy, old_policy, cfg: OptimConfig, h: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(|analytic|, 1e-12)."""
    if not h > 0:
        raise ValueError("h must be positive")
    analytic = edlp_gradient(batches, policy, old_policy, cfg).as_vector()
    theta = policy.params.as_vector()
    worst = 0.0
    for j in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        f_up, _ = edlp_loss(batches, policy.with_params(policy.params.from_vector(up)), old_policy, cfg)
        f_down, _ = edlp_loss(batches, policy.with_params(policy.params.from_vector(down)), old_policy, cfg)
        numeric = (f_up - f_down) / (2 * h)
        err = abs(analytic[j] - numeric) / max(abs(analytic[j]), 1e-12)
        worst = max(worst, float(err))
    return worst


def apply_update(policy: ToyPolicy, gradient: PolicyParameters | np.ndarray, learning_rate: float) -> ToyPolicy:
    """Plain gradient descent step; returns a new policy."""
    g = gradient.as_vector() if isinstance(gradient, PolicyParameters) else np.asarray(gradient, dtype=float)
    if not np.all(np.isfinite(g)):
        raise NonFiniteInput("gradient has non-finite entries")
    theta = policy.params.as_vector()
    return policy.with_params(policy.params.from_vector(theta - learning_rate * g))


def batch_record(batch: GroupBatch, loss: LossBreakdown, **extra) -> dict:
    rec = dict(extra)
    rec.update(
        task_ids=list(batch.task_ids),
        returns=[float(x) for x in batch.returns],
        advantages=[float(x) for x in batch.advantages],
        logp_new=[float(x) for x in (batch.logp_new if batch.logp_new is not None else batch.logp_old)],
        logp_old=[float(x) for x in batch.logp_old],
        loss=loss.to_dict(),
    )
    return rec


# -- synthetic batches for gradient verification ----------------------------------


# (embed_dim, n_templates) pairs spanning 21..57 parameters
GRAD_CHECK_SHAPES = ((1, 2), (1, 5), (2, 5), (3, 3))


def synthetic_batch(rng: np.random.Generator, G: int = 8, n_templates: int = 5, max_steps: int = 4, eps: float = 0.0) -> GroupBatch:
    """Random decisions over random binary-ish feature vectors, with random returns."""
    steps = rng.integers(1, max_steps + 1, size=G)
    S = int(steps.sum())
    phi = (rng.random((S, N_FEATURES)) < 0.5).astype(float)
    phi[:, 0] = 1.0
    phi += rng.normal(scale=0.1, size=phi.shape)
    returns = rng.normal(size=G)
    return GroupBatch(
        returns=returns,
        advantages=group_advantages(returns, eps),
        state_features=phi,
        state_actions=rng.integers(n_templates, size=S),
        state_owner=np.repeat(np.arange(G), steps),
        logp_old=np.zeros(G),
    )


def random_params(rng: np.random.Generator, embed_dim: int, scale: float = 0.5, n_templates: int = 5) -> PolicyParameters:
    p = PolicyParameters.zeros(embed_dim=embed_dim, n_templates=n_templates)
    return p.from_vector(rng.normal(scale=scale, size=p.size))

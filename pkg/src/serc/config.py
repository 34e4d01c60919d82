"""Run configuration files (YAML or JSON) and command-line overrides.

The file is a mapping that mirrors :class:`~serc.runner.RunConfig`; nested
sections are mappings too. Every key is optional and unknown keys are errors::

    n_iter: 3
    tasks_per_iter: 64
    rollouts_per_task: 4
    group_size: 8            # also sets optim.group_size
    max_steps: 8
    max_repairs_per_step: 1
    seed: 0
    width: 1                 # concurrent rollouts
    warmup_iters: 0          # iterations trained on outcome-only returns
    eval_tasks: 64
    record_wall_clock: false # true makes metrics.csv non-reproducible
    backend: toy             # toy | remote
    reward:     {lambda_tool: 0.5, beta_div: 0.01, kappa: 10.0, tau_c: 0.7, c_repair: 0.05}
    returns:    {alpha_out: 1.0, gamma: 0.99}
    optim:      {adv_epsilon: 1.0e-8, clip_range: 0.2, beta_kl: 0.001, beta_ent: 0.01,
                 learning_rate: 0.5, ratio_cap: 1.0e6}
    env:        {kind: arithmetic-chain, difficulty: 2, seed: 0}
    cold_start: {n_demos: 100, embed_dim: 8, demo_noise: 0.5, init_scale: 1.0, ridge: 0.001, max_turns: 8}
    tools:      {wall_clock_timeout: 2.0, max_output_bytes: 4096}
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Mapping

import yaml

from .envs import EnvConfig
from .errors import ConfigError
from .grpo import OptimConfig, ReturnConfig
from .policy.toy import ColdStartConfig
from .runner import RunConfig
from .tools import ToolLimits
from .verification import RewardConfig

SECTIONS = {
    "reward": RewardConfig,
    "returns": ReturnConfig,
    "optim": OptimConfig,
    "env": EnvConfig,
    "cold_start": ColdStartConfig,
    "tools": ToolLimits,
}


def _build(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    data = dict(data or {})
    sections = {}
    for name, cls in SECTIONS.items():
        section = dict(data.pop(name, {}) or {})
        if name == "optim":
            if "group_size" in section and section["group_size"] != data.get("group_size", section["group_size"]):
                raise ConfigError("optim.group_size and group_size disagree")
            section["group_size"] = data.get("group_size", section.get("group_size", RunConfig.group_size))
        sections[name] = _build(cls, section, name)
    return _build(RunConfig, {**data, **sections}, "config")


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data or {})


def parse_env(spec: str) -> tuple[str, int | None]:
    """``KIND`` or ``KIND:DIFFICULTY``."""
    kind, _, diff = spec.partition(":")
    if not diff:
        return kind, None
    try:
        return kind, int(diff)
    except ValueError:
        raise ConfigError(f"bad difficulty in --env {spec!r}") from None


def apply_overrides(cfg: RunConfig, *, seed=None, iters=None, env=None, backend=None) -> RunConfig:
    changes: dict[str, Any] = {}
    if seed is not None:
        changes["seed"] = seed
    if iters is not None:
        changes["n_iter"] = iters
    if backend is not None:
        changes["backend"] = backend
    if env is not None:
        kind, difficulty = parse_env(env)
        try:
            changes["env"] = dataclasses.replace(cfg.env, kind=kind, **({"difficulty": difficulty} if difficulty else {}))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    try:
        return dataclasses.replace(cfg, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: RunConfig) -> str:
    data = cfg.to_dict()
    data["optim"].pop("group_size", None)
    return yaml.safe_dump(data, sort_keys=False)

import dataclasses
import json

import mpmath
import numpy as np
import pytest

from oracles import mp_gate, mp_process_reward, mp_return
from serc.config import apply_overrides, config_from_dict, dump_config, load_config, parse_env
from serc.envs import EnvConfig, correct_call, generate_labeled, generate_tasks
from serc.errors import CandidatesForDifferentTasks, ConfigError
from serc.grpo import OptimConfig, build_batch, edlp_gradient, trajectory_log_probs
from serc.policy.scripted import ScriptedPolicy
from serc.policy.toy import PolicyParameters, ToyPolicy, canonical_strategy, never_answer_strategy
from serc.runner import (
    METRICS_HEADER,
    RunConfig,
    best_of_n,
    check_log,
    evaluate,
    initial_policy,
    make_bon_candidates,
    metrics_csv,
    rollout_seed,
    run_inner_loop,
    run_outer_iteration,
    run_serc,
    run_trajectory,
)
from serc.trajectory import read_trajectories


def small_cfg(**kw):
    base = dict(n_iter=1, tasks_per_iter=4, eval_tasks=4)
    base.update(kw)
    return RunConfig(**base)


# -- inner loop -----------------------------------------------------------------------------


def _line(i, score, conf, tool_check):
    return json.dumps({"step_index": i, "score": score, "confidence": conf, "critique": "c", "tool_check": tool_check})


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_hand_computed_fixture(seed):
    task = generate_labeled(EnvConfig(seed=seed))
    call = correct_call(task.instance).to_json()
    pol = ScriptedPolicy(
        solver=[call, f"CONFIDENCE: 0.9\nFINAL_ANSWER: {task.ground_truth}"],
        verifier=[_line(1, 0.8, 0.9, False), call, _line(2, 1.0, 0.95, True)],
    )
    cfg = RunConfig()
    traj = run_trajectory(pol, task, cfg, 0)
    r = cfg.reward
    with mpmath.workdps(50):
        r1 = mp_process_reward(0, 0.8, 0.9, 0.5, r.lambda_tool, r.beta_div) - mp_gate(0.9, r.kappa, r.tau_c) * r.c_repair
        r2 = mp_process_reward(1, 1.0, 0.95, 0.9, r.lambda_tool, r.beta_div) - mp_gate(0.95, r.kappa, r.tau_c) * r.c_repair
        g = mp_return([r1, r2], 1.0, 1.0, 0.99)
    assert traj.outcome_reward == 1.0
    assert [s.verification.tool_result for s in traj.steps] == [0, 1]
    assert traj.steps[0].effective_reward == pytest.approx(float(r1), abs=1e-12)
    assert traj.steps[1].effective_reward == pytest.approx(float(r2), abs=1e-12)
    assert traj.total_return == pytest.approx(float(g), abs=1e-12)
    assert not any(s.repaired for s in traj.steps)


def test_truncation_when_never_answering():
    task = generate_labeled(EnvConfig(seed=0))
    pol = ToyPolicy(PolicyParameters.zeros(embed_dim=2), strategy=never_answer_strategy)
    traj = run_trajectory(pol, task, small_cfg(max_steps=1), 0)
    assert len(traj.steps) == 1 and traj.truncated and traj.outcome_reward == 0.0


def test_guess_floor_in_inner_loop():
    from serc.policy.toy import guess_strategy

    tasks = generate_tasks("arithmetic-chain", 2, range(100))
    pol = ToyPolicy(PolicyParameters.zeros(embed_dim=2), strategy=guess_strategy)
    res = run_inner_loop(pol, tasks, small_cfg(rollouts_per_task=1, group_size=1, optim=OptimConfig(group_size=1)))
    assert np.mean([t.outcome_reward for t in res.trajectories]) <= 0.1


def test_verifier_protocol_error_aborts_one_trajectory():
    tasks = generate_tasks("arithmetic-chain", 2, range(2))
    pol = ScriptedPolicy(solver=["thinking"], verifier=["not json"])
    res = run_inner_loop(pol, tasks, small_cfg())
    assert res.trajectories == [] and res.n_aborted == 8


def test_parallel_matches_serial():
    cfg = small_cfg()
    pol = initial_policy(cfg)
    tasks = generate_tasks("arithmetic-chain", 2, range(4))
    a = run_inner_loop(pol, tasks, cfg)
    b = run_inner_loop(pol, tasks, dataclasses.replace(cfg, width=4))
    assert a.trajectories == b.trajectories and a.owners == b.owners


def test_rollout_seeds_distinct():
    seeds = {rollout_seed(0, k, j, r) for k in range(-1, 3) for j in range(8) for r in range(4)}
    assert len(seeds) == 4 * 8 * 4


# -- outer loop -----------------------------------------------------------------------------


def test_zero_advantage_iteration_leaves_parameters():
    cfg = small_cfg(group_size=4, optim=OptimConfig(group_size=4, beta_ent=0.0))
    params = initial_policy(cfg).params
    pol = ToyPolicy(params, strategy=canonical_strategy)
    res = run_outer_iteration(pol, cfg, 0)
    assert res.metrics.n_degenerate_groups == cfg.tasks_per_iter
    assert np.array_equal(res.policy.params.as_vector(), params.as_vector())


def test_update_is_minus_lr_gradient():
    cfg = small_cfg()
    pol = initial_policy(cfg)
    res = run_outer_iteration(pol, cfg, 0)
    G = cfg.group_size
    batches = [build_batch(res.trajectories[i : i + G], pol, eps=cfg.optim.adv_epsilon) for i in range(0, len(res.trajectories), G)]
    grad = edlp_gradient(batches, pol, pol, cfg.optim).as_vector()
    expected = pol.params.as_vector() - cfg.optim.learning_rate * grad
    assert np.array_equal(res.policy.params.as_vector(), expected)


def test_metrics_and_logs_consistent(tmp_path):
    cfg = small_cfg(n_iter=2)
    result = run_serc(cfg, tmp_path)
    for k, m in enumerate(result.metrics):
        trajs = read_trajectories(tmp_path / "trajectories" / f"iter_{k:03d}.jsonl")
        solved = sum(t.outcome_reward == 1.0 for t in trajs)
        assert m.solve_rate == solved / len(trajs)
        assert 0.0 <= m.repair_rate <= 1.0
        assert check_log(trajs, cfg.reward, cfg.returns) == []
        # pi_old snapshot: logged logp_old equals recomputation under the pre-update parameters
        params = PolicyParameters.from_dict(json.loads((tmp_path / "policy" / f"iter_{k:03d}.json").read_text()))
        records = [json.loads(l) for l in (tmp_path / "batches.jsonl").read_text().splitlines()]
        records = [r for r in records if r["iteration"] == k]
        tasks = {t.id: t for t in generate_tasks(cfg.env.kind, cfg.env.difficulty, range(k * 4, k * 4 + 4))}
        hydrated = [dataclasses.replace(t, task=tasks[t.task_id].instance) for t in trajs]
        for g, rec in enumerate(records):
            group = hydrated[g * cfg.group_size : (g + 1) * cfg.group_size]
            lp = trajectory_log_probs(build_batch(group, ToyPolicy(params)), params)
            assert np.array_equal(lp, np.array(rec["logp_old"]))


def test_zero_iterations():
    cfg = small_cfg(n_iter=0)
    res = run_serc(cfg)
    assert res.metrics == [] and res.policy is res.initial_policy
    assert metrics_csv([]) == ",".join(METRICS_HEADER) + "\n"


def test_warmup_uses_outcome_returns():
    cfg = small_cfg(warmup_iters=1)
    res = run_outer_iteration(initial_policy(cfg), cfg, 0)
    for rec in res.batch_records:
        assert rec["warmup"] is True
        assert set(rec["returns"]) <= {0.0, 1.0}


def test_evaluate_does_not_train():
    cfg = small_cfg()
    pol = initial_policy(cfg)
    before = pol.params.as_vector().copy()
    m, trajs = evaluate(pol, generate_tasks("arithmetic-chain", 2, range(3)), cfg)
    assert np.array_equal(before, pol.params.as_vector())
    assert m.n_trajectories == len(trajs) == 12


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(group_size=6)
    with pytest.raises(ValueError):
        RunConfig(n_iter=-1)
    with pytest.raises(ValueError):
        RunConfig(seed=-1)


# -- best of n ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def bon_policy():
    return initial_policy(RunConfig())


def test_bon_single_and_identical(bon_policy):
    task = generate_labeled(EnvConfig(seed=4))
    cands, _ = make_bon_candidates(task, np.random.default_rng(0), n=1)
    assert best_of_n(bon_policy, cands).index == 0
    same = [cands[0]] * 5
    assert best_of_n(bon_policy, same).index == 0


def test_bon_selects_confirmed_candidate(bon_policy):
    for seed in range(10):
        task = generate_labeled(EnvConfig(seed=seed))
        cands, correct = make_bon_candidates(task, np.random.default_rng(seed))
        assert best_of_n(bon_policy, cands).index == correct


def test_bon_permutation_equivariant(bon_policy):
    task = generate_labeled(EnvConfig(seed=12))
    cands, _ = make_bon_candidates(task, np.random.default_rng(12))
    res = best_of_n(bon_policy, cands)
    perm = np.random.default_rng(1).permutation(len(cands))
    permuted = [cands[i] for i in perm]
    res_p = best_of_n(bon_policy, permuted)
    if len(set(res.scores)) == len(res.scores):
        assert permuted[res_p.index] is cands[res.index]
    assert sorted(res_p.scores) == sorted(res.scores)


def test_bon_rejects_mixed_tasks(bon_policy):
    a, _ = make_bon_candidates(generate_labeled(EnvConfig(seed=1)), np.random.default_rng(0), n=2)
    b, _ = make_bon_candidates(generate_labeled(EnvConfig(seed=2)), np.random.default_rng(0), n=2)
    with pytest.raises(CandidatesForDifferentTasks):
        best_of_n(bon_policy, a + b)
    with pytest.raises(ValueError):
        best_of_n(bon_policy, [])


# -- config ---------------------------------------------------------------------------------


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig(n_iter=4, reward=dataclasses.replace(RunConfig().reward, tau_c=0.6))
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    (tmp_path / "c.json").write_text(json.dumps({"seed": 3, "optim": {"clip_range": 0.1}}))
    loaded = load_config(tmp_path / "c.json")
    assert loaded.seed == 3 and loaded.optim.clip_range == 0.1


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        config_from_dict({"iterations": 3})
    with pytest.raises(ConfigError):
        config_from_dict({"reward": {"tau": 0.5}})
    with pytest.raises(ConfigError):
        config_from_dict({"reward": {"tau_c": 2.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"group_size": 4, "optim": {"group_size": 8}})
    (tmp_path / "bad.yaml").write_text("a: [")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_group_size_propagates():
    cfg = config_from_dict({"group_size": 4})
    assert cfg.optim.group_size == 4


def test_overrides():
    cfg = apply_overrides(RunConfig(), seed=5, iters=2, env="table-qa:3", backend="toy")
    assert (cfg.seed, cfg.n_iter, cfg.env.kind, cfg.env.difficulty) == (5, 2, "table-qa", 3)
    assert parse_env("arithmetic-chain") == ("arithmetic-chain", None)
    with pytest.raises(ConfigError):
        parse_env("table-qa:hard")
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), env="images")

"""End-to-end acceptance criteria; each test prints one PASS/FAIL line."""

import filecmp
import math
import threading
import time

import mpmath
import numpy as np

from oracles import OracleDivZero, OracleOverflow, mp_gate, mp_process_reward, mp_return, oracle_eval, random_expression
from serc.calc import evaluate as calc_evaluate
from serc.cli import main
from serc.envs import EnvConfig, generate_labeled
from serc.errors import CalcDivisionByZero, CalcError, CalcOverflow
from serc.grpo import (
    GRAD_CHECK_SHAPES,
    OptimConfig,
    ReturnConfig,
    edlp_gradient,
    edlp_loss,
    finite_diff_check,
    group_advantages,
    random_params,
    synthetic_batch,
    trajectory_return,
)
from serc.policy.toy import ToyPolicy
from serc.runner import RunConfig, best_of_n, check_log, evaluate, eval_task_set, initial_policy, make_bon_candidates, run_serc
from serc.tools import ToolLimits, ToolRegistry, invoke
from serc.trajectory import ToolCall, VerificationTuple, encode_trajectory, read_trajectories
from serc.verification import RewardConfig, repair_gate, score_step


def test_01_equation_oracles(report_line):
    rng = np.random.default_rng(2024)
    n = 10_000
    cases = []
    for _ in range(n):
        tool_result = int(rng.integers(-1, 2))
        v = VerificationTuple(1, float(rng.uniform(-1, 1)), float(rng.uniform(0, 1)), "", tool_result != 0, tool_result)
        cfg = RewardConfig(
            lambda_tool=float(rng.uniform(0, 2)),
            beta_div=float(rng.uniform(0, 0.5)),
            kappa=float(rng.uniform(0.5, 50)),
            tau_c=float(rng.uniform(0.05, 0.95)),
            c_repair=float(rng.uniform(0, 0.5)),
        )
        rcfg = ReturnConfig(alpha_out=float(rng.uniform(0, 2)), gamma=float(rng.uniform(0.5, 1.0)))
        rewards = rng.uniform(-3, 3, size=int(rng.integers(1, 9))).tolist()
        cases.append((v, float(rng.uniform(0, 1)), cfg, rcfg, rewards, float(rng.integers(0, 2))))

    t0 = time.perf_counter()
    outs = [
        (score_step(v, sc, cfg), trajectory_return(rw, ro, rc))
        for v, sc, cfg, rc, rw, ro in cases
    ]
    impl_time = time.perf_counter() - t0

    worst = 0.0
    with mpmath.workdps(50):
        for (v, sc, cfg, rc, rw, ro), (br, g) in zip(cases, outs):
            rp = mp_process_reward(v.tool_result, v.score, v.conf, sc, cfg.lambda_tool, cfg.beta_div)
            gate = mp_gate(v.conf, cfg.kappa, cfg.tau_c)
            worst = max(
                worst,
                abs(float(rp - br.r_proc)),
                abs(float(gate - br.gate)),
                abs(float(rp - gate * cfg.c_repair - br.r_t)),
                abs(float(mp_return(rw, ro, rc.alpha_out, rc.gamma) - g)),
            )
    ok = worst <= 1e-9 and impl_time < 5.0
    report_line(1, ok, f"10000 inputs, max abs err {worst:.2e} (<= 1e-9), runtime {impl_time:.2f}s (< 5s)")
    assert ok


def test_02_gate_exactness(report_line):
    cfg = RewardConfig()
    at_tau, trig = repair_gate(cfg.tau_c, cfg)
    center = abs(at_tau - 0.5)
    grid = np.linspace(0.0, 1.0, 1000)
    values = [repair_gate(float(c), cfg)[0] for c in grid]
    monotone = all(b < a for a, b in zip(values, values[1:]))
    triggers = all(repair_gate(float(c), cfg)[1] == (float(c) < cfg.tau_c) for c in grid)
    below = repair_gate(math.nextafter(cfg.tau_c, 0.0), cfg)[1]
    ok = center <= 1e-12 and monotone and triggers and not trig and below
    report_line(2, ok, f"|g(tau_c)-0.5| = {center:.1e}, strictly decreasing on 1000 points: {monotone}, trigger <=> conf < tau_c: {triggers and not trig and below}")
    assert ok


def _dyadic_group(rng):
    # returns on a 2^-20 grid: sums, shifts by integers and power-of-two scalings are exact
    return rng.integers(-2**30, 2**30, size=8) / 2.0**20


def test_03_advantage_laws(report_line):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst_mean, shift_ok, scale_ok = 0.0, True, True
    for _ in range(1000):
        r = _dyadic_group(rng)
        a = group_advantages(r, 0.0)
        worst_mean = max(worst_mean, abs(math.fsum(a)) / 8)
        c = float(rng.integers(-1000, 1000))
        shift_ok &= np.array_equal(a, group_advantages(r + c, 0.0))
        s = 2.0 ** int(rng.integers(-8, 9))
        scale_ok &= np.array_equal(a, group_advantages(r * s, 0.0))
    elapsed = time.perf_counter() - t0
    ok = worst_mean <= 1e-9 and shift_ok and scale_ok and elapsed < 2.0
    report_line(3, ok, f"1000 groups of 8: max |mean| {worst_mean:.1e}, exact shift {shift_ok}, exact scale {scale_ok}, runtime {elapsed:.2f}s (< 2s)")
    assert ok


def test_04_gradient_verification(report_line):
    rng = np.random.default_rng(4)
    cfg = OptimConfig()
    t0 = time.perf_counter()
    errors = []
    for b in range(20):
        embed_dim, k = GRAD_CHECK_SHAPES[b % len(GRAD_CHECK_SHAPES)]
        old = ToyPolicy(random_params(rng, embed_dim, n_templates=k))
        new = old.with_params(old.params.from_vector(old.params.as_vector() + rng.normal(scale=0.1, size=old.params.size)))
        errors.append(finite_diff_check(synthetic_batch(rng, G=8, n_templates=k), new, old, cfg, h=1e-6))
    elapsed = time.perf_counter() - t0
    ok = max(errors) <= 1e-5 and elapsed < 10.0
    report_line(4, ok, f"20 batches of 8, max rel err {max(errors):.2e} (<= 1e-5), runtime {elapsed:.2f}s (< 10s)")
    assert ok


def test_05_loss_stationarity(report_line):
    rng = np.random.default_rng(5)
    exact, kl_grad = True, 0.0
    for _ in range(20):
        pol = ToyPolicy(random_params(rng, 2))
        batch = synthetic_batch(rng)
        loss, _ = edlp_loss(batch, pol, pol, OptimConfig(beta_ent=0.0))
        exact &= loss == -np.mean(batch.advantages)
        no_adv = synthetic_batch(rng)
        no_adv.advantages = np.zeros(no_adv.G)
        g = edlp_gradient(no_adv, pol, pol, OptimConfig(beta_kl=1.0, beta_ent=0.0)).as_vector()
        kl_grad = max(kl_grad, float(np.max(np.abs(g))))
    ok = exact and kl_grad <= 1e-10
    report_line(5, ok, f"loss == -mean(A) exactly: {exact}; max |KL gradient| at theta_old {kl_grad:.1e} (<= 1e-10)")
    assert ok


def test_06_self_evolution(report_line):
    t0 = time.perf_counter()
    gains, rows = [], []
    for seed in range(5):
        cfg = RunConfig(n_iter=3, tasks_per_iter=64, seed=seed, env=EnvConfig("arithmetic-chain", 2, seed * 1000))
        result = run_serc(cfg)
        tasks = eval_task_set(cfg)
        before, _ = evaluate(result.initial_policy, tasks, cfg)
        after, _ = evaluate(result.policy, tasks, cfg)
        gains.append(after.solve_rate - before.solve_rate)
        rows.append(f"seed {seed}: {before.solve_rate:.3f} -> {after.solve_rate:.3f}")
    elapsed = time.perf_counter() - t0
    mean_gain = float(np.mean(gains))
    ok = all(g > 0 for g in gains) and mean_gain >= 0.10 and elapsed < 120
    report_line(6, ok, f"eval solve rate {'; '.join(rows)}; mean gain {100 * mean_gain:.1f}pp (>= 10pp), runtime {elapsed:.1f}s (< 120s)")
    assert ok


def test_07_best_of_n(report_line):
    policy = initial_policy(RunConfig())
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    hits = 0
    for j in range(200):
        task = generate_labeled(EnvConfig(seed=50_000 + j))
        cands, correct = make_bon_candidates(task, rng, n=8)
        hits += best_of_n(policy, cands, seed=j).index == correct
    elapsed = time.perf_counter() - t0
    ok = hits / 200 >= 0.95 and elapsed < 30
    report_line(7, ok, f"correct candidate selected in {hits}/200 groups ({100 * hits / 200:.1f}% >= 95%, random 12.5%), runtime {elapsed:.1f}s (< 30s)")
    assert ok


def test_08_repair_bookkeeping(tmp_path, report_line):
    cfg = RunConfig(n_iter=4, tasks_per_iter=64, seed=8)
    run_serc(cfg, tmp_path)
    trajs, lines = [], []
    for k in range(cfg.n_iter):
        path = tmp_path / "trajectories" / f"iter_{k:03d}.jsonl"
        lines += path.read_text().splitlines()
        trajs += read_trajectories(path)
    steps = [s for t in trajs for s in t.steps]
    repaired = [s for s in steps if s.repaired]
    bad_conf = [s for s in repaired if s.repair.original_verification.conf >= cfg.reward.tau_c]
    over_budget = [s for s in steps if s.repair is not None and s.repair.attempts > cfg.max_repairs_per_step]
    problems = check_log(trajs, cfg.reward, cfg.returns)
    reencoded = [encode_trajectory(t) for t in trajs] == lines
    ok = len(trajs) >= 1000 and repaired and not bad_conf and not over_budget and not problems and reencoded
    report_line(
        8,
        ok,
        f"{len(trajs)} trajectories, {len(repaired)} repaired steps, {len(bad_conf)} with original conf >= tau_c, "
        f"{len(over_budget)} over budget, {len(problems)} recomputation mismatches, re-serialization identical: {reencoded}",
    )
    assert ok


def test_09_sandbox_limits(report_line):
    release = threading.Event()
    reg = ToolRegistry().register("stall", lambda inp, scene=None: release.wait(30) and "late")
    limits = ToolLimits(wall_clock_timeout=0.05)
    worst, timeouts = 0.0, 0
    for _ in range(100):
        t0 = time.perf_counter()
        obs = invoke(reg, ToolCall("stall", {}), limits)
        worst = max(worst, time.perf_counter() - t0)
        timeouts += obs.status == "timeout"
    release.set()

    rng = np.random.default_rng(9)
    agree = 0
    for _ in range(10_000):
        expr = random_expression(rng)
        try:
            want = oracle_eval(expr)
        except OracleOverflow:
            want = CalcOverflow
        except OracleDivZero:
            want = CalcDivisionByZero
        try:
            got = calc_evaluate(expr)
        except CalcError as exc:
            got = type(exc)
        agree += got == want
    ok = timeouts == 100 and worst <= limits.wall_clock_timeout + 0.1 and agree == 10_000
    report_line(9, ok, f"stalling tool timed out {timeouts}/100, worst {1000 * worst:.0f}ms (limit 50ms + 100ms); calculator agrees with oracle on {agree}/10000")
    assert ok


def test_10_determinism(tmp_path, report_line, capsys):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["run", "--seed", "7", "--out", str(out)]) == 0
    capsys.readouterr()
    names = ["metrics.csv"] + [f"trajectories/iter_{k:03d}.jsonl" for k in range(3)]
    same = all(filecmp.cmp(outs[0] / n, outs[1] / n, shallow=False) for n in names)
    ok = same
    report_line(10, ok, f"two seed-7 runs: metrics.csv and {len(names) - 1} trajectory logs byte-identical: {same}")
    assert ok

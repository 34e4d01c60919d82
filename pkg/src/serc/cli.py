"""Command-line entry point: run, eval, bon, grad-check, report."""

from __future__ import annotations

import argparse
import dataclasses
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import runner
from .config import apply_overrides, dump_config, load_config
from .envs import generate_tasks, outcome_reward, read_corpus, write_corpus
from .errors import SERCError
from .grpo import GRAD_CHECK_SHAPES, OptimConfig, finite_diff_check, random_params, synthetic_batch
from .policy.toy import PolicyParameters, ToyPolicy
from .report import summary_table, read_metrics, write_report
from .trajectory import read_trajectories, write_trajectories

log = logging.getLogger("serc")


def _config(args) -> runner.RunConfig:
    cfg = load_config(args.config) if args.config else runner.RunConfig()
    return apply_overrides(cfg, seed=args.seed, iters=getattr(args, "iters", None), env=args.env, backend=args.backend)


def _policy(cfg: runner.RunConfig, path=None):
    if cfg.backend == "remote":
        from .policy.remote import RemoteClient, RemoteConfig, RemotePolicy

        return RemotePolicy(RemoteClient(RemoteConfig.from_env()))
    if path:
        return ToyPolicy(PolicyParameters.from_dict(json.loads(Path(path).read_text(encoding="utf-8"))))
    return runner.initial_policy(cfg)


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.timing:
        cfg = dataclasses.replace(cfg, record_wall_clock=True)
    out = Path(args.out)
    runner.run_serc(cfg, out)
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    sys.stdout.write((out / "metrics.csv").read_text(encoding="utf-8"))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    policy = _policy(cfg, args.policy)
    tasks = read_corpus(args.tasks) if args.tasks else runner.eval_task_set(cfg)
    metrics, trajectories = runner.evaluate(policy, tasks, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(out / "tasks.jsonl", tasks)
    write_trajectories(out / "trajectories.jsonl", trajectories)
    (out / "metrics.csv").write_text(runner.metrics_csv([metrics]), encoding="utf-8")
    sys.stdout.write(runner.metrics_csv([metrics]))
    return 0


def cmd_bon(args) -> int:
    cfg = _config(args)
    policy = _policy(cfg, args.policy)
    out = Path(args.out) if args.out else None
    if args.synthetic:
        rng = np.random.default_rng([cfg.seed, 0xB0])
        labeled = generate_tasks(cfg.env.kind, cfg.env.difficulty, range(cfg.env.seed, cfg.env.seed + args.synthetic))
        candidates = []
        for task in labeled:
            group, _ = runner.make_bon_candidates(task, rng, args.n)
            candidates.extend(group)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            write_corpus(out / "tasks.jsonl", labeled)
            write_trajectories(out / "candidates.jsonl", candidates)
    else:
        if not args.candidates or not args.tasks:
            raise SERCError("bon needs --synthetic N, or a candidate file and --tasks")
        labeled = read_corpus(args.tasks)
        candidates = read_trajectories(args.candidates, {t.id: t.instance for t in labeled})
    by_id = {t.id: t for t in labeled}
    groups: dict[str, list] = {}
    for c in candidates:
        groups.setdefault(c.task_id, []).append(c)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["task_id", "n", "selected", "score", "correct"])
    hits = 0
    for task_id, group in groups.items():
        res = runner.best_of_n(policy, group, cfg.reward, cfg.returns, cfg.seed)
        correct = outcome_reward(by_id[task_id], group[res.index].final_answer) if task_id in by_id else float("nan")
        hits += correct == 1.0
        w.writerow([task_id, len(group), res.index, repr(res.scores[res.index]), correct])
    print(f"# selected correct: {hits}/{len(groups)}", file=sys.stderr)
    return 0


def cmd_grad_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    cfg = OptimConfig()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["batch", "n_params", "max_rel_err", "pass"])
    ok = True
    for b in range(args.batches):
        embed_dim, n_templates = GRAD_CHECK_SHAPES[b % len(GRAD_CHECK_SHAPES)]
        old = ToyPolicy(random_params(rng, embed_dim, n_templates=n_templates))
        new = old.with_params(old.params.from_vector(old.params.as_vector() + rng.normal(scale=0.1, size=old.params.size)))
        err = finite_diff_check(synthetic_batch(rng, n_templates=n_templates), new, old, cfg, args.h)
        passed = err <= args.tol
        ok &= passed
        w.writerow([b, new.params.size, repr(err), "pass" if passed else "FAIL"])
    return 0 if ok else 1


def cmd_report(args) -> int:
    paths = write_report(args.run_dir, args.out)
    sys.stdout.write(summary_table(read_metrics(Path(args.run_dir) / "metrics.csv")))
    sys.stdout.write("\n" + paths["csv"].read_text(encoding="utf-8"))
    for name, p in paths.items():
        print(f"# {name}: {p}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="serc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, iters=False):
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--env", help="task kind, optionally KIND:DIFFICULTY")
        p.add_argument("--backend", choices=("toy", "remote"))
        if iters:
            p.add_argument("--iters", type=int)

    p = sub.add_parser("run", help="full loop: rollouts, verification, repair and GRPO updates")
    common(p, iters=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--timing", action="store_true", help="record wall-clock times (breaks byte-identical reruns)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="inner loop only with a frozen policy")
    common(p)
    p.add_argument("--policy", help="parameter file from a run's policy/ directory")
    p.add_argument("--tasks", help="task corpus (JSONL); default: the evaluation task set")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bon", help="verifier-guided best-of-n selection")
    common(p)
    p.add_argument("candidates", nargs="?", help="candidate trajectories (JSONL), grouped by task_id")
    p.add_argument("--tasks", help="task corpus the candidates refer to")
    p.add_argument("--synthetic", type=int, help="build this many synthetic groups instead")
    p.add_argument("-n", type=int, default=8, help="candidates per synthetic group")
    p.add_argument("--policy")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bon)

    p = sub.add_parser("grad-check", help="analytic vs finite-difference gradients on random batches")
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("report", help="summary table, gnuplot data and figures for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="default: RUN_DIR/report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SERCError as exc:
        print(f"serc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

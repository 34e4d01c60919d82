"""Per-run summary: table, gnuplot data file and PNG figures from metrics.csv."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .runner import METRICS_HEADER

FLOAT_COLUMNS = ("mean_return", "solve_rate", "mean_conf", "repair_rate", "loss")


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for raw in reader:
            row = {"iteration": int(raw["iteration"]), "wall_clock_ms": int(raw["wall_clock_ms"])}
            row.update({k: float(raw[k]) for k in FLOAT_COLUMNS})
            rows.append(row)
    return rows


def summary_table(rows: list[dict]) -> str:
    head = f"{'iter':>4}  {'solve_rate':>10}  {'mean_return':>11}  {'mean_conf':>9}  {'repair_rate':>11}  {'loss':>10}  {'ms':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['iteration']:>4}  {r['solve_rate']:>10.4f}  {r['mean_return']:>11.4f}  {r['mean_conf']:>9.4f}"
            f"  {r['repair_rate']:>11.4f}  {r['loss']:>10.5f}  {r['wall_clock_ms']:>7}"
        )
    if len(rows) >= 2:
        delta = rows[-1]["solve_rate"] - rows[0]["solve_rate"]
        lines.append(f"solve_rate change, iteration {rows[0]['iteration']} -> {rows[-1]['iteration']}: {delta:+.4f}")
    return "\n".join(lines) + "\n"


def gnuplot_data(rows: list[dict]) -> str:
    lines = ["# " + " ".join(METRICS_HEADER)]
    for r in rows:
        lines.append(" ".join(repr(r[k]) if k in FLOAT_COLUMNS else str(r[k]) for k in METRICS_HEADER))
    return "\n".join(lines) + "\n"


def plot_metrics(rows: list[dict], path) -> None:
    it = [r["iteration"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(it, [r["solve_rate"] for r in rows], marker="o")
    axes[0].set_ylim(0, 1)
    axes[0].set_title("solve rate")
    axes[1].plot(it, [r["mean_return"] for r in rows], marker="o", color="tab:green")
    axes[1].set_title("mean return")
    axes[2].plot(it, [r["mean_conf"] for r in rows], marker="o", label="mean conf")
    axes[2].plot(it, [r["repair_rate"] for r in rows], marker="s", label="repair rate")
    axes[2].set_ylim(0, 1)
    axes[2].legend(loc="best")
    axes[2].set_title("verifier")
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_report(run_dir, out_dir=None) -> dict[str, Path]:
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    rows = read_metrics(run_dir / "metrics.csv")
    paths = {
        "table": out / "summary.txt",
        "data": out / "metrics.dat",
        "csv": out / "metrics.csv",
        "figure": out / "metrics.png",
    }
    paths["table"].write_text(summary_table(rows), encoding="utf-8")
    paths["data"].write_text(gnuplot_data(rows), encoding="utf-8")
    paths["csv"].write_text((run_dir / "metrics.csv").read_text(encoding="utf-8"), encoding="utf-8")
    plot_metrics(rows, paths["figure"])
    return paths

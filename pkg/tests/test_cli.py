import pytest

from serc.cli import main
from serc.report import gnuplot_data, read_metrics, summary_table
from serc.runner import METRICS_HEADER


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text("n_iter: 2\ntasks_per_iter: 4\neval_tasks: 4\n")
    return path


def test_run_then_report(tmp_path, small_config, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(small_config), "--seed", "1", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed == (out / "metrics.csv").read_text()
    assert printed.splitlines()[0] == ",".join(METRICS_HEADER)
    assert len(printed.splitlines()) == 3
    for name in ("config.json", "config.yaml", "tasks.jsonl", "batches.jsonl", "trajectories/iter_000.jsonl", "policy/final.json"):
        assert (out / name).exists()

    assert main(["report", str(out)]) == 0
    report = out / "report"
    png = (report / "metrics.png").read_bytes()
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    assert (report / "metrics.dat").read_text().startswith("#")
    assert "solve_rate" in (report / "summary.txt").read_text()
    assert ",".join(METRICS_HEADER) in capsys.readouterr().out


def test_report_helpers(tmp_path):
    (tmp_path / "m.csv").write_text(",".join(METRICS_HEADER) + "\n0,1.0,0.5,0.6,0.2,0.1,0\n1,1.5,0.75,0.7,0.1,0.05,0\n")
    rows = read_metrics(tmp_path / "m.csv")
    assert len(rows) == 2
    table = summary_table(rows)
    assert "0.5" in table and "0.75" in table
    assert gnuplot_data(rows).splitlines()[0].startswith("#")
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(Exception):
        read_metrics(tmp_path / "bad.csv")


def test_eval_with_saved_policy(tmp_path, small_config, capsys):
    run = tmp_path / "run"
    main(["run", "--config", str(small_config), "--iters", "1", "--out", str(run)])
    capsys.readouterr()
    out = tmp_path / "eval"
    assert main(["eval", "--config", str(small_config), "--policy", str(run / "policy" / "final.json"), "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and (out / "trajectories.jsonl").exists()
    # a saved corpus can be evaluated again
    assert main(["eval", "--config", str(small_config), "--tasks", str(out / "tasks.jsonl"), "--out", str(tmp_path / "e2")]) == 0


def test_bon_synthetic_and_file(tmp_path, capsys):
    out = tmp_path / "bon"
    assert main(["bon", "--synthetic", "5", "--out", str(out)]) == 0
    captured = capsys.readouterr()
    rows = captured.out.splitlines()
    assert rows[0] == "task_id,n,selected,score,correct" and len(rows) == 6
    assert "# selected correct: 5/5" in captured.err
    assert main(["bon", str(out / "candidates.jsonl"), "--tasks", str(out / "tasks.jsonl")]) == 0
    assert capsys.readouterr().out.splitlines() == rows


def test_bon_needs_input(capsys):
    assert main(["bon"]) == 2
    assert "error" in capsys.readouterr().err


def test_grad_check_cli(capsys):
    assert main(["grad-check", "--batches", "4"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert len(rows) == 5 and all(r.endswith("pass") for r in rows[1:])
    assert main(["grad-check", "--batches", "2", "--h", "0.1"]) == 1


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense_key: 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "nonsense_key" in capsys.readouterr().err


def test_remote_run_rejected(tmp_path, small_config):
    assert main(["run", "--config", str(small_config), "--backend", "remote", "--out", str(tmp_path / "r")]) == 2


def test_timing_flag(tmp_path, small_config, capsys):
    out = tmp_path / "t"
    main(["run", "--config", str(small_config), "--iters", "1", "--timing", "--out", str(out)])
    row = (out / "metrics.csv").read_text().splitlines()[1].split(",")
    assert int(row[-1]) > 0


def test_remote_eval_without_endpoint(tmp_path, small_config, monkeypatch, capsys):
    monkeypatch.delenv("SERC_ENDPOINT", raising=False)
    assert main(["eval", "--config", str(small_config), "--backend", "remote", "--out", str(tmp_path / "e")]) == 2
    assert "endpoint" in capsys.readouterr().err

import json
from pathlib import Path

import numpy as np
import pytest

from gse.harness.cli import main
from gse.serialization import write_matrix

from conftest import seeded

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "default.ini"
TINY = [
    "--set", "task.m=16", "--set", "task.n=16", "--set", "task.num_clusters=3",
    "--set", "task.samples_train=128", "--set", "task.samples_val=64",
    "--set", "gse.d=1", "--set", "gse.num_experts=4",
    "--set", "train.steps=4", "--set", "train.batch_size=8",
]


@pytest.fixture(autouse=True)
def output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("GSE_OUTPUT_DIR", str(tmp_path / "out"))
    return tmp_path / "out"


def test_inspect(tmp_path, capsys):
    path = tmp_path / "w.txt"
    write_matrix(path, seeded(64, 64, 5))
    assert main(["inspect", str(CONFIG), str(path)]) == 0
    out = capsys.readouterr().out
    assert "r_g=2  d=2  E=7  k=2" in out
    assert "gse          2496" in out
    assert "lora         2432  (rank 19" in out


def test_inspect_bad_inputs(tmp_path):
    path = tmp_path / "w.txt"
    path.write_text("garbage\n")
    assert main(["inspect", str(CONFIG), str(path)]) == 2
    write_matrix(path, seeded(6, 6, 0))  # too small for 2 + 7*2 components
    assert main(["inspect", str(CONFIG), str(path)]) == 2
    assert main(["inspect", str(tmp_path / "missing.ini"), str(path)]) == 2


def test_verify_writes_report(output_dir, capsys):
    assert main(["verify", "--suite", "balance_loss", "--seed", "7"]) == 0
    assert "[PASS] balance_loss (seed 7)" in capsys.readouterr().out
    rep = json.loads((output_dir / "verify-balance_loss-seed7" / "report.json").read_text())
    assert rep["passed"] and rep["seed"] == 7


def test_verify_failure_exit_code(monkeypatch):
    import gse.harness.cli as cli
    from gse.harness.verify import SuiteReport

    def failing(name, seed):
        rep = SuiteReport(name, seed)
        rep.add("always", 1.0, 0.0)
        return rep

    monkeypatch.setattr(cli, "run_suite", failing)
    assert main(["verify", "--suite", "svd"]) == 1


@pytest.mark.parametrize(
    "argv",
    [
        ["verify", "--suite", "nope"],
        ["verify", "--suite", "svd", "--seed", "-1"],
        ["verify", "--suite", "svd", "--seed", str(2**64)],
        ["frobnicate"],
    ],
)
def test_bad_usage_exit_2(argv):
    try:
        code = main(argv)
    except SystemExit as exc:  # argparse
        code = exc.code
    assert code == 2


def test_train_then_rerender(output_dir):
    argv = ["train", "--config", str(CONFIG), *TINY, "--set", "output.name=t1"]
    assert main(argv) == 0
    run = output_dir / "t1"
    assert {p.name for p in run.iterdir()} == {"run.json", "metrics.csv", "summary.json", "routing.csv", "timing.json"}
    lines = (run / "metrics.csv").read_text().splitlines()
    assert len(lines) == 2 + 4 and lines[1].count(",") == 3 + 4
    before = (run / "metrics.csv").read_bytes(), (run / "summary.json").read_bytes()
    (run / "metrics.csv").unlink()
    assert main(["report", "--from", str(run)]) == 0
    assert ((run / "metrics.csv").read_bytes(), (run / "summary.json").read_bytes()) == before


def test_train_input_errors(tmp_path):
    assert main(["train", "--config", str(CONFIG), "--kind", "dora"]) == 2
    assert main(["train", "--config", str(CONFIG), "--set", "gse.nonsense=1"]) == 2
    assert main(["train", "--config", str(CONFIG), "--set", "train.steps"]) == 2
    assert main(["report", "--from", str(tmp_path)]) == 2
    (tmp_path / "run.json").write_text("{}")
    assert main(["report", "--from", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_3():
    # weights near the float max overflow in the next forward pass
    argv = ["train", "--config", str(CONFIG), *TINY, "--kind", "full_ft", "--set", "train.lr_dense=1e308",
            "--set", "train.optimizer=sgd"]
    assert main(argv) == 3


def test_compare(output_dir, capsys):
    argv = ["compare", "--config", str(CONFIG), *TINY, "--kinds", "gse,lora", "--trials", "2",
            "--set", "output.name=c1"]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "lora" in out and "/2" in out
    summary = json.loads((output_dir / "c1" / "summary.json").read_text())
    assert summary["budget_ok"] and summary["trials"] == 2
    assert main(["compare", "--config", str(CONFIG), "--trials", "0"]) == 2
    assert main(["compare", "--config", str(CONFIG), "--kinds", "gse,bogus"]) == 2


def test_compare_budget_miss_exit_1():
    # GSE uses 176 parameters here; the nearest LoRA ranks give 160 and 192
    argv = ["compare", "--config", str(CONFIG), *TINY, "--kinds", "gse,lora", "--trials", "1",
            "--set", "gse.r_g=1", "--set", "gse.num_experts=3", "--set", "gse.top_k=1"]
    assert main(argv) == 1


def test_compare_failed_trials_exit_3(monkeypatch):
    import gse.harness.compare as compare

    def boom(*a, **kw):
        raise RuntimeError("boom")

    monkeypatch.setattr(compare, "build_adapter", boom)
    assert main(["compare", "--config", str(CONFIG), *TINY, "--kinds", "lora", "--trials", "1"]) == 3

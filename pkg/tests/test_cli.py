import json
import os
import subprocess
import sys

import pytest

from mcout.analysis import STAT_COLUMNS, TRACE_COLUMNS, read_csv
from mcout.cli import main

TRAIN_CFG = """
d_model = 16
n_layers = 2
n_heads = 2
latent_heads = 2
variant = multi
n_thoughts = 2
batch_size = 4
steps = 4
warmup_steps = 1
eval_batch_size = 16
train_data = {data}
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.txt").write_text("task = count\nn_samples = 12\nseed = 3\n")
    assert main(["gen-data", "--spec", str(root / "spec.txt"), "--out", str(root / "data")]) == 0
    data = root / "data" / "data.jsonl"
    (root / "run.cfg").write_text(TRAIN_CFG.format(data=data))
    assert main(["train", "--config", str(root / "run.cfg"), "--out", str(root / "run")]) == 0
    return root


def test_gen_data_outputs(workspace):
    lines = (workspace / "data" / "data.jsonl").read_text().splitlines()
    assert len(lines) == 12
    assert set(json.loads(lines[0])) >= {"id", "image", "question", "answer", "meta"}
    assert json.loads((workspace / "data" / "spec.json").read_text())["n_samples"] == 12


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "final.bin").exists()
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 4
    meta = json.loads((run / "run.json").read_text())
    assert meta["config"]["variant"] == "multi" and meta["deviations"]


def test_eval_report(workspace, capsys):
    out = workspace / "report.json"
    code = main(["eval", "--ckpt", str(workspace / "run" / "final.bin"),
                 "--data", str(workspace / "data" / "data.jsonl"), "--mode", "open", "--out", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert set(report) == {"accuracy", "bleu", "n_samples", "config_hash"}
    assert report["n_samples"] == 12
    assert json.loads(capsys.readouterr().out) == report


def test_analyze_writes_both_csvs(workspace):
    out = workspace / "stats.csv"
    code = main(["analyze", "--ckpt", str(workspace / "run" / "final.bin"), "--data",
                 str(workspace / "data" / "data.jsonl"), "--nt", "3", "--variant", "multi", "--out", str(out)])
    assert code == 0
    stats = read_csv(out)
    trace = read_csv(workspace / "stats_trace.csv")
    assert list(stats[0]) == STAT_COLUMNS and len(stats) == 4
    assert list(trace[0]) == TRACE_COLUMNS and len(trace) == 12 * 4


def test_resume_flag(workspace):
    run = workspace / "run"
    code = main(["train", "--config", str(workspace / "run.cfg"), "--out", str(workspace / "run2"),
                 "--resume", str(run / "final.bin")])
    assert code == 0
    assert (workspace / "run2" / "final.bin").read_bytes() == (run / "final.bin").read_bytes()


def test_ablate_command(workspace, capsys):
    (workspace / "grid.txt").write_text("mu = 0, 0.5\nn_thoughts = 1\nvariants = base\n")
    code = main(["ablate", "--config", str(workspace / "run.cfg"), "--grid", str(workspace / "grid.txt"),
                 "--out", str(workspace / "abl")])
    assert code == 0
    text = capsys.readouterr().out
    assert "Baseline" in text and "(0.00%)" in text and "MCOUT-Base" in text
    assert len(json.loads((workspace / "abl" / "results.json").read_text())) == 3


def test_exit_code_config_error(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("colour = red\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == 1
    assert "colour" in capsys.readouterr().err


def test_exit_code_missing_file(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "none.bin"), "--data", str(tmp_path / "d.jsonl")]) == 2


def test_exit_code_bad_checkpoint(tmp_path, workspace):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT" * 4)
    assert main(["eval", "--ckpt", str(bad), "--data", str(workspace / "data" / "data.jsonl")]) == 2
    data = (workspace / "run" / "final.bin").read_bytes()
    bad.write_bytes(data[: len(data) // 2])
    assert main(["eval", "--ckpt", str(bad), "--data", str(workspace / "data" / "data.jsonl")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_code_numerical_abort(workspace, tmp_path, capsys):
    cfg = (workspace / "run.cfg").read_text() + "init_lr = 1e30\nmin_lr = 1e30\nwarmup_lr = 1e30\n"
    (tmp_path / "nan.cfg").write_text(cfg)
    assert main(["train", "--config", str(tmp_path / "nan.cfg"), "--out", str(tmp_path / "o")]) == 3
    assert "grad_norms" in capsys.readouterr().err
    assert (tmp_path / "o" / "abort.json").exists()


def test_console_script_entry(workspace):
    env = dict(os.environ)
    proc = subprocess.run([sys.executable, "-m", "mcout.cli", "gen-data", "--spec", str(workspace / "missing")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 2  # argparse error is 2 as well, but here the file is what is missing
    proc = subprocess.run([sys.executable, "-m", "mcout.cli", "--help"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    for cmd in ("gen-data", "train", "eval", "analyze", "ablate"):
        assert cmd in proc.stdout


def test_shipped_configs_parse():
    from pathlib import Path

    from mcout.ablation import AblationGrid
    from mcout.config import RunConfig, parse_key_values
    from mcout.data import DatasetSpec

    root = Path(__file__).resolve().parent.parent / "configs"
    for cfg in root.glob("*.cfg"):
        RunConfig.from_file(cfg)
    for spec in root.glob("*.spec"):
        DatasetSpec(**parse_key_values(spec.read_text(), DatasetSpec, str(spec)))
    assert len(AblationGrid.from_file(root / "grid.txt").cells()) == 17

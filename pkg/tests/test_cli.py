import json
import subprocess
import sys
from pathlib import Path

import pytest

from sidefed.cli import main
from sidefed.sidenet import load_checkpoint

ROOT = Path(__file__).resolve().parents[1]

TINY = """
[run]
name = tiny
seed = 2

[task]
vocab = 16
num_classes = 3
seq = 8
signal = 0.5
train_samples = 48
eval_samples = 24

[train]
lr = {lr}
batch = 8
rank = 2
standalone_epochs = 2

[backbone.b]
num_layers = 2
hidden = 8
heads = 2
vocab = 16
max_seq = 8
num_classes = 3
init_seed = 1

[device.phone]
backbone = b
tflops = 0.01
bandwidth_mbps = 20
count = 2
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY.format(lr=5e-3))
    return path


ARTIFACTS = ("metrics.json", "events.jsonl", "curve.csv", "checkpoint.bin")


def test_run_writes_artifacts_with_config(tiny_cfg, tmp_path, capsys):
    assert main(["run", str(tiny_cfg), "--out-dir", str(tmp_path / "out")]) == 0
    out = tmp_path / "out" / "tiny-seed2"
    assert all((out / a).exists() for a in ARTIFACTS)
    metrics = json.loads((out / "metrics.json").read_text())
    first = json.loads((out / "events.jsonl").read_text().splitlines()[0])
    assert metrics["config"]["seed"] == first["seed"] == 2
    assert first["config"] == metrics["config"]
    assert (out / "curve.csv").read_text().startswith("# seed=2 config=")
    assert load_checkpoint(out / "checkpoint.bin").meta["config"] == metrics["config"]
    assert "time-to-target" in capsys.readouterr().out


def test_identical_invocations_identical_metrics(tiny_cfg, tmp_path):
    blobs = []
    for name in ("a", "b"):
        subprocess.run([sys.executable, "-m", "sidefed", "run", str(tiny_cfg), "--out-dir", str(tmp_path / name)],
                       check=True, capture_output=True)
        blobs.append((tmp_path / name / "tiny-seed2" / "metrics.json").read_bytes())
    assert blobs[0] == blobs[1]


def test_seed_override_and_sync(tiny_cfg, tmp_path):
    assert main(["run", str(tiny_cfg), "--seed", "7", "--with-sync", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "tiny-seed7" / "sync_metrics.json").exists()


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nowhere.cfg")]) == 2
    assert "nowhere.cfg" in capsys.readouterr().err


def test_bad_config_exit_2_with_line(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(TINY.format(lr=5e-3).replace("rank = 2", "rank = 2\ncolour = red"))
    assert main(["run", str(path)]) == 2
    assert f"bad.cfg:{path.read_text().splitlines().index('colour = red') + 1}:" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tmp_path):
    path = tmp_path / "hot.cfg"
    path.write_text(TINY.format(lr=1e305))
    assert main(["run", str(path), "--out-dir", str(tmp_path)]) == 3


def test_account_paper_analog(tmp_path, capsys):
    assert main(["account", str(ROOT / "configs" / "paper_analog.cfg"), "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "forward-only side tuning" in out and "compute reduction" in out
    assert (tmp_path / "paper_analog-account.csv").exists()


def test_partition_report(tiny_cfg, capsys):
    assert main(["partition", str(tiny_cfg), "--alpha", "1e6", "--clients", "3"]) == 0
    first = capsys.readouterr().out
    assert main(["partition", str(tiny_cfg), "--alpha", "1e6", "--clients", "3"]) == 0
    assert capsys.readouterr().out == first
    shares = [list(map(float, line.split()[2:])) for line in first.splitlines()[2:5]]
    assert all(abs(x - 1 / 3) < 0.15 for row in shares for x in row)


def test_gradcheck_exit_0(capsys):
    assert main(["gradcheck"]) == 0
    worst = float(capsys.readouterr().out.splitlines()[-1].split()[3])
    assert worst < 1e-5


def test_hetero3_smoke(tmp_path):
    assert main(["run", str(ROOT / "configs" / "hetero3.cfg"), "--out-dir", str(tmp_path)]) == 0
    out = tmp_path / "hetero3-seed0"
    assert all((out / a).exists() for a in ARTIFACTS)

import json
import subprocess
import sys

import numpy as np
import pytest

from g2b.cli import EXIT_CONFIG, EXIT_OK, EXIT_RESUME, EXIT_RUNTIME, main
from g2b.harness import load_record


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    """4-class npz dataset, 12 train / 4 test images per class."""
    root = tmp_path_factory.mktemp("data")
    rng = np.random.default_rng(0)
    (root / "toy").mkdir()
    for split, n in (("train", 12), ("test", 4)):
        y = np.repeat(np.arange(4), n)
        x = rng.integers(0, 256, (len(y), 32, 32, 3), dtype=np.uint8)
        x[..., 0] = (y[:, None, None] * 60).astype(np.uint8)  # learnable colour cue
        np.savez(root / "toy" / f"{split}.npz", x=x, y=y)
    return root


def _common(data_root, out):
    return ["--dataset", "npz:toy", "--data-root", str(data_root), "--epochs", "1", "--batch-size", "16",
            "--memory-budget", "8", "--output-dir", str(out)]


def test_run_then_resume(tmp_path, data_root, capsys):
    out = tmp_path / "run"
    assert main(["run", *_common(data_root, out)]) == EXIT_OK
    assert "Avg" in capsys.readouterr().out
    first = load_record(out)
    assert first.rounds_completed == 2
    assert main(["run", *_common(data_root, out)]) == EXIT_OK
    assert load_record(out).metrics() == first.metrics()


def test_resume_mismatch_exit_code(tmp_path, data_root):
    out = tmp_path / "run"
    assert main(["run", *_common(data_root, out), "--max-rounds", "1"]) == EXIT_OK
    assert main(["run", *_common(data_root, out), "--max-rounds", "1", "--lr", "0.01"]) == EXIT_RESUME
    assert main(["run", *_common(data_root, out), "--max-rounds", "1", "--lr", "0.01", "--no-resume"]) == EXIT_OK


def test_config_errors_exit_1(tmp_path, data_root, capsys):
    assert main(["run", *_common(data_root, tmp_path), "--backbone", "resnet"]) == EXIT_CONFIG
    assert "backbone" in capsys.readouterr().err
    assert main(["run", "--no-such-flag"]) == EXIT_CONFIG
    assert main(["run", "--enabled-side-blocks", "1,x"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text('{"learning_rate": 1}')
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["sweep", "--strategies", "icarl", "--output-root", str(tmp_path)]) == EXIT_CONFIG


def test_missing_data_exit_2(tmp_path, capsys):
    code = main(["run", "--dataset", "npz:absent", "--data-root", str(tmp_path), "--output-dir", str(tmp_path / "o")])
    assert code == EXIT_RUNTIME
    assert "expected layout" in capsys.readouterr().err


def test_config_file_with_override(tmp_path, data_root):
    cfg = {"dataset": "npz:toy", "data_root": str(data_root), "epochs": 1, "batch_size": 16, "max_rounds": 1,
           "strategy": "finetune", "output_dir": str(tmp_path / "from_file")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(path), "--init-seed", "4", "--g2b", "true"]) == EXIT_OK
    used = load_record(tmp_path / "from_file").config
    assert used["init_seed"] == 4 and used["g2b"] is True and used["strategy"] == "finetune"


def test_sweep_and_report(tmp_path, data_root):
    root = tmp_path / "sweep"
    args = ["sweep", *_common(data_root, tmp_path / "unused"), "--strategies", "finetune,rehearsal",
            "--seeds", "0,1", "--output-root", str(root)]
    assert main(args) == EXIT_OK
    assert len(list(root.glob("*/record.json"))) == 8
    results = (root / "report" / "results.csv").read_text().splitlines()
    assert len(results) == 9
    assert sorted(p.name for p in (root / "report").glob("*.png")) == [
        "npz-toy_2r_cnn_finetune.png", "npz-toy_2r_cnn_rehearsal.png"]
    # rerunning the report from disk gives the same table
    assert main(["report", str(root), "--out", str(tmp_path / "again")]) == EXIT_OK
    assert (tmp_path / "again" / "results.csv").read_text().splitlines() == results


def test_ablate_blocks(tmp_path, data_root):
    root = tmp_path / "abl"
    args = ["ablate-blocks", *_common(data_root, tmp_path / "unused"), "--max-rounds", "1", "--output-root", str(root)]
    assert main(args) == EXIT_OK
    table = (root / "report" / "ablation.csv").read_text().splitlines()
    assert [row.split(",")[0] for row in table[1:]] == ["0000", "1000", "1100", "1110", "1111"]
    params = [float(row.split(",")[1]) for row in table[1:]]
    assert params == sorted(params) and len(set(params)) == 5


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "g2b", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "ablate-blocks" in res.stdout

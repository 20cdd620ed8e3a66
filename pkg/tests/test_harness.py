import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from g2b.cil import ConfigError
from g2b.data import DatasetError, load_dataset, make_synthetic
from g2b.harness import (
    ExperimentConfig,
    ResumeMismatchError,
    RunRecord,
    atomic_write_text,
    build_model,
    load_record,
    run_experiment,
)


@pytest.fixture(scope="module")
def mini():
    """10 classes, 20 train / 5 test each: five 2-class rounds in a few seconds."""
    return make_synthetic(5, num_classes=10, train_per_class=20, test_per_class=5)


def _cfg(tmp_path, **kw):
    base = dict(epochs=1, batch_size=32, memory_budget=20, output_dir=str(tmp_path / "run"))
    base.update(kw)
    return ExperimentConfig(**base)


# ---- config -----------------------------------------------------------------


configs = st.builds(
    ExperimentConfig,
    dataset=st.sampled_from(["synthetic", "synthetic:3", "npz:toy", "cifar10"]),
    backbone=st.sampled_from(["cnn", "vit"]),
    strategy=st.sampled_from(["finetune", "rehearsal", "weight_aligning"]),
    g2b=st.booleans(),
    enabled_side_blocks=st.none() | st.lists(st.booleans(), min_size=1, max_size=5).map(tuple),
    classes_per_round=st.integers(1, 10),
    max_rounds=st.none() | st.integers(1, 10),
    memory_budget=st.integers(1, 5000),
    stream_seed=st.integers(0, 2**31),
    init_seed=st.integers(0, 2**31),
    lr=st.floats(1e-5, 1.0),
    epochs=st.integers(1, 50),
    batch_size=st.integers(1, 512),
    kd_temperature=st.floats(0.5, 10.0),
)


@given(configs)
@settings(max_examples=100, deadline=None)
def test_config_serialisation_round_trip(cfg):
    again = ExperimentConfig.loads(cfg.dumps())
    assert again == cfg
    assert again.hash() == cfg.hash()


def test_config_file_round_trip(tmp_path):
    cfg = ExperimentConfig(backbone="vit", g2b=True, enabled_side_blocks=(True, False))
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


def test_config_hash_ignores_output_dir():
    a = ExperimentConfig(output_dir="a")
    assert a.hash() == a.replace(output_dir="b").hash()
    assert a.hash() != a.replace(init_seed=1).hash()


@pytest.mark.parametrize(
    "kw",
    [dict(backbone="resnet"), dict(strategy="icarl"), dict(classes_per_round=0), dict(memory_budget=0),
     dict(lr=-1.0), dict(epochs=0), dict(stream_seed=-1)],
)
def test_config_rejects_bad_values(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


def test_config_rejects_unknown_keys_and_bad_json():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("{not json")


# ---- datasets -----------------------------------------------------------------


def test_synthetic_is_deterministic_and_seed_dependent():
    a, b = make_synthetic(4, train_per_class=10, test_per_class=2), make_synthetic(4, train_per_class=10, test_per_class=2)
    assert torch.equal(a.train_x, b.train_x) and torch.equal(a.test_y, b.test_y)
    c = make_synthetic(5, train_per_class=10, test_per_class=2)
    assert not torch.equal(a.train_x, c.train_x)


def test_synthetic_shapes_and_uniform_classes(synthetic):
    assert synthetic.train_x.shape == (5000, 3, 32, 32)
    assert synthetic.test_x.shape == (1000, 3, 32, 32)
    assert synthetic.train_x.dtype == torch.uint8
    assert np.bincount(synthetic.train_y.numpy()).tolist() == [500] * 10
    assert np.bincount(synthetic.test_y.numpy()).tolist() == [100] * 10


def test_named_synthetic_uses_seed():
    assert torch.equal(load_dataset("synthetic:0").train_x[:4], make_synthetic(0).train_x[:4])


def test_missing_data_lists_expected_layout(tmp_path):
    with pytest.raises(DatasetError, match="train.npz"):
        load_dataset("npz:nothing", tmp_path)
    with pytest.raises(DatasetError, match="cifar-10-batches-py"):
        load_dataset("cifar10", tmp_path)
    with pytest.raises(DatasetError, match="unknown dataset"):
        load_dataset("mnist", tmp_path)


def test_npz_loader_accepts_channels_last(tmp_path):
    rng = np.random.default_rng(0)
    (tmp_path / "toy").mkdir()
    for split, n in (("train", 6), ("test", 3)):
        np.savez(tmp_path / "toy" / f"{split}.npz", x=rng.integers(0, 256, (n, 32, 32, 3), dtype=np.uint8), y=np.arange(n) % 3)
    ds = load_dataset("npz:toy", tmp_path)
    assert ds.train_x.shape == (6, 3, 32, 32) and ds.num_classes == 3


def test_corrupt_npz_is_reported(tmp_path):
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "train.npz").write_bytes(b"garbage")
    with pytest.raises(DatasetError, match="expected layout"):
        load_dataset("npz:bad", tmp_path)


# ---- runs -----------------------------------------------------------------


def test_five_round_run_writes_outputs(tmp_path, mini):
    cfg = _cfg(tmp_path)
    rec = run_experiment(cfg, mini)
    out = Path(cfg.output_dir)
    assert rec.accuracy.rounds == 5
    assert [len(r) for r in rec.accuracy.per_task] == [1, 2, 3, 4, 5]
    assert (out / "config.json").exists() and (out / "checkpoint.pt").exists()
    assert sorted(p.name for p in (out / "predictions").iterdir()) == [f"round_{k}.npz" for k in range(5)]
    assert load_record(out).metrics() == rec.metrics()
    assert ExperimentConfig.load(out / "config.json") == cfg
    assert rec.memory_occupancy == [(20 // n) * n for n in (2, 4, 6, 8, 10)]
    assert rec.avg is not None and rec.forgetting is not None


def test_max_rounds_truncates(tmp_path, mini):
    rec = run_experiment(_cfg(tmp_path, max_rounds=2, strategy="finetune"), mini)
    assert rec.accuracy.rounds == 2
    assert rec.memory_occupancy == [0, 0]


def test_predictions_stay_inside_seen_label_space(tmp_path, mini):
    cfg = _cfg(tmp_path, strategy="finetune")
    run_experiment(cfg, mini)
    for k in range(5):
        with np.load(Path(cfg.output_dir) / "predictions" / f"round_{k}.npz") as f:
            n_seen = 2 * (k + 1)
            assert f["predictions"].max() < n_seen
            assert f["targets"].max() < n_seen
            assert len(f["targets"]) == 5 * n_seen


def test_rerun_gives_identical_metrics(tmp_path, mini):
    a = run_experiment(_cfg(tmp_path / "a"), mini)
    b = run_experiment(_cfg(tmp_path / "b"), mini)
    assert a.metrics() == b.metrics()
    assert a.batch_hashes == b.batch_hashes


def test_g2b_sees_the_same_batches_as_vanilla(tmp_path, mini):
    van = run_experiment(_cfg(tmp_path / "v", max_rounds=1), mini)
    g2b = run_experiment(_cfg(tmp_path / "g", max_rounds=1, g2b=True), mini)
    assert van.batch_hashes == g2b.batch_hashes


def test_g2b_does_not_change_main_branch_init():
    cfg = ExperimentConfig(init_seed=7)
    van = build_model(cfg)
    g2b = build_model(cfg.replace(g2b=True))
    for name, p in van.state_dict().items():
        assert torch.equal(p, g2b.backbone.state_dict()[name])


def test_g2b_run_records_sparsity(tmp_path, mini):
    rec = run_experiment(_cfg(tmp_path, max_rounds=2, g2b=True), mini)
    assert len(rec.sparsity) == 2
    assert len(rec.sparsity[0]) == 4
    assert all(0.0 <= s["mean"] <= 1.0 for s in rec.sparsity[-1])


def test_stop_and_resume_matches_uninterrupted(tmp_path, mini):
    full = run_experiment(_cfg(tmp_path / "full"), mini)
    cfg = _cfg(tmp_path / "resumed")
    partial = run_experiment(cfg, mini, stop_after_round=2)
    assert partial.rounds_completed == 2
    resumed = run_experiment(cfg, mini)
    assert resumed.metrics() == full.metrics()
    assert resumed.batch_hashes == full.batch_hashes


class Crash(Exception):
    pass


def test_crash_mid_run_then_resume(tmp_path, mini):
    full = run_experiment(_cfg(tmp_path / "full", g2b=True, max_rounds=3), mini)
    cfg = _cfg(tmp_path / "crashy", g2b=True, max_rounds=3)

    def die(k, record):
        if k == 1:
            raise Crash

    with pytest.raises(Crash):
        run_experiment(cfg, mini, on_round_end=die)
    assert load_record(cfg.output_dir).rounds_completed == 2
    assert run_experiment(cfg, mini).metrics() == full.metrics()


def test_resume_with_other_config_is_refused(tmp_path, mini):
    cfg = _cfg(tmp_path)
    run_experiment(cfg, mini, stop_after_round=1)
    with pytest.raises(ResumeMismatchError):
        run_experiment(cfg.replace(lr=0.01), mini)
    # opting out of resume starts over instead
    rec = run_experiment(cfg.replace(lr=0.01, max_rounds=1), mini, resume=False)
    assert rec.rounds_completed == 1


def test_foreign_checkpoint_is_refused(tmp_path, mini):
    cfg = _cfg(tmp_path)
    Path(cfg.output_dir).mkdir(parents=True)
    torch.save({"format": "something-else"}, Path(cfg.output_dir) / "checkpoint.pt")
    with pytest.raises(ResumeMismatchError):
        run_experiment(cfg, mini)


def test_record_round_trip(tmp_path, mini):
    rec = run_experiment(_cfg(tmp_path, max_rounds=2), mini)
    again = RunRecord.from_dict(json.loads(json.dumps(rec.to_dict())))
    assert again.metrics() == rec.metrics()
    assert again.experiment_config == _cfg(tmp_path, max_rounds=2)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "sub" / "f.txt"
    atomic_write_text(target, "one")
    atomic_write_text(target, "two")
    assert target.read_text() == "two"
    assert os.listdir(tmp_path / "sub") == ["f.txt"]

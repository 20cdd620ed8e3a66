"""Experiment configuration, orchestration, persistence and resume.

Output directory layout of one run::

    config.json              resolved ExperimentConfig
    record.json              RunRecord, rewritten after every completed round
    checkpoint.pt            model + memory + record after the last completed round
    predictions/round_<k>.npz   per-sample test predictions after round k

Checkpoint container (``torch.save`` dict, version 1)::

    format           "g2b-checkpoint"
    version          1
    config_hash      sha256 of the config (output_dir excluded)
    rounds_completed number of finished rounds
    head_width       classifier units at save time
    model_state      state_dict
    memory           ExemplarMemory.to_dict()
    record           RunRecord.to_dict()
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
from torch import nn

from g2b.backbones import build_backbone, expand_head, param_count
from g2b.cil import (
    ConfigError,
    ExemplarMemory,
    StrategySpec,
    build_task_stream,
    collect_mask_sparsity,
    derive_seed,
    evaluate,
    run_round,
    update_memory,
)
from g2b.data import ImageDataset, load_dataset
from g2b.metrics import AccuracyMatrix, avg_accuracy, forgetting_measure, last_accuracy, sparsity_report
from g2b.sidebranch import wrap_g2b

__all__ = [
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
    "ExperimentConfig",
    "ResumeMismatchError",
    "RunRecord",
    "atomic_write_bytes",
    "atomic_write_text",
    "build_model",
    "load_record",
    "run_experiment",
]

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "g2b-checkpoint"
CHECKPOINT_VERSION = 1


class ResumeMismatchError(RuntimeError):
    """A checkpoint in the output directory belongs to a different config."""


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    data_root: str = "data"
    backbone: str = "cnn"
    strategy: str = "rehearsal"
    g2b: bool = False
    enabled_side_blocks: tuple[bool, ...] | None = None
    classes_per_round: int = 2
    max_rounds: int | None = None
    memory_budget: int = 500
    stream_seed: int = 0
    init_seed: int = 0
    lr: float = 0.05
    epochs: int = 5
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    kd_temperature: float = 2.0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.enabled_side_blocks is not None:
            self.enabled_side_blocks = tuple(bool(b) for b in self.enabled_side_blocks)
        self.validate()

    def validate(self) -> None:
        if self.backbone not in ("cnn", "vit"):
            raise ConfigError(f"backbone must be 'cnn' or 'vit', got {self.backbone!r}")
        if self.classes_per_round < 1:
            raise ConfigError("classes_per_round must be >= 1")
        if self.memory_budget < 1:
            raise ConfigError("memory_budget must be >= 1")
        if self.max_rounds is not None and self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if self.stream_seed < 0 or self.init_seed < 0:
            raise ConfigError("seeds must be non-negative")
        self.strategy_spec()  # validates strategy fields

    def strategy_spec(self) -> StrategySpec:
        return StrategySpec(
            kind=self.strategy,
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            kd_temperature=self.kd_temperature,
            g2b_enabled=self.g2b,
            enabled_side_blocks=self.enabled_side_blocks,
        )

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if d["enabled_side_blocks"] is not None:
            d["enabled_side_blocks"] = list(d["enabled_side_blocks"])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def save(self, path: str | Path) -> None:
        atomic_write_text(Path(path), self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @property
    def method(self) -> str:
        return f"G2B({self.strategy})" if self.g2b else self.strategy


@dataclass
class RunRecord:
    config_hash: str
    config: dict[str, Any]
    accuracy: AccuracyMatrix = field(default_factory=AccuracyMatrix)
    round_seconds: list[float] = field(default_factory=list)
    memory_occupancy: list[int] = field(default_factory=list)
    sparsity: list[list[dict[str, float]]] = field(default_factory=list)
    round_loss: list[float] = field(default_factory=list)
    batch_hashes: list[list[str]] = field(default_factory=list)
    param_count: float = 0.0
    avg: float | None = None
    last: float | None = None
    forgetting: float | None = None

    @property
    def rounds_completed(self) -> int:
        return self.accuracy.rounds

    def finalize(self) -> None:
        self.avg = avg_accuracy(self.accuracy)
        self.last = last_accuracy(self.accuracy)
        self.forgetting = forgetting_measure(self.accuracy) if self.accuracy.rounds >= 2 else None

    def metrics(self) -> dict[str, Any]:
        """Everything that must be reproducible (wall-clock excluded)."""
        return {
            "accuracy": self.accuracy.to_dict(),
            "avg": self.avg,
            "last": self.last,
            "forgetting": self.forgetting,
            "param_count": self.param_count,
            "memory_occupancy": self.memory_occupancy,
            "sparsity": self.sparsity,
        }

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["accuracy"] = self.accuracy.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunRecord":
        d = dict(d)
        d["accuracy"] = AccuracyMatrix.from_dict(d["accuracy"])
        return cls(**d)

    @property
    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig.from_dict(self.config)


def load_record(path: str | Path) -> RunRecord:
    path = Path(path)
    if path.is_dir():
        path = path / "record.json"
    return RunRecord.from_dict(json.loads(path.read_text(encoding="utf-8")))


def build_model(config: ExperimentConfig, input_size: int = 32) -> nn.Module:
    """Backbone (optionally G2B-wrapped) initialised from ``init_seed``.

    The main branch is built first, so its weights do not depend on ``g2b``.
    """
    torch.manual_seed(config.init_seed)
    model = build_backbone(config.backbone, input_size=input_size)
    if config.g2b:
        model = wrap_g2b(model, config.enabled_side_blocks)
    return model


def _save_checkpoint(path: Path, config_hash: str, model: nn.Module, memory: ExemplarMemory, record: RunRecord) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "rounds_completed": record.rounds_completed,
        "head_width": model.head.out_features,
        "model_state": model.state_dict(),
        "memory": memory.to_dict(),
        "record": record.to_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def _load_checkpoint(path: Path, config_hash: str) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ResumeMismatchError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    if payload["config_hash"] != config_hash:
        raise ResumeMismatchError(
            f"{path} was written for config {payload['config_hash'][:12]}, current config is {config_hash[:12]}"
        )
    return payload


def run_experiment(
    config: ExperimentConfig,
    dataset: ImageDataset | None = None,
    resume: bool = True,
    stop_after_round: int | None = None,
    on_round_end: Callable[[int, RunRecord], None] | None = None,
) -> RunRecord:
    """Run (or resume) the full incremental protocol for one config.

    ``stop_after_round`` halts after that many rounds have completed, leaving
    a resumable checkpoint behind, as if the process had been killed.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_hash = config.hash()
    if dataset is None:
        dataset = load_dataset(config.dataset, config.data_root)
    stream = build_task_stream(dataset, config.classes_per_round, config.stream_seed)
    n_rounds = len(stream) if config.max_rounds is None else min(config.max_rounds, len(stream))
    strategy = config.strategy_spec()

    model = build_model(config, dataset.image_size)
    memory = ExemplarMemory(config.memory_budget)
    record = RunRecord(config_hash, config.to_dict())
    ckpt_path = out / "checkpoint.pt"
    if resume and ckpt_path.exists():
        payload = _load_checkpoint(ckpt_path, config_hash)
        if payload["head_width"]:
            model.head.resize_(payload["head_width"])
        model.load_state_dict(payload["model_state"])
        memory = ExemplarMemory.from_dict(payload["memory"])
        record = RunRecord.from_dict(payload["record"])
        logger.info("resuming %s after round %d", out, record.rounds_completed)
    atomic_write_text(out / "config.json", config.dumps())

    for k in range(record.rounds_completed, n_rounds):
        if stop_after_round is not None and k >= stop_after_round:
            return record
        t0 = time.perf_counter()
        gen = torch.Generator().manual_seed(derive_seed(config.init_seed, k, 1))
        expand_head(model, config.classes_per_round, generator=gen)
        trace: dict = {}
        run_round(model, strategy, dataset, stream, k, memory, seed=config.stream_seed, trace=trace)
        if strategy.rehearses:
            update_memory(memory, stream, k, model, dataset)
        result = evaluate(model, dataset, stream, k)
        buf_path = out / "predictions" / f"round_{k}.npz"
        buf = io.BytesIO()
        np.savez(buf, sample_indices=result.sample_indices, targets=result.targets, predictions=result.predictions)
        atomic_write_bytes(buf_path, buf.getvalue())

        record.accuracy.append_row(result.row, result.overall)
        record.round_seconds.append(time.perf_counter() - t0)
        record.memory_occupancy.append(len(memory))
        record.round_loss.append(float(np.mean(trace["losses"])))
        record.batch_hashes.append(trace["batch_hashes"])
        if config.g2b:
            rows = collect_mask_sparsity(model, dataset, result.sample_indices)
            record.sparsity.append(sparsity_report(rows))
        record.param_count = param_count(model)
        record.finalize()
        logger.info(
            "%s round %d: overall %.4f (%.1fs)", config.method, k, record.accuracy.o(k), record.round_seconds[-1]
        )
        _save_checkpoint(ckpt_path, config_hash, model, memory, record)
        atomic_write_text(out / "record.json", json.dumps(record.to_dict(), indent=1) + "\n")
        if on_round_end is not None:
            on_round_end(k, record)
    return record

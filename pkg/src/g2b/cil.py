"""Class-incremental protocol: task streams, exemplar memory, strategies, evaluation."""

from __future__ import annotations

import copy
import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from g2b.data import ImageDataset
from g2b.modulation import per_sample_sparsity

__all__ = [
    "STRATEGIES",
    "ConfigError",
    "EvalResult",
    "ExemplarMemory",
    "Round",
    "StrategySpec",
    "TaskStream",
    "apply_weight_align",
    "build_task_stream",
    "collect_mask_sparsity",
    "derive_seed",
    "distillation_loss",
    "evaluate",
    "herding_order",
    "round_loss",
    "run_round",
    "update_memory",
    "weight_align",
]

logger = logging.getLogger(__name__)

STRATEGIES = ("finetune", "rehearsal", "weight_aligning")


class ConfigError(ValueError):
    """Invalid protocol or strategy configuration."""


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative ints."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint64)[0] >> 1)


# ------------------------
# Task stream
# ------------------------
@dataclass(frozen=True)
class Round:
    index: int
    class_ids: tuple[int, ...]
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass
class TaskStream:
    rounds: list[Round]
    class_order: tuple[int, ...]
    classes_per_round: int
    order_seed: int

    def __len__(self) -> int:
        return len(self.rounds)

    @property
    def label_of(self) -> dict[int, int]:
        """Dataset class id -> model output unit."""
        return {c: i for i, c in enumerate(self.class_order)}

    def remap(self, labels: Tensor) -> Tensor:
        table = torch.empty(max(self.class_order) + 1, dtype=torch.long)
        table[list(self.class_order)] = torch.arange(len(self.class_order))
        return table[labels]

    def classes_seen(self, k: int) -> int:
        """Number of classes learned after round k (0-based)."""
        return (k + 1) * self.classes_per_round

    def round_of_label(self, label: int) -> int:
        return label // self.classes_per_round


def build_task_stream(dataset: ImageDataset, classes_per_round: int, order_seed: int) -> TaskStream:
    """Shuffle the classes with ``order_seed`` and cut them into equal rounds."""
    n = dataset.num_classes
    if classes_per_round < 1 or n % classes_per_round:
        raise ConfigError(f"classes_per_round={classes_per_round} does not divide {n} classes")
    order = tuple(int(c) for c in np.random.default_rng(order_seed).permutation(n))
    train_y = dataset.train_y.numpy()
    test_y = dataset.test_y.numpy()
    rounds = []
    for k in range(n // classes_per_round):
        ids = order[k * classes_per_round : (k + 1) * classes_per_round]
        tr = np.flatnonzero(np.isin(train_y, ids))
        te = np.flatnonzero(np.isin(test_y, ids))
        if tr.size == 0:
            raise ConfigError(f"round {k} (classes {ids}) has no training samples")
        rounds.append(Round(k, ids, tr, te))
    return TaskStream(rounds, order, classes_per_round, order_seed)


# ------------------------
# Exemplar memory
# ------------------------
@dataclass
class ExemplarMemory:
    """Fixed-budget store of training-sample indices per class.

    Each class list is in herding priority order, so shrinking a class to a
    smaller quota keeps its best exemplars.
    """

    budget: int
    store: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError(f"memory budget must be positive, got {self.budget}")

    def __len__(self) -> int:
        return sum(len(v) for v in self.store.values())

    def indices(self) -> np.ndarray:
        if not self.store:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.asarray(self.store[c], dtype=np.int64) for c in self.store])

    def quota(self, classes_seen: int) -> int:
        return self.budget // classes_seen

    def to_dict(self) -> dict:
        return {"budget": self.budget, "store": {str(c): list(v) for c, v in self.store.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ExemplarMemory":
        return cls(int(d["budget"]), {int(c): [int(i) for i in v] for c, v in d["store"].items()})


def herding_order(features: Tensor, m: int) -> list[int]:
    """Greedy herding: pick ``m`` rows whose running mean tracks the overall mean.

    At step t the row minimising ``||mean - (sum_selected + f_i) / t||`` is
    taken, without replacement; ties go to the lowest row index.
    """
    features = features.to(torch.float64)
    n = features.shape[0]
    m = min(m, n)
    mu = features.mean(dim=0)
    running = torch.zeros_like(mu)
    taken = torch.zeros(n, dtype=torch.bool)
    order = []
    for t in range(1, m + 1):
        dist = torch.linalg.vector_norm(mu - (running + features) / t, dim=1)
        dist[taken] = float("inf")
        i = int(torch.argmin(dist))
        order.append(i)
        taken[i] = True
        running += features[i]
    return order


@torch.no_grad()
def extract_features(model: nn.Module, dataset: ImageDataset, split: str, indices, batch_size: int = 256) -> Tensor:
    was_training = model.training
    model.eval()
    feats = []
    for s in range(0, len(indices), batch_size):
        feats.append(model.forward_features(dataset.images(split, indices[s : s + batch_size]))[0])
    model.train(was_training)
    return torch.cat(feats) if feats else torch.zeros(0, model.feature_dim)


def update_memory(
    memory: ExemplarMemory,
    stream: TaskStream,
    round_index: int,
    model: nn.Module,
    dataset: ImageDataset,
) -> ExemplarMemory:
    """Shrink old classes to the new quota and herd exemplars for the round's classes."""
    q = memory.quota(stream.classes_seen(round_index))
    for c in memory.store:
        memory.store[c] = memory.store[c][:q]
    train_y = dataset.train_y.numpy()
    rnd = stream.rounds[round_index]
    for c in rnd.class_ids:
        idx = rnd.train_indices[train_y[rnd.train_indices] == c]
        if q == 0 or idx.size == 0:
            memory.store[c] = []
            continue
        feats = extract_features(model, dataset, "train", idx)
        memory.store[c] = [int(idx[i]) for i in herding_order(feats, q)]
    assert len(memory) <= memory.budget
    return memory


# ------------------------
# Strategies
# ------------------------
@dataclass
class StrategySpec:
    kind: str = "finetune"
    lr: float = 0.05
    epochs: int = 5
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    kd_temperature: float = 2.0
    g2b_enabled: bool = False
    enabled_side_blocks: tuple[bool, ...] | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def rehearses(self) -> bool:
        return self.kind in ("rehearsal", "weight_aligning")


def distillation_loss(logits: Tensor, old_logits: Tensor, temperature: float) -> Tensor:
    """Temperature-scaled KL between the frozen model's and the current old-class logits."""
    n_old = old_logits.shape[1]
    log_p = F.log_softmax(logits[:, :n_old] / temperature, dim=1)
    q = F.softmax(old_logits / temperature, dim=1)
    return F.kl_div(log_p, q, reduction="batchmean") * temperature**2


def round_loss(
    logits: Tensor,
    targets: Tensor,
    old_logits: Tensor | None,
    strategy: StrategySpec,
) -> Tensor:
    """Cross-entropy over all seen classes, plus old-class distillation for rehearsal strategies.

    The distillation term is weighted by old / total classes, which is zero in
    round 0, so all strategies coincide there.
    """
    loss = F.cross_entropy(logits, targets)
    if old_logits is not None and strategy.rehearses:
        n_old, n_total = old_logits.shape[1], logits.shape[1]
        loss = loss + (n_old / n_total) * distillation_loss(logits, old_logits, strategy.kd_temperature)
    return loss


def batch_hash(indices: Tensor) -> str:
    return hashlib.sha256(indices.to(torch.int64).numpy().tobytes()).hexdigest()[:16]


def run_round(
    model: nn.Module,
    strategy: StrategySpec,
    dataset: ImageDataset,
    stream: TaskStream,
    round_index: int,
    memory: ExemplarMemory | None = None,
    seed: int = 0,
    trace: dict | None = None,
) -> nn.Module:
    """Train ``model`` on one round.

    The head must already cover every class up to this round. Batches are
    drawn in an order fixed by ``(seed, round_index, epoch)``. If ``trace`` is
    given, per-batch losses and index hashes are appended to it.
    """
    rnd = stream.rounds[round_index]
    n_seen = stream.classes_seen(round_index)
    n_old = n_seen - stream.classes_per_round
    if len(rnd.train_indices) == 0:
        raise ValueError(f"round {round_index} has no training data")
    if model.head.out_features != n_seen:
        raise ValueError(f"head has {model.head.out_features} units, round {round_index} needs {n_seen}")

    indices = rnd.train_indices
    if strategy.rehearses and memory is not None and len(memory):
        indices = np.concatenate([indices, memory.indices()])
    indices = torch.from_numpy(np.asarray(indices, dtype=np.int64))
    targets_all = stream.remap(dataset.train_y)

    old_model = None
    if strategy.rehearses and n_old > 0:
        old_model = copy.deepcopy(model).eval()
        for p in old_model.parameters():
            p.requires_grad_(False)

    optimizer = torch.optim.SGD(
        model.parameters(), lr=strategy.lr, momentum=strategy.momentum, weight_decay=strategy.weight_decay
    )
    steps_per_epoch = -(-len(indices) // strategy.batch_size)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=strategy.epochs * steps_per_epoch)

    model.train()
    for epoch in range(strategy.epochs):
        gen = torch.Generator().manual_seed(derive_seed(seed, round_index, epoch))
        perm = indices[torch.randperm(len(indices), generator=gen)]
        for s in range(0, len(perm), strategy.batch_size):
            idx = perm[s : s + strategy.batch_size]
            x = dataset.images("train", idx)
            y = targets_all[idx]
            logits, _ = model(x)
            old_logits = None
            if old_model is not None:
                with torch.no_grad():
                    old_logits = old_model(x)[0][:, :n_old]
            loss = round_loss(logits, y, old_logits, strategy)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            if trace is not None:
                trace.setdefault("losses", []).append(float(loss.detach()))
                trace.setdefault("batch_hashes", []).append(batch_hash(idx))
        logger.debug("round %d epoch %d loss %.4f", round_index, epoch, float(loss.detach()))

    if strategy.kind == "weight_aligning" and n_old > 0:
        apply_weight_align(model, n_old)
    return model


def weight_align(head_weights: Tensor, old_class_ids: Sequence[int], new_class_ids: Sequence[int]) -> Tensor:
    """Rescale new-class rows so their mean L2 norm matches the old rows'."""
    if len(old_class_ids) == 0 or len(new_class_ids) == 0:
        raise ValueError("weight aligning needs both old and new classes")
    w = head_weights.detach().clone()
    old = list(old_class_ids)
    new = list(new_class_ids)
    mean_old = torch.linalg.vector_norm(w[old], dim=1).mean()
    mean_new = torch.linalg.vector_norm(w[new], dim=1).mean()
    if mean_new == 0:
        warnings.warn("new-class rows have zero norm; skipping weight aligning", RuntimeWarning, stacklevel=2)
        return w
    w[new] *= mean_old / mean_new
    return w


@torch.no_grad()
def apply_weight_align(model: nn.Module, n_old: int) -> float:
    """Align the head in place; returns the scale applied to the new rows."""
    head = model.head
    n = head.out_features
    before = head.weight.detach().clone()
    head.weight.copy_(weight_align(before, range(n_old), range(n_old, n)))
    new_norm = torch.linalg.vector_norm(before[n_old:], dim=1).mean()
    return float(torch.linalg.vector_norm(head.weight[n_old:], dim=1).mean() / new_norm) if new_norm else 1.0


# ------------------------
# Evaluation
# ------------------------
@dataclass
class EvalResult:
    row: list[tuple[int, int]]  # per round j <= k: (correct, total)
    overall: tuple[int, int]
    sample_indices: np.ndarray  # test-set index of each prediction
    targets: np.ndarray  # remapped true labels
    predictions: np.ndarray  # argmax over all classes seen so far


@torch.no_grad()
def evaluate(
    model: nn.Module,
    dataset: ImageDataset,
    stream: TaskStream,
    upto_round: int,
    batch_size: int = 256,
) -> EvalResult:
    """Top-1 accuracy on the test samples of every round learned so far."""
    was_training = model.training
    model.eval()
    n_seen = stream.classes_seen(upto_round)
    idx = np.concatenate([stream.rounds[j].test_indices for j in range(upto_round + 1)])
    targets = stream.remap(dataset.test_y)[torch.from_numpy(idx)].numpy()
    preds = []
    for s in range(0, len(idx), batch_size):
        logits, _ = model(dataset.images("test", torch.from_numpy(idx[s : s + batch_size])))
        preds.append(logits[:, :n_seen].argmax(dim=1))
    model.train(was_training)
    preds = torch.cat(preds).numpy() if preds else np.zeros(0, dtype=np.int64)
    correct = preds == targets
    task_of = targets // stream.classes_per_round
    row = [(int(correct[task_of == j].sum()), int((task_of == j).sum())) for j in range(upto_round + 1)]
    return EvalResult(row, (int(correct.sum()), int(len(correct))), idx, targets, preds)


@torch.no_grad()
def collect_mask_sparsity(
    model: nn.Module,
    dataset: ImageDataset,
    indices,
    batch_size: int = 256,
) -> list[list[float]]:
    """Per-sample zero fraction of each enabled mask over the given test samples."""
    if not hasattr(model, "compute_masks"):
        return []
    was_training = model.training
    model.eval()
    rows = []
    for s in range(0, len(indices), batch_size):
        x = dataset.images("test", torch.as_tensor(indices[s : s + batch_size]))
        masks = [m for m in model.compute_masks(x) if m is not None]
        per_block = torch.stack([per_sample_sparsity(m) for m in masks], dim=1)
        rows.extend(per_block.tolist())
    model.train(was_training)
    return rows

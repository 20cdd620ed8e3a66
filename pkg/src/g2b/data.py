"""Class-labelled image datasets for the incremental protocol.

Three sources are understood by :func:`load_dataset`:

``synthetic`` / ``synthetic:<seed>``
    Procedurally generated 10-class, 32x32 RGB set (500 train / 100 test
    images per class). Generated in memory; byte-identical for a given seed.

``npz:<name>``
    ``<root>/<name>/train.npz`` and ``<root>/<name>/test.npz``, each holding
    ``x`` (uint8, ``[N, 32, 32, 3]`` or ``[N, 3, 32, 32]``) and ``y`` (int
    labels ``0..K-1``).

``cifar10`` / ``cifar100``
    The python-pickle releases unpacked under ``<root>`` (``cifar-10-batches-py``
    or ``cifar-100-python``).

Images are kept as uint8 ``[N, 3, H, W]`` tensors; sample ``i`` of a split
always refers to the same image.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

__all__ = ["DatasetError", "ImageDataset", "load_dataset", "make_synthetic"]

MEAN = 0.5
STD = 0.25


class DatasetError(RuntimeError):
    pass


@dataclass
class ImageDataset:
    name: str
    train_x: Tensor  # uint8 [N, 3, H, W]
    train_y: Tensor  # int64 [N]
    test_x: Tensor
    test_y: Tensor
    num_classes: int

    @property
    def image_size(self) -> int:
        return self.train_x.shape[-1]

    def split(self, name: str) -> tuple[Tensor, Tensor]:
        if name == "train":
            return self.train_x, self.train_y
        if name == "test":
            return self.test_x, self.test_y
        raise ValueError(f"unknown split {name!r}")

    def images(self, split: str, indices) -> Tensor:
        """Normalised float images for the given sample indices."""
        x, _ = self.split(split)
        return (x[indices].to(torch.float32) / 255.0 - MEAN) / STD


def make_synthetic(
    seed: int = 0,
    num_classes: int = 10,
    train_per_class: int = 500,
    test_per_class: int = 100,
    size: int = 32,
    noise: float = 0.6,
) -> ImageDataset:
    """Oriented coloured gratings with random phase and contrast, a distractor grating and noise.

    Each class owns three grating components (frequency, orientation, colour).
    The distractor is drawn independently of the class. Classes share one
    frequency range, so they overlap enough that a network has to learn real
    features to tell them apart.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    n_comp = 3
    freq = rng.uniform(1.5, 3.0, size=(num_classes, n_comp)) * 2 * np.pi / size
    theta = rng.uniform(0, np.pi, size=(num_classes, n_comp))
    color = rng.normal(size=(num_classes, n_comp, 3))
    color /= np.linalg.norm(color, axis=-1, keepdims=True)

    def render(n_per_class: int) -> tuple[np.ndarray, np.ndarray]:
        n = n_per_class * num_classes
        labels = np.repeat(np.arange(num_classes), n_per_class)
        phase = rng.uniform(0, 2 * np.pi, size=(n, n_comp))
        amp = rng.uniform(0.2, 1.0, size=(n, n_comp))
        proj = (
            np.cos(theta[labels])[:, :, None, None] * xx + np.sin(theta[labels])[:, :, None, None] * yy
        )  # [n, comp, H, W]
        waves = amp[:, :, None, None] * np.sin(freq[labels][:, :, None, None] * proj + phase[:, :, None, None])
        img = np.einsum("nkhw,nkc->nchw", waves, color[labels]) / n_comp
        # class-agnostic distractor grating
        d_freq = rng.uniform(1.5, 3.0, size=(n, 1, 1)) * 2 * np.pi / size
        d_theta = rng.uniform(0, np.pi, size=(n, 1, 1))
        d_color = rng.normal(size=(n, 3))
        d_color /= np.linalg.norm(d_color, axis=-1, keepdims=True)
        d_wave = np.sin(d_freq * (np.cos(d_theta) * xx + np.sin(d_theta) * yy) + rng.uniform(0, 2 * np.pi, size=(n, 1, 1)))
        img += 0.4 * d_color[:, :, None, None] * d_wave[:, None]
        img += rng.normal(scale=noise, size=img.shape)
        img = np.clip(img * 0.5 + 0.5, 0.0, 1.0)
        return np.round(img * 255).astype(np.uint8), labels

    train_x, train_y = render(train_per_class)
    test_x, test_y = render(test_per_class)
    return ImageDataset(
        name=f"synthetic:{seed}",
        train_x=torch.from_numpy(train_x),
        train_y=torch.from_numpy(train_y).long(),
        test_x=torch.from_numpy(test_x),
        test_y=torch.from_numpy(test_y).long(),
        num_classes=num_classes,
    )


def _chw(x: np.ndarray, source: Path) -> np.ndarray:
    if x.ndim != 4 or x.dtype != np.uint8:
        raise DatasetError(f"{source}: expected a uint8 array of rank 4, got {x.dtype} {x.shape}")
    if x.shape[1] == 3:
        return x
    if x.shape[-1] == 3:
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))
    raise DatasetError(f"{source}: cannot find a 3-channel axis in shape {x.shape}")


NPZ_LAYOUT = """expected layout:
  <root>/<name>/train.npz  with arrays x (uint8 [N,32,32,3] or [N,3,32,32]) and y (int [N])
  <root>/<name>/test.npz   same arrays for the test split"""

CIFAR_LAYOUT = """expected layout (python pickle release):
  <root>/cifar-10-batches-py/data_batch_1..5, test_batch
  <root>/cifar-100-python/train, test"""


def _load_npz(name: str, root: Path) -> ImageDataset:
    arrays = {}
    for split in ("train", "test"):
        path = root / name / f"{split}.npz"
        try:
            with np.load(path) as f:
                arrays[split] = (_chw(f["x"], path), np.asarray(f["y"]).astype(np.int64))
        except (OSError, KeyError, ValueError) as exc:
            raise DatasetError(f"could not read {path}: {exc}\n{NPZ_LAYOUT}") from exc
    num_classes = int(max(arrays["train"][1].max(), arrays["test"][1].max())) + 1
    return ImageDataset(
        f"npz:{name}",
        torch.from_numpy(arrays["train"][0]),
        torch.from_numpy(arrays["train"][1]),
        torch.from_numpy(arrays["test"][0]),
        torch.from_numpy(arrays["test"][1]),
        num_classes,
    )


def _unpickle(path: Path) -> dict:
    with open(path, "rb") as f:
        return pickle.load(f, encoding="latin1")


def _load_cifar(name: str, root: Path) -> ImageDataset:
    try:
        if name == "cifar10":
            base = root / "cifar-10-batches-py"
            train = [_unpickle(base / f"data_batch_{i}") for i in range(1, 6)]
            test = [_unpickle(base / "test_batch")]
            key, num_classes = "labels", 10
        else:
            base = root / "cifar-100-python"
            train, test = [_unpickle(base / "train")], [_unpickle(base / "test")]
            key, num_classes = "fine_labels", 100
        tx = np.concatenate([b["data"] for b in train]).reshape(-1, 3, 32, 32)
        ty = np.concatenate([b[key] for b in train]).astype(np.int64)
        vx = np.concatenate([b["data"] for b in test]).reshape(-1, 3, 32, 32)
        vy = np.concatenate([b[key] for b in test]).astype(np.int64)
    except (OSError, KeyError, pickle.UnpicklingError, ValueError) as exc:
        raise DatasetError(f"could not read {name} under {root}: {exc}\n{CIFAR_LAYOUT}") from exc
    return ImageDataset(
        name,
        torch.from_numpy(tx.astype(np.uint8)),
        torch.from_numpy(ty),
        torch.from_numpy(vx.astype(np.uint8)),
        torch.from_numpy(vy),
        num_classes,
    )


def load_dataset(name: str, root: str | Path = "data") -> ImageDataset:
    root = Path(root)
    if name == "synthetic" or name.startswith("synthetic:"):
        _, _, seed = name.partition(":")
        try:
            return make_synthetic(int(seed) if seed else 0)
        except ValueError as exc:
            raise DatasetError(f"bad synthetic seed in {name!r}") from exc
    if name.startswith("npz:"):
        return _load_npz(name[4:], root)
    if name in ("cifar10", "cifar100"):
        return _load_cifar(name, root)
    raise DatasetError(f"unknown dataset {name!r}; use synthetic[:seed], npz:<name>, cifar10 or cifar100")

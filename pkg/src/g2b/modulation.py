"""Elementwise soft-mask modulation shared by the backbones and the side branch."""

from __future__ import annotations

import torch
from torch import Tensor


class MaskShapeError(ValueError):
    """A mask does not match the block output it is meant to modulate."""


def modulate(main_out: Tensor, mask: Tensor, block_index: int | None = None) -> Tensor:
    """Hadamard product of a block output with its soft mask.

    Positions where ``mask`` is zero come out as exact zeros; gradients flow
    into both operands.
    """
    if main_out.shape != mask.shape:
        where = f"block {block_index}: " if block_index is not None else ""
        raise MaskShapeError(
            f"{where}mask shape {tuple(mask.shape)} does not match "
            f"block output shape {tuple(main_out.shape)}"
        )
    return main_out * mask


def mask_sparsity(mask: Tensor) -> float:
    """Fraction of mask entries that are exactly zero."""
    if mask.numel() == 0:
        return 0.0
    return float((mask == 0).sum().item()) / mask.numel()


def per_sample_sparsity(mask: Tensor) -> Tensor:
    """Zero fraction of each sample in a batched mask, shape ``[B]``."""
    flat = mask.reshape(mask.shape[0], -1)
    return (flat == 0).to(torch.float64).mean(dim=1)

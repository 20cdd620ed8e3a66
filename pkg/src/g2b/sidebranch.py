"""Side branch: a lightweight CNN whose per-block outputs softly mask a backbone.

Every side block is two 3x3 conv -> BN -> ReLU layers. The side branch runs
on the raw input image, in parallel to the main branch. An adapter turns the
i-th side block output into a mask with the exact shape of the i-th main
block output:

* feature-map blocks: identity, or max pooling when the side map is an
  integer multiple larger than the main map;
* token blocks ``[D, P]``: a bias-free ``D``-kernel conv with kernel = stride
  = ``S / sqrt(P)`` followed by ReLU and a row-major flatten, so grid cell
  ``(r, c)`` lands on token ``r * sqrt(P) + c``.

The main block output is then multiplied elementwise by the mask.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from g2b.backbones import FEATURE_MAP, TOKEN_MATRIX, Backbone, BlockDescriptor
from g2b.modulation import MaskShapeError, mask_sparsity, modulate, per_sample_sparsity

__all__ = [
    "AdapterConfigError",
    "AdapterSpec",
    "SideBlock",
    "IdentityAdapter",
    "MaxPoolAdapter",
    "ConvReshapeAdapter",
    "G2BModel",
    "MaskShapeError",
    "adapt",
    "build_adapter",
    "mask_sparsity",
    "modulate",
    "per_sample_sparsity",
    "plan_adapter",
    "plan_side_branch",
    "side_block_forward",
    "unflatten_tokens",
    "wrap_g2b",
]

pylogger = logging.getLogger(__name__)


class AdapterConfigError(ValueError):
    """A side block cannot be shape-matched to its main block."""


@dataclass(frozen=True)
class AdapterSpec:
    kind: str  # "identity" | "maxpool" | "conv_reshape"
    window: int = 1  # pooling window or conv kernel (= stride in both cases)
    out_channels: int | None = None


class SideBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"side block expects {self.in_channels} input channels, got {x.shape[1]}")
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


def side_block_forward(side_input: Tensor, block: SideBlock) -> Tensor:
    return block(side_input)


class IdentityAdapter(nn.Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


class MaxPoolAdapter(nn.Module):
    def __init__(self, window: int):
        super().__init__()
        self.window = window

    def forward(self, x: Tensor) -> Tensor:
        return F.max_pool2d(x, self.window, self.window)


class ConvReshapeAdapter(nn.Module):
    """``[B, C, S, S]`` -> ``[B, D, P]`` with ``P = (S / k) ** 2``."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv2d(in_channels, out_channels, kernel, stride=kernel, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.conv(x)).flatten(2)


def unflatten_tokens(tokens: Tensor) -> Tensor:
    """Inverse of the adapter's flatten: ``[B, D, P]`` -> ``[B, D, sqrt(P), sqrt(P)]``."""
    g = math.isqrt(tokens.shape[-1])
    if g * g != tokens.shape[-1]:
        raise ValueError(f"token count {tokens.shape[-1]} is not a perfect square")
    return tokens.reshape(*tokens.shape[:-1], g, g)


def plan_adapter(side_channels: int, side_size: int, target: BlockDescriptor, block_index: int = 0) -> AdapterSpec:
    """Pick the adapter mapping a ``[side_channels, side_size, side_size]`` map onto ``target``.

    Raises AdapterConfigError when no integral pooling ratio or conv kernel exists.
    """
    if target.kind == FEATURE_MAP:
        if side_channels != target.width:
            raise AdapterConfigError(
                f"block {block_index}: side width {side_channels} must equal main channel count {target.width}"
            )
        if side_size % target.size:
            raise AdapterConfigError(
                f"block {block_index}: side size {side_size} is not an integer multiple of main size {target.size}"
            )
        ratio = side_size // target.size
        return AdapterSpec("identity") if ratio == 1 else AdapterSpec("maxpool", ratio)
    grid = target.grid
    if side_size % grid:
        raise AdapterConfigError(
            f"block {block_index}: side size {side_size} / sqrt(P)={grid} is not an integer"
        )
    return AdapterSpec("conv_reshape", side_size // grid, target.width)


def build_adapter(spec: AdapterSpec, in_channels: int) -> nn.Module:
    if spec.kind == "identity":
        return IdentityAdapter()
    if spec.kind == "maxpool":
        return MaxPoolAdapter(spec.window)
    if spec.kind == "conv_reshape":
        return ConvReshapeAdapter(in_channels, spec.out_channels, spec.window)
    raise ValueError(f"unknown adapter kind {spec.kind!r}")


def adapt(side_output: Tensor, adapter: nn.Module, target_shape: Sequence[int]) -> Tensor:
    """Apply ``adapter`` and check the mask against the (batched) target shape."""
    mask = adapter(side_output)
    if tuple(mask.shape) != tuple(target_shape):
        raise MaskShapeError(f"adapter produced {tuple(mask.shape)}, target is {tuple(target_shape)}")
    return mask


@dataclass(frozen=True)
class SideStage:
    in_channels: int
    out_channels: int
    stride: int
    size: int
    adapter: AdapterSpec | None


def plan_side_branch(
    descriptors: Sequence[BlockDescriptor],
    input_size: int,
    enabled_blocks: Sequence[bool],
    side_widths: Sequence[int] | None = None,
) -> list[SideStage]:
    """Lay out side blocks up to the last enabled main block.

    A side block halves its input (stride 2 in the first conv) whenever the
    input is at least twice the spatial side of its target block; otherwise it
    keeps the size. Disabled blocks before the last enabled one still get a
    side block, because later side blocks consume its output, but no adapter.
    """
    if len(enabled_blocks) != len(descriptors):
        raise AdapterConfigError(
            f"enabled_blocks has {len(enabled_blocks)} entries, backbone has {len(descriptors)} blocks"
        )
    if side_widths is None:
        side_widths = [d.width for d in descriptors]
    if len(side_widths) != len(descriptors):
        raise AdapterConfigError(f"side_widths has {len(side_widths)} entries, backbone has {len(descriptors)} blocks")
    last = max((i for i, on in enumerate(enabled_blocks) if on), default=-1)
    stages = []
    in_ch, size = 3, input_size
    for i in range(last + 1):
        target = descriptors[i]
        stride = 2 if size >= 2 * target.grid else 1
        size = (size - 1) // stride + 1
        spec = plan_adapter(side_widths[i], size, target, i) if enabled_blocks[i] else None
        stages.append(SideStage(in_ch, side_widths[i], stride, size, spec))
        in_ch = side_widths[i]
    return stages


class G2BModel(nn.Module):
    """A backbone wrapped with a side branch that masks its block outputs.

    ``forced_mask_value`` replaces every enabled mask by a constant tensor; it
    exists for equivalence checks and is not part of the saved state.
    """

    def __init__(
        self,
        backbone: Backbone,
        enabled_blocks: Sequence[bool] | None = None,
        side_widths: Sequence[int] | None = None,
    ):
        super().__init__()
        if enabled_blocks is None:
            enabled_blocks = [True] * backbone.num_blocks
        self.backbone = backbone
        self.enabled_blocks = tuple(bool(b) for b in enabled_blocks)
        self.stages = plan_side_branch(backbone.descriptors, backbone.input_size, self.enabled_blocks, side_widths)
        self.side_blocks = nn.ModuleList(SideBlock(s.in_channels, s.out_channels, s.stride) for s in self.stages)
        self.adapters = nn.ModuleDict(
            {str(i): build_adapter(s.adapter, s.out_channels) for i, s in enumerate(self.stages) if s.adapter}
        )
        self.forced_mask_value: float | None = None

    @property
    def head(self):
        return self.backbone.head

    @property
    def descriptors(self):
        return self.backbone.descriptors

    @property
    def num_blocks(self) -> int:
        return self.backbone.num_blocks

    @property
    def input_size(self) -> int:
        return self.backbone.input_size

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    @property
    def spec(self):
        return self.backbone.spec

    @property
    def enabled_indices(self) -> list[int]:
        return [i for i, on in enumerate(self.enabled_blocks) if on]

    def compute_masks(self, x: Tensor) -> list[Tensor | None]:
        """One mask per main block (``None`` where the block is disabled)."""
        masks: list[Tensor | None] = [None] * self.num_blocks
        if self.forced_mask_value is not None:
            for i in self.enabled_indices:
                masks[i] = torch.full((x.shape[0], *self.descriptors[i].shape), self.forced_mask_value, dtype=x.dtype)
            return masks
        h = x
        for i, block in enumerate(self.side_blocks):
            h = block(h)
            if str(i) in self.adapters:
                masks[i] = adapt(h, self.adapters[str(i)], (x.shape[0], *self.descriptors[i].shape))
        return masks

    def forward_features(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        self.backbone._check_input(x)
        return self.backbone.forward_features(x, self.compute_masks(x))

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        features, outputs = self.forward_features(x)
        return self.head(features), outputs


def wrap_g2b(
    backbone: Backbone,
    enabled_blocks: Sequence[bool] | None = None,
    side_widths: Sequence[int] | None = None,
) -> G2BModel:
    return G2BModel(backbone, enabled_blocks, side_widths)

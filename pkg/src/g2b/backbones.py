"""Main-branch networks: a small residual CNN and a tiny vision transformer.

Both are organised as an ordered list of blocks. ``forward`` accepts an
optional list of per-block masks which are multiplied into the block outputs
before the next block consumes them. Without masks the networks are plain
classifiers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from g2b.modulation import modulate

__all__ = [
    "FEATURE_MAP",
    "TOKEN_MATRIX",
    "BlockDescriptor",
    "BackboneSpec",
    "IncrementalHead",
    "Backbone",
    "ResidualCNN",
    "TinyViT",
    "build_backbone",
    "expand_head",
    "param_count",
]

pylogger = logging.getLogger(__name__)

FEATURE_MAP = "feature_map"
TOKEN_MATRIX = "token_matrix"


@dataclass(frozen=True)
class BlockDescriptor:
    """Static shape of one main block's output (batch dimension excluded).

    For feature maps ``size`` is the spatial side H (= W); for token
    matrices it is the token count P, laid out on a sqrt(P) x sqrt(P) grid.
    """

    kind: str
    width: int
    size: int

    def __post_init__(self):
        if self.kind not in (FEATURE_MAP, TOKEN_MATRIX):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.width < 1 or self.size < 1:
            raise ValueError(f"block widths and sizes must be positive, got {self}")
        if self.kind == TOKEN_MATRIX and math.isqrt(self.size) ** 2 != self.size:
            raise ValueError(f"token count {self.size} is not a perfect square")

    @property
    def shape(self) -> tuple[int, ...]:
        if self.kind == FEATURE_MAP:
            return (self.width, self.size, self.size)
        return (self.width, self.size)

    @property
    def grid(self) -> int:
        """Spatial side of the block output (sqrt(P) for token matrices)."""
        return self.size if self.kind == FEATURE_MAP else math.isqrt(self.size)


@dataclass(frozen=True)
class BackboneSpec:
    kind: str  # "cnn" | "vit"
    input_size: int
    blocks: tuple[BlockDescriptor, ...] = field(default_factory=tuple)
    head_width: int = 0


class IncrementalHead(nn.Module):
    """Linear classifier whose output units can be appended over time.

    Expansion concatenates freshly initialised rows below the existing ones;
    the existing rows are copied untouched, so old-class logits do not move
    at the moment of expansion.
    """

    def __init__(self, in_features: int, n_classes: int = 0, generator: torch.Generator | None = None):
        super().__init__()
        self.in_features = in_features
        self.weight = nn.Parameter(torch.empty(0, in_features))
        self.bias = nn.Parameter(torch.empty(0))
        if n_classes:
            self.expand(n_classes, generator=generator)

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def expand(self, n_new: int, generator: torch.Generator | None = None) -> None:
        if n_new < 1:
            raise ValueError(f"n_new_classes must be >= 1, got {n_new}")
        # same scheme as nn.Linear's default init
        bound = 1.0 / math.sqrt(self.in_features)
        w = torch.empty(n_new, self.in_features, dtype=self.weight.dtype)
        b = torch.empty(n_new, dtype=self.bias.dtype)
        w.uniform_(-bound, bound, generator=generator)
        b.uniform_(-bound, bound, generator=generator)
        with torch.no_grad():
            self.weight = nn.Parameter(torch.cat([self.weight.detach(), w.to(self.weight.device)]))
            self.bias = nn.Parameter(torch.cat([self.bias.detach(), b.to(self.bias.device)]))

    def resize_(self, n_classes: int) -> None:
        """Reshape to ``n_classes`` rows ahead of ``load_state_dict``."""
        self.weight = nn.Parameter(torch.zeros(n_classes, self.in_features))
        self.bias = nn.Parameter(torch.zeros(n_classes))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def extra_repr(self) -> str:
        return f"in_features={self.in_features}, out_features={self.out_features}"


class Backbone(nn.Module):
    """Common surface of the main-branch networks.

    Subclasses fill ``self.descriptors`` and implement ``_stem``,
    ``_run_block`` and ``_pool``. Token-matrix blocks are exposed to masks
    and to callers as ``[B, D, P]``.
    """

    kind: str = ""

    def __init__(self, input_size: int, feature_dim: int):
        super().__init__()
        self.input_size = input_size
        self.feature_dim = feature_dim
        self.descriptors: tuple[BlockDescriptor, ...] = ()
        self.head = IncrementalHead(feature_dim)

    @property
    def num_blocks(self) -> int:
        return len(self.descriptors)

    @property
    def spec(self) -> BackboneSpec:
        return BackboneSpec(self.kind, self.input_size, self.descriptors, self.head.out_features)

    def _check_input(self, x: Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != self.input_size or x.shape[3] != self.input_size:
            raise ValueError(
                f"expected images of shape [B, 3, {self.input_size}, {self.input_size}], got {tuple(x.shape)}"
            )

    def forward_features(self, x: Tensor, masks: Sequence[Tensor | None] | None = None) -> tuple[Tensor, list[Tensor]]:
        """Pooled pre-head embedding plus the (possibly modulated) block outputs."""
        self._check_input(x)
        if masks is not None and len(masks) != self.num_blocks:
            raise ValueError(f"expected {self.num_blocks} mask slots, got {len(masks)}")
        h = self._stem(x)
        outputs = []
        for i in range(self.num_blocks):
            h = self._run_block(i, h)
            view = self._as_block_output(i, h)
            if masks is not None and masks[i] is not None:
                view = modulate(view, masks[i], block_index=i)
                h = self._from_block_output(i, view)
            outputs.append(view)
        return self._pool(h), outputs

    def forward(self, x: Tensor, masks: Sequence[Tensor | None] | None = None) -> tuple[Tensor, list[Tensor]]:
        features, outputs = self.forward_features(x, masks)
        return self.head(features), outputs

    def _as_block_output(self, i: int, h: Tensor) -> Tensor:
        return h

    def _from_block_output(self, i: int, view: Tensor) -> Tensor:
        return view

    def _stem(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def _run_block(self, i: int, h: Tensor) -> Tensor:
        raise NotImplementedError

    def _pool(self, h: Tensor) -> Tensor:
        raise NotImplementedError


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _conv_out(size: int, stride: int) -> int:
    # 3x3 conv, padding 1
    return (size - 1) // stride + 1


class ResidualCNN(Backbone):
    """Residual CNN with one basic block per stage.

    The default (widths 16/32/64/128, strides 1/2/2/2) maps a 32x32 input to
    block outputs of spatial size 32, 16, 8 and 4.
    """

    kind = "cnn"

    def __init__(
        self,
        widths: Sequence[int] = (16, 32, 64, 128),
        strides: Sequence[int] = (1, 2, 2, 2),
        input_size: int = 32,
        stem_pool: bool = False,
    ):
        if len(widths) != len(strides) or not widths:
            raise ValueError("widths and strides must be non-empty and of equal length")
        super().__init__(input_size, widths[-1])
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        self.stem_pool = nn.MaxPool2d(2, 2) if stem_pool else nn.Identity()
        size = input_size // 2 if stem_pool else input_size
        descriptors = []
        blocks = []
        in_ch = widths[0]
        for w, s in zip(widths, strides):
            blocks.append(BasicBlock(in_ch, w, s))
            size = _conv_out(size, s)
            if size < 1:
                raise ValueError(f"input size {input_size} too small for strides {tuple(strides)}")
            descriptors.append(BlockDescriptor(FEATURE_MAP, w, size))
            in_ch = w
        self.blocks = nn.ModuleList(blocks)
        self.descriptors = tuple(descriptors)

    def _stem(self, x):
        return self.stem_pool(self.stem(x))

    def _run_block(self, i, h):
        return self.blocks[i](h)

    def _pool(self, h):
        return F.adaptive_avg_pool2d(h, 1).flatten(1)


class TransformerBlock(nn.Module):
    """Pre-norm encoder block over ``[B, P, D]`` tokens."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"embedding width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def attention(self, x: Tensor) -> Tensor:
        b, p, d = x.shape
        qkv = self.qkv(x).reshape(b, p, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (d // self.num_heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, p, d))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TinyViT(Backbone):
    """Patch-embedding vision transformer with mean-pooled tokens.

    No class token is used, so every block carries exactly
    ``(input_size / patch_size) ** 2`` tokens.
    """

    kind = "vit"

    def __init__(
        self,
        embed_dim: int = 96,
        depth: int = 5,
        patch_size: int = 4,
        num_heads: int = 4,
        mlp_ratio: float = 2.0,
        input_size: int = 32,
    ):
        if input_size % patch_size:
            raise ValueError(f"patch size {patch_size} does not tile input size {input_size}")
        super().__init__(input_size, embed_dim)
        grid = input_size // patch_size
        self.patch_embed = nn.Conv2d(3, embed_dim, patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, grid * grid, embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(embed_dim, num_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim)
        self.descriptors = tuple(BlockDescriptor(TOKEN_MATRIX, embed_dim, grid * grid) for _ in range(depth))

    def _stem(self, x):
        # row-major patch order: patch (r, c) becomes token r * grid + c
        return self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed

    def _run_block(self, i, h):
        return self.blocks[i](h)

    def _as_block_output(self, i, h):
        return h.transpose(1, 2)

    def _from_block_output(self, i, view):
        return view.transpose(1, 2)

    def _pool(self, h):
        return self.norm(h).mean(dim=1)


def build_backbone(kind: str, input_size: int = 32, **kwargs) -> Backbone:
    if kind == "cnn":
        return ResidualCNN(input_size=input_size, **kwargs)
    if kind == "vit":
        return TinyViT(input_size=input_size, **kwargs)
    raise ValueError(f"unknown backbone kind {kind!r}; expected 'cnn' or 'vit'")


def expand_head(model: nn.Module, n_new_classes: int, generator: torch.Generator | None = None) -> nn.Module:
    """Append ``n_new_classes`` output units to the model's classifier."""
    if n_new_classes < 1:
        raise ValueError(f"n_new_classes must be >= 1, got {n_new_classes}")
    model.head.expand(n_new_classes, generator=generator)
    return model


def param_count(model: nn.Module) -> float:
    """Trainable parameters in millions."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad) / 1e6

"""Hierarchical four-stage transformer encoder over multi-band cubes.

Each stage merges overlapping 3x3x3 patches with a strided convolution,
then runs transformer blocks whose attention shortens the key/value
sequence by the stage's reduction ratio. Token order everywhere is the
row-major flattening of the (depth, height, width) grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from . import tensor as T
from .nn import Conv3d, LayerNorm, Linear, Module
from .rng import SplitMix64
from .tensor import Tensor

__all__ = [
    "StageConfig",
    "FeaturePyramid",
    "EfficientSelfAttention",
    "MixFFN",
    "TransformerBlock",
    "EncoderStage",
    "Encoder",
]

# Keep no-grad attention score blocks around 64 MB of float32.
_SCORE_BLOCK_ELEMENTS = 1 << 24


@dataclass(frozen=True)
class StageConfig:
    """Geometry and width of one encoder stage."""

    channels: int
    num_blocks: int
    num_heads: int
    reduction: int
    stride: tuple[int, int, int] = (2, 2, 2)
    kernel: tuple[int, int, int] = (3, 3, 3)
    padding: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if self.channels % self.num_heads:
            raise ValueError(
                f"channels {self.channels} not divisible by heads {self.num_heads}")
        if self.reduction < 1:
            raise ValueError(f"reduction must be a positive integer, got {self.reduction}")
        if self.num_blocks < 1:
            raise ValueError("each stage needs at least one block")

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads


@dataclass
class FeaturePyramid:
    """Per-stage feature grids F_1..F_4 with their (D,H,W) extents."""

    features: list[Tensor]
    extents: list[tuple[int, int, int]]

    def __post_init__(self):
        chans = [f.shape[1] for f in self.features]
        if any(c2 <= c1 for c1, c2 in zip(chans, chans[1:])):
            raise ValueError(f"stage channels must strictly increase, got {chans}")
        for e1, e2 in zip(self.extents, self.extents[1:]):
            if any(b > a for a, b in zip(e1, e2)):
                raise ValueError(f"stage extents must be non-increasing, got {self.extents}")


def tokens_to_grid(tokens: Tensor, extents: tuple[int, int, int]) -> Tensor:
    """(B, N, C) -> (B, C, D, H, W) for N = D*H*W."""
    b, n, c = tokens.shape
    d, h, w = extents
    if n != d * h * w:
        raise ValueError(f"token count {n} does not match extents {extents}")
    return T.transpose(tokens, (0, 2, 1)).reshape((b, c, d, h, w))


def grid_to_tokens(grid: Tensor) -> Tensor:
    """(B, C, D, H, W) -> (B, N, C), row-major over (D, H, W)."""
    b, c = grid.shape[:2]
    return T.transpose(grid.reshape((b, c, -1)), (0, 2, 1))


class EfficientSelfAttention(Module):
    """Multi-head attention with sequence-reduced keys and values.

    For reduction R > 1, groups of R consecutive tokens are folded into
    the channel axis and projected back to C, then layer-normalized; K/V
    run over the shortened sequence. R = 1 constructs no reduction
    parameters at all and is exactly full attention.
    """

    def __init__(self, channels: int, num_heads: int, reduction: int, rng: SplitMix64):
        if channels % num_heads:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        self.channels = channels
        self.num_heads = num_heads
        self.reduction = reduction
        self.q = Linear(channels, channels, rng)
        if reduction > 1:
            self.reduce = Linear(reduction * channels, channels, rng)
            self.reduce_norm = LayerNorm(channels)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng)

    def _reduced(self, x: Tensor) -> Tensor:
        """Shorten the sequence by the reduction ratio (zero-padding a ragged tail).

        A padded group always contains at least one real token (pad < R), so
        no key position is ever purely padding and no softmax mask is needed.
        """
        if self.reduction == 1:
            return x
        b, n, c = x.shape
        r = self.reduction
        pad = (-n) % r
        if pad:
            x = T.pad_axis(x, 1, 0, pad)
        grouped = x.reshape((b, (n + pad) // r, r * c))
        return self.reduce_norm(self.reduce(grouped))

    def kv_length(self, n: int) -> int:
        return -(-n // self.reduction)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return T.transpose(x.reshape((b, n, self.num_heads, -1)), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        scale = 1.0 / np.sqrt(self.channels // self.num_heads)
        q = self._split_heads(self.q(x))
        kv_src = self._reduced(x)
        k = self._split_heads(self.k(kv_src))
        v = self._split_heads(self.v(kv_src))
        m = k.shape[2]
        if not T.grad_enabled() and n * m > _SCORE_BLOCK_ELEMENTS:
            ctx_data = self._chunked_context(q.data, k.data, v.data, scale)
            ctx = Tensor(ctx_data)
        else:
            scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
            probs = F.softmax(scores, axis=-1)
            ctx = T.matmul(probs, v)
        merged = T.transpose(ctx, (0, 2, 1, 3)).reshape((b, n, c))
        return self.out(merged)

    @staticmethod
    def _chunked_context(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                         scale: float) -> np.ndarray:
        """Inference path bounding peak memory: query rows in blocks."""
        b, h, n, d = q.shape
        m = k.shape[2]
        kt = np.ascontiguousarray(k.swapaxes(-1, -2))
        out = np.empty_like(q)
        block = max(1, _SCORE_BLOCK_ELEMENTS // m)
        for start in range(0, n, block):
            stop = min(start + block, n)
            s = np.matmul(q[:, :, start:stop], kt)
            s *= scale
            s -= s.max(axis=-1, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=-1, keepdims=True)
            out[:, :, start:stop] = np.matmul(s, v)
        return out

    def attention_probs(self, x: Tensor) -> np.ndarray:
        """Dense (B, heads, N, M) softmax weights; diagnostic, small inputs only."""
        with T.no_grad():
            scale = 1.0 / np.sqrt(self.channels // self.num_heads)
            q = self._split_heads(self.q(x))
            kv_src = self._reduced(x)
            k = self._split_heads(self.k(kv_src))
            scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
            return F.softmax(scores, axis=-1).data


class MixFFN(Module):
    """Channel MLP, depthwise 3x3x3 convolution, GELU, channel MLP, residual."""

    def __init__(self, channels: int, expansion: int, rng: SplitMix64):
        hidden = channels * expansion
        self.channels = channels
        self.hidden = hidden
        self.fc1 = Linear(channels, hidden, rng)
        self.conv = Conv3d(hidden, hidden, 3, rng, stride=1, padding=1, groups=hidden)
        self.fc2 = Linear(hidden, channels, rng)

    def __call__(self, x: Tensor, extents: tuple[int, int, int]) -> Tensor:
        h = self.fc1(x)
        h = self.conv(tokens_to_grid(h, extents))
        h = F.gelu(grid_to_tokens(h))
        return self.fc2(h) + x


class TransformerBlock(Module):
    def __init__(self, channels: int, num_heads: int, reduction: int,
                 expansion: int, rng: SplitMix64):
        self.norm1 = LayerNorm(channels)
        self.attn = EfficientSelfAttention(channels, num_heads, reduction, rng)
        self.norm2 = LayerNorm(channels)
        self.ffn = MixFFN(channels, expansion, rng)

    def __call__(self, x: Tensor, extents: tuple[int, int, int]) -> Tensor:
        y = x + self.attn(self.norm1(x))
        return self.ffn(self.norm2(y), extents)


class EncoderStage(Module):
    """Overlapped patch merge, L transformer blocks, a final layer norm."""

    def __init__(self, c_in: int, cfg: StageConfig, expansion: int, rng: SplitMix64):
        self.cfg = cfg
        self.merge = Conv3d(c_in, cfg.channels, cfg.kernel, rng,
                            stride=cfg.stride, padding=cfg.padding)
        self.merge_norm = LayerNorm(cfg.channels)
        self.blocks = [
            TransformerBlock(cfg.channels, cfg.num_heads, cfg.reduction, expansion, rng)
            for _ in range(cfg.num_blocks)
        ]
        self.final_norm = LayerNorm(cfg.channels)

    def __call__(self, grid: Tensor) -> tuple[Tensor, tuple[int, int, int]]:
        merged = self.merge(grid)
        extents = merged.shape[2:]
        tokens = self.merge_norm(grid_to_tokens(merged))
        for block in self.blocks:
            tokens = block(tokens, extents)
        tokens = self.final_norm(tokens)
        return tokens_to_grid(tokens, extents), extents


def overlapped_patch_merge(x: Tensor, merge: Conv3d, norm: LayerNorm) -> Tensor:
    """Strided convolution plus layer norm over flattened token channels."""
    grid = merge(x)
    extents = grid.shape[2:]
    return tokens_to_grid(norm(grid_to_tokens(grid)), extents)


class Encoder(Module):
    """Four stages over a single-channel cube, yielding F_1..F_4."""

    def __init__(self, stages: Sequence[StageConfig], expansion: int, rng: SplitMix64):
        if len(stages) != 4:
            raise ValueError(f"encoder expects 4 stage configs, got {len(stages)}")
        widths = [s.channels for s in stages]
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ValueError(f"stage channels must strictly increase, got {widths}")
        self.stages = [
            EncoderStage(1 if i == 0 else stages[i - 1].channels, stages[i], expansion, rng)
            for i in range(4)
        ]

    def __call__(self, x: Tensor) -> FeaturePyramid:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"encoder input must be (B, 1, D, H, W), got {x.shape}")
        features: list[Tensor] = []
        extents: list[tuple[int, int, int]] = []
        grid = x
        for stage in self.stages:
            grid, ext = stage(grid)
            features.append(grid)
            extents.append(ext)
        return FeaturePyramid(features, extents)

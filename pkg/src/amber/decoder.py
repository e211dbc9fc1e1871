"""All-MLP decoder: unify, upsample+concat, fuse, collapse depth, classify.

Channel maps run as (C_out, C_in) matmuls against (B, C_in, voxels) views
rather than channels-last linears; at full scene widths the transpose
copies a channels-last layout would need are the difference between
fitting in memory and not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .nn import Conv2d, LayerNorm, Module
from .rng import SplitMix64
from .tensor import Tensor

__all__ = ["DecoderConfig", "ChannelMap", "Funnelizer", "Decoder"]


@dataclass(frozen=True)
class DecoderConfig:
    unified_channels: int
    n_classes: int
    funnel_depth: int

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if self.unified_channels < 1:
            raise ValueError("unified_channels must be >= 1")
        if self.funnel_depth < 1:
            raise ValueError("funnel_depth must be >= 1")


class ChannelMap(Module):
    """Pointwise affine map over the channel axis of (B, C, ...) grids."""

    def __init__(self, c_in: int, c_out: int, rng: SplitMix64):
        self.c_in = c_in
        self.c_out = c_out
        limit = 1.0 / np.sqrt(c_in)
        self.weight = Tensor(rng.uniform_array((c_out, c_in), -limit, limit).astype(np.float32),
                             requires_grad=True)
        self.bias = Tensor(np.zeros((c_out, 1), dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape
        flat = x.reshape((lead[0], self.c_in, -1))
        out = T.matmul(self.weight, flat) + self.bias
        return out.reshape((lead[0], self.c_out) + lead[2:])


class Funnelizer(Module):
    """(D,1,1) convolution collapsing the spectral axis to a 2D grid.

    The kernel depth is fixed at construction; feeding a grid with a
    different spectral extent is an error, matching the one-cube-geometry
    scope of a trained model.
    """

    def __init__(self, channels: int, depth: int, rng: SplitMix64):
        self.channels = channels
        self.depth = depth
        fan_in = channels * depth
        limit = 1.0 / np.sqrt(fan_in)
        self.weight = Tensor(rng.uniform_array((channels, channels, depth),
                                               -limit, limit).astype(np.float32),
                             requires_grad=True)
        self.bias = Tensor(np.zeros((channels, 1), dtype=np.float32), requires_grad=True)

    def __call__(self, fused: Tensor) -> Tensor:
        b, c, d, h, w = fused.shape
        if c != self.channels or d != self.depth:
            raise ValueError(
                f"funnel built for {self.channels} channels x depth {self.depth}, "
                f"got grid with {c} x {d}")
        flat = fused.reshape((b, c * d, h * w))
        wmat = self.weight.reshape((self.channels, c * d))
        out = T.matmul(wmat, flat) + self.bias
        return out.reshape((b, self.channels, h, w))


class Decoder(Module):
    """Fuses the feature pyramid into per-pixel class logits."""

    def __init__(self, stage_channels: list[int], cfg: DecoderConfig, rng: SplitMix64):
        c_dec = cfg.unified_channels
        self.cfg = cfg
        self.unify = [ChannelMap(c, c_dec, rng) for c in stage_channels]
        self.fuse_map = ChannelMap(4 * c_dec, c_dec, rng)
        self.fuse_norm = LayerNorm(c_dec)
        self.funnel = Funnelizer(c_dec, cfg.funnel_depth, rng)
        self.classifier = Conv2d(c_dec, cfg.n_classes, 1, rng)

    def unify_channels(self, features: list[Tensor]) -> list[Tensor]:
        return [m(f) for m, f in zip(self.unify, features)]

    @staticmethod
    def upsample_concat(unified: list[Tensor]) -> Tensor:
        target = unified[0].shape[2:]
        lifted = [u if u.shape[2:] == target else F.upsample_trilinear(u, target)
                  for u in unified]
        return T.concat(lifted, axis=1)

    def fuse(self, stacked: Tensor, normalize: bool = True) -> Tensor:
        """Pointwise 4C -> C map, GELU, then layer norm over channels.

        ``normalize=False`` exposes the pre-normalization path (the norm
        maps a zero grid away from zero, hiding the affine behavior).
        """
        out = F.gelu(self.fuse_map(stacked))
        if not normalize:
            return out
        b, c = out.shape[:2]
        tokens = T.transpose(out.reshape((b, c, -1)), (0, 2, 1))
        tokens = self.fuse_norm(tokens)
        return T.transpose(tokens, (0, 2, 1)).reshape(out.shape)

    def classify(self, x2d: Tensor, hw: tuple[int, int]) -> Tensor:
        logits = self.classifier(x2d)
        if logits.shape[2:] != tuple(hw):
            logits = F.upsample_bilinear(logits, hw)
        return logits

    def __call__(self, features: list[Tensor], crop_hw: tuple[int, int]) -> Tensor:
        stacked = self.upsample_concat(self.unify_channels(features))
        fused = self.fuse(stacked)
        return self.classify(self.funnel(fused), crop_hw)

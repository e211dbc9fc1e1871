"""Full segmentation model: encoder stages plus the All-MLP decoder head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import Decoder, DecoderConfig
from .encoder import Encoder, StageConfig
from .nn import ConvSpec, Module
from .rng import SplitMix64
from .tensor import Tensor

__all__ = ["ModelConfig", "AmberModel", "STRIDE_SCHEDULES"]

# Stage strides per schedule. "preserving" keeps stage 1 at input
# resolution; "classic" halves every stage like the original four-level
# pyramid at {1/2, 1/4, 1/8, 1/16}.
STRIDE_SCHEDULES: dict[str, tuple[int, int, int, int]] = {
    "preserving": (1, 2, 2, 2),
    "classic": (2, 2, 2, 2),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults are the smallest sensible full model."""

    channels: tuple[int, int, int, int] = (32, 64, 160, 256)
    blocks: tuple[int, int, int, int] = (2, 2, 2, 2)
    heads: tuple[int, int, int, int] = (1, 2, 5, 8)
    reductions: tuple[int, int, int, int] = (64, 16, 4, 1)
    expansion: int = 4
    decoder_channels: int = 256
    n_classes: int = 2
    schedule: str = "preserving"

    def __post_init__(self):
        for name in ("channels", "blocks", "heads", "reductions"):
            v = getattr(self, name)
            if len(v) != 4:
                raise ValueError(f"{name} must list 4 stages, got {v}")
        if self.schedule not in STRIDE_SCHEDULES:
            raise ValueError(
                f"unknown schedule {self.schedule!r}; options: {sorted(STRIDE_SCHEDULES)}")
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")

    def stage_configs(self) -> list[StageConfig]:
        strides = STRIDE_SCHEDULES[self.schedule]
        return [
            StageConfig(
                channels=self.channels[i],
                num_blocks=self.blocks[i],
                num_heads=self.heads[i],
                reduction=self.reductions[i],
                stride=(strides[i],) * 3,
            )
            for i in range(4)
        ]


def stage_extents(cfg: ModelConfig, cube_extents: tuple[int, int, int]
                  ) -> list[tuple[int, int, int]]:
    """Grid extents after each stage for a given (D, H, W) input."""
    out = []
    ext = cube_extents
    for s in cfg.stage_configs():
        spec = ConvSpec(s.kernel, s.stride, s.padding, 1, s.channels)
        ext = spec.out_extents(ext)
        out.append(ext)
    return out


class AmberModel(Module):
    """Single-channel cube in, per-pixel class logits out.

    The funnel kernel depth is bound to ``bands`` at construction, so a
    model instance serves exactly one cube geometry.
    """

    def __init__(self, config: ModelConfig, bands: int, seed: int):
        self.config = config
        self.bands = bands
        self.seed = seed
        rng = SplitMix64(seed)
        stages = config.stage_configs()
        first = stages[0]
        spec = ConvSpec(first.kernel, first.stride, first.padding, 1, first.channels)
        funnel_depth = spec.out_extents((bands, 32, 32))[0]
        self.encoder = Encoder(stages, config.expansion, rng)
        self.decoder = Decoder(
            list(config.channels),
            DecoderConfig(config.decoder_channels, config.n_classes, funnel_depth),
            rng,
        )

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, D, H, W) input, got {x.shape}")
        if x.shape[2] != self.bands:
            raise ValueError(f"model built for {self.bands} bands, input has {x.shape[2]}")
        pyramid = self.encoder(x)
        return self.decoder(pyramid.features, x.shape[3:])

    def predict_logits(self, crops: np.ndarray) -> np.ndarray:
        """Forward a (B, D, H, W) float batch without recording gradients."""
        from .tensor import no_grad

        with no_grad():
            x = Tensor(np.ascontiguousarray(crops[:, None]).astype(np.float32, copy=False))
            return self(x).data

"""Optimization loop, checkpoint format, and whole-image tiled prediction.

Seed discipline: a run's master seed s initializes the weights (stream s),
epoch shuffling (stream s+1), and flip augmentation (stream s+2). The
three streams never interleave, so changing the epoch count does not
perturb the weights, and re-running a configuration reproduces every
batch, flip, and update bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import (CROP, MARGIN, HyperCube, LabelMap, PatchSet, band_stats,
                   extract_crop, random_flip, standardize)
from .functional import masked_cross_entropy
from .model import AmberModel, ModelConfig
from .rng import SplitMix64
from .tensor import ComputationTape, Tensor, backward

__all__ = [
    "TrainConfig",
    "SGD",
    "sgd_step",
    "train",
    "Checkpoint",
    "tiled_predict",
    "predict_full",
    "predict_at_centers",
]

MANIFEST_NAME = "model.manifest.json"
PARAMS_NAME = "model.params.raw"
LOSS_CSV_NAME = "loss_history.csv"
_CKPT_FORMAT = "amber-checkpoint-v1"


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    batch_size: int
    epochs: int
    learning_rate: float = 0.01
    momentum: float = 0.0
    seed: int = 0
    crop_size: int = CROP

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop_size != CROP:
            raise ValueError(f"crop size is fixed at {CROP}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


class SGD:
    """Plain stochastic gradient descent; momentum optional, default off."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity: Optional[list[np.ndarray]] = None
        if momentum:
            self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if self._velocity is None:
                p.data -= self.lr * p.grad
            else:
                v = self._velocity[i]
                v *= self.momentum
                v += p.grad
                p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """One momentum-free update: p <- p - lr * p.grad (grad-less params skipped)."""
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


# --- checkpoint -------------------------------------------------------------

@dataclass
class Checkpoint:
    """Everything needed to rebuild a trained model and normalize its input."""

    config: dict
    bands: int
    state: dict[str, np.ndarray]
    band_mean: np.ndarray
    band_std: np.ndarray
    history: dict

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        index = []
        offset = 0
        blobs = []
        for name in sorted(self.state):
            arr = np.ascontiguousarray(self.state[name], dtype="<f4")
            blob = arr.tobytes()
            index.append({
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "size": len(blob),
            })
            blobs.append(blob)
            offset += len(blob)
        manifest = {
            "format": _CKPT_FORMAT,
            "config": self.config,
            "bands": self.bands,
            "normalization": {
                "mean": [float(v) for v in self.band_mean],
                "std": [float(v) for v in self.band_std],
            },
            "parameters": index,
            "history": self.history,
        }
        with open(os.path.join(out_dir, PARAMS_NAME), "wb") as f:
            f.write(b"".join(blobs))
        with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=1)
            f.write("\n")
        losses = self.history.get("epoch_loss", [])
        with open(os.path.join(out_dir, LOSS_CSV_NAME), "w", encoding="utf-8") as f:
            f.write("epoch,mean_loss\n")
            for i, v in enumerate(losses, start=1):
                f.write(f"{i},{v!r}\n")

    @classmethod
    def load(cls, ckpt_dir: str) -> "Checkpoint":
        with open(os.path.join(ckpt_dir, MANIFEST_NAME), "r", encoding="utf-8") as f:
            manifest = json.load(f)
        if manifest.get("format") != _CKPT_FORMAT:
            raise ValueError(f"unrecognized checkpoint format {manifest.get('format')!r}")
        with open(os.path.join(ckpt_dir, PARAMS_NAME), "rb") as f:
            payload = f.read()
        total = sum(e["size"] for e in manifest["parameters"])
        if total != len(payload):
            raise ValueError(
                f"parameter payload is {len(payload)} bytes, index declares {total}")
        state = {}
        for entry in manifest["parameters"]:
            start = entry["offset"]
            raw = payload[start:start + entry["size"]]
            state[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        norm = manifest["normalization"]
        return cls(
            config=manifest["config"],
            bands=int(manifest["bands"]),
            state=state,
            band_mean=np.array(norm["mean"], dtype=np.float32),
            band_std=np.array(norm["std"], dtype=np.float32),
            history=manifest.get("history", {}),
        )

    def build_model(self) -> AmberModel:
        mc = self.config["model"]
        model_cfg = ModelConfig(
            channels=tuple(mc["channels"]),
            blocks=tuple(mc["blocks"]),
            heads=tuple(mc["heads"]),
            reductions=tuple(mc["reductions"]),
            expansion=int(mc["expansion"]),
            decoder_channels=int(mc["decoder_channels"]),
            n_classes=int(mc["n_classes"]),
            schedule=mc["schedule"],
        )
        model = AmberModel(model_cfg, self.bands, seed=int(self.config.get("seed", 0)))
        model.load_state_arrays(self.state)
        return model


def _model_config_dict(cfg: ModelConfig) -> dict:
    return {
        "channels": list(cfg.channels),
        "blocks": list(cfg.blocks),
        "heads": list(cfg.heads),
        "reductions": list(cfg.reductions),
        "expansion": cfg.expansion,
        "decoder_channels": cfg.decoder_channels,
        "n_classes": cfg.n_classes,
        "schedule": cfg.schedule,
    }


# --- training loop ----------------------------------------------------------

def _assemble_batch(cube: HyperCube, labels: LabelMap,
                    centers: Sequence[tuple[int, int]],
                    mean: np.ndarray, std: np.ndarray,
                    flip_rng: Optional[SplitMix64]) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for center in centers:
        crop, tile = extract_crop(cube, labels, center)
        crop = standardize(crop, mean, std)
        if flip_rng is not None:
            crop, tile = random_flip(crop, tile, flip_rng)
        xs.append(crop)
        ys.append(tile)
    return np.stack(xs), np.stack(ys).astype(np.int64)


def train(cfg: TrainConfig, cube: HyperCube, labels: LabelMap, patches: PatchSet,
          log: Optional[Callable[[str], None]] = None) -> Checkpoint:
    """Fit a fresh model on the train split; returns the finished checkpoint.

    Epochs iterate shuffled train centers in batches (last partial batch
    kept), flip-augmented, standardized with train-crop band statistics.
    The per-epoch mean of batch losses lands in the checkpoint history.
    """
    train_centers = patches.subset("train")
    if not train_centers:
        raise ValueError("patch set has no train patches; split it first")
    if labels.n_classes() > cfg.model.n_classes:
        raise ValueError(
            f"label map holds classes up to {labels.n_classes()}, "
            f"model is configured for {cfg.model.n_classes}")

    mean, std = band_stats(cube, train_centers)
    model = AmberModel(cfg.model, cube.bands, seed=cfg.seed)
    opt = SGD(model.parameters(), cfg.learning_rate, cfg.momentum)
    shuffle_rng = SplitMix64(cfg.seed + 1)
    flip_rng = SplitMix64(cfg.seed + 2)

    epoch_loss: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        order = list(train_centers)
        shuffle_rng.shuffle(order)
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            x, y = _assemble_batch(cube, labels, chunk, mean, std, flip_rng)
            with ComputationTape():
                logits = model(Tensor(x))
                loss = masked_cross_entropy(logits, y)
                backward(loss)
            opt.step()
            opt.zero_grad()
            batch_losses.append(loss.item())
        mean_loss = float(np.mean(batch_losses))
        epoch_loss.append(mean_loss)
        if log is not None:
            log(f"epoch {epoch}/{cfg.epochs}: mean loss {mean_loss:.6f}")
        if not np.isfinite(mean_loss):
            raise FloatingPointError(f"training diverged at epoch {epoch}")

    config_echo = {
        "model": _model_config_dict(cfg.model),
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "momentum": cfg.momentum,
        "seed": cfg.seed,
        "crop_size": cfg.crop_size,
    }
    return Checkpoint(
        config=config_echo,
        bands=cube.bands,
        state={k: v.copy() for k, v in model.state_arrays().items()},
        band_mean=mean,
        band_std=std,
        history={"epoch_loss": epoch_loss},
    )


# --- inference --------------------------------------------------------------

def predict_at_centers(model: AmberModel, cube: HyperCube,
                       centers: Sequence[tuple[int, int]],
                       mean: np.ndarray, std: np.ndarray,
                       batch_size: int = 8) -> np.ndarray:
    """Predicted class (1-based) at each crop's central pixel."""
    dummy = LabelMap(np.zeros((cube.height, cube.width), dtype=np.uint16))
    preds = np.empty(len(centers), dtype=np.int64)
    for start in range(0, len(centers), batch_size):
        chunk = centers[start:start + batch_size]
        xs = [standardize(extract_crop(cube, dummy, c)[0], mean, std) for c in chunk]
        logits = model.predict_logits(np.stack(xs)[:, 0])
        center_logits = logits[:, :, MARGIN, MARGIN]
        preds[start:start + len(chunk)] = np.argmax(center_logits, axis=1) + 1
    return preds


def tiled_predict(model: AmberModel, cube: HyperCube,
                  mean: np.ndarray, std: np.ndarray,
                  tile_batch: int = 4) -> LabelMap:
    """Classify every pixel: non-overlapping 32x32 tiles, edges reflected.

    Needs H, W >= 17 so the reflection pad stays shorter than the image.
    Argmax ties resolve to the lowest class index; labels are 1-based, so
    the output never contains the undefined value 0.
    """
    h, w = cube.height, cube.width
    pad_h = (-h) % CROP
    pad_w = (-w) % CROP
    if pad_h >= h or pad_w >= w:
        raise ValueError(f"image {h}x{w} too small to reflect-pad to a multiple of {CROP}")
    values = standardize(cube.values, mean, std)
    if pad_h or pad_w:
        values = np.pad(values, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    hp, wp = values.shape[1:]
    out = np.zeros((hp, wp), dtype=np.uint16)
    tiles = [(i, j) for i in range(0, hp, CROP) for j in range(0, wp, CROP)]
    for start in range(0, len(tiles), tile_batch):
        chunk = tiles[start:start + tile_batch]
        batch = np.stack([values[:, i:i + CROP, j:j + CROP] for i, j in chunk])
        logits = model.predict_logits(batch)
        pred = (np.argmax(logits, axis=1) + 1).astype(np.uint16)
        for t, (i, j) in enumerate(chunk):
            out[i:i + CROP, j:j + CROP] = pred[t]
    return LabelMap(out[:h, :w])


def predict_full(ckpt: Checkpoint, cube: HyperCube, tile_batch: int = 4) -> LabelMap:
    """Rebuild the checkpointed model and classify the whole cube."""
    if cube.bands != ckpt.bands:
        raise ValueError(f"checkpoint expects {ckpt.bands} bands, cube has {cube.bands}")
    model = ckpt.build_model()
    return tiled_predict(model, cube, ckpt.band_mean, ckpt.band_std, tile_batch)

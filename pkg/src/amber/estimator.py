"""Estimator facade: fit on one labeled cube, predict dense label maps.

Wraps the patch pipeline, training loop, and tiled inference behind the
familiar fit/predict/score surface so the model slots into scripts that
expect that shape. X is a (bands, H, W) cube; y is an (H, W) integer map
with 0 for unlabeled pixels.
"""

from __future__ import annotations


import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import HyperCube, LabelMap, sample_patches, split_patches
from .model import ModelConfig
from .training import TrainConfig, tiled_predict, train

__all__ = ["AmberSegmenter", "validate_cube", "validate_labels"]


def validate_cube(X) -> np.ndarray:
    """Accept a finite (bands, H, W) float array."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"X must be (bands, height, width), got shape {arr.shape}")
    if arr.shape[1] < 32 or arr.shape[2] < 32:
        raise ValueError(f"X spatial extents {arr.shape[1:]} are below one 32x32 crop")
    if not np.all(np.isfinite(arr)):
        raise ValueError("X contains non-finite values")
    return arr


def validate_labels(y, spatial: tuple[int, int]) -> np.ndarray:
    """Accept an (H, W) integer map matching the cube, 0 = unlabeled."""
    arr = np.asarray(y)
    if arr.ndim != 2:
        raise ValueError(f"y must be (height, width), got shape {arr.shape}")
    if arr.shape != spatial:
        raise ValueError(f"y extents {arr.shape} do not match X extents {spatial}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"y must be integer-typed, got {arr.dtype}")
    if arr.min() < 0:
        raise ValueError("y must be non-negative (0 marks unlabeled pixels)")
    if (arr != 0).sum() == 0:
        raise ValueError("y has no labeled pixels")
    return arr.astype(np.uint16)


class AmberSegmenter(BaseEstimator):
    """Hierarchical-transformer segmenter for multi-band images.

    fit(X, y) samples labeled 32x32 crops from the cube, trains from
    scratch, and keeps the checkpoint; predict(X) tiles a cube of the
    same band count into a dense (H, W) class map. score(X, y) is
    overall accuracy over labeled pixels, in [0, 1].
    """

    def __init__(self, channels=(32, 64, 160, 256), blocks=(2, 2, 2, 2),
                 heads=(1, 2, 5, 8), reductions=(64, 16, 4, 1), expansion=4,
                 decoder_channels=256, schedule="preserving", n_patches=400,
                 train_fraction=0.2, batch_size=8, epochs=20,
                 learning_rate=0.01, momentum=0.0, seed=0):
        self.channels = channels
        self.blocks = blocks
        self.heads = heads
        self.reductions = reductions
        self.expansion = expansion
        self.decoder_channels = decoder_channels
        self.schedule = schedule
        self.n_patches = n_patches
        self.train_fraction = train_fraction
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed

    def _model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(
            channels=tuple(self.channels), blocks=tuple(self.blocks),
            heads=tuple(self.heads), reductions=tuple(self.reductions),
            expansion=self.expansion, decoder_channels=self.decoder_channels,
            n_classes=n_classes, schedule=self.schedule)

    def fit(self, X, y) -> "AmberSegmenter":
        cube_arr = validate_cube(X)
        label_arr = validate_labels(y, cube_arr.shape[1:])
        cube = HyperCube(cube_arr)
        labels = LabelMap(label_arr)

        self.classes_ = np.unique(label_arr[label_arr != 0]).astype(np.int64)
        n_classes = int(label_arr.max())
        cfg = TrainConfig(
            model=self._model_config(n_classes),
            batch_size=self.batch_size, epochs=self.epochs,
            learning_rate=self.learning_rate, momentum=self.momentum,
            seed=self.seed)

        ps = sample_patches(labels, self.n_patches, self.seed)
        ps = split_patches(ps, self.train_fraction, self.seed + 1)
        self.patches_ = ps
        self.checkpoint_ = train(cfg, cube, labels, ps)
        self.model_ = self.checkpoint_.build_model()
        self.n_bands_ = cube.bands
        self.loss_history_ = list(self.checkpoint_.history["epoch_loss"])
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this AmberSegmenter instance is not fitted yet; call fit first")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        cube_arr = validate_cube(X)
        if cube_arr.shape[0] != self.n_bands_:
            raise ValueError(
                f"X has {cube_arr.shape[0]} bands, the fitted model expects {self.n_bands_}")
        pred = tiled_predict(self.model_, HyperCube(cube_arr),
                             self.checkpoint_.band_mean, self.checkpoint_.band_std)
        return pred.labels.astype(np.int64)

    def score(self, X, y) -> float:
        """Overall accuracy over labeled pixels, in [0, 1]."""
        self._check_fitted()
        pred = self.predict(X)
        truth = np.asarray(y)
        mask = truth != 0
        if not mask.any():
            raise ValueError("y has no labeled pixels to score against")
        return float((pred[mask] == truth[mask]).mean())

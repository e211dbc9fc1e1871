"""Confusion-matrix metrics and the Monte Carlo cross-validation harness.

Classes are 1-based everywhere; pixels whose ground truth is 0 never
enter a confusion matrix. Accuracies are percentages, kappa is a bare
coefficient in [-1, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import HyperCube, LabelMap, overlap_fraction, sample_patches, split_patches
from .rng import SplitMix64
from .training import TrainConfig, predict_at_centers, tiled_predict, train

__all__ = [
    "ConfusionMatrix",
    "confusion",
    "confusion_from_pairs",
    "overall_accuracy",
    "kappa",
    "average_accuracy",
    "per_class_accuracy",
    "metric_summary",
    "CvReport",
    "monte_carlo_cv",
    "format_cv_table",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[i][j] = pixels of true class i+1 predicted as class j+1."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_from_pairs(truth: np.ndarray, pred: np.ndarray, n_classes: int
                         ) -> ConfusionMatrix:
    """Count (truth, pred) pairs, ignoring pairs whose truth is 0."""
    truth = np.asarray(truth, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: truth {truth.shape}, pred {pred.shape}")
    keep = truth != 0
    truth, pred = truth[keep], pred[keep]
    if truth.size and (truth.max() > n_classes or pred.max() > n_classes or pred.min() < 1):
        raise ValueError(
            f"labels out of range for {n_classes} classes "
            f"(truth up to {truth.max() if truth.size else 0}, "
            f"pred range [{pred.min() if pred.size else 0}, {pred.max() if pred.size else 0}])")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truth - 1, pred - 1), 1)
    return ConfusionMatrix(counts)


def confusion(pred: LabelMap, truth: LabelMap, n_classes: int) -> ConfusionMatrix:
    if pred.labels.shape != truth.labels.shape:
        raise ValueError(
            f"extent mismatch: pred {pred.labels.shape}, truth {truth.labels.shape}")
    return confusion_from_pairs(truth.labels, pred.labels, n_classes)


def overall_accuracy(m: ConfusionMatrix) -> float:
    """Percent of counted pixels on the diagonal."""
    n = m.total
    if n == 0:
        raise ValueError("empty confusion matrix: no defined pixels were counted")
    return 100.0 * float(np.trace(m.counts)) / n


def kappa(m: ConfusionMatrix) -> float:
    """Chance-corrected agreement from the marginal products.

    Degenerate marginals (single-class data, where expected agreement is
    already 1) yield 0 with a warning rather than 0/0.
    """
    n = m.total
    if n == 0:
        raise ValueError("empty confusion matrix: no defined pixels were counted")
    counts = m.counts
    diag = int(np.trace(counts))
    marg = int(np.sum(counts.sum(axis=1) * counts.sum(axis=0), dtype=np.int64))
    denom = n * n - marg
    if denom == 0:
        warnings.warn("kappa is undefined for single-class data; reporting 0")
        return 0.0
    return (n * diag - marg) / denom


def average_accuracy(m: ConfusionMatrix) -> float:
    """Mean per-class recall in percent, skipping classes with no pixels."""
    accs = [a for a in per_class_accuracy(m) if a is not None]
    if not accs:
        raise ValueError("empty confusion matrix: no class has any counted pixel")
    return float(np.mean(accs))


def per_class_accuracy(m: ConfusionMatrix) -> list[Optional[float]]:
    """100*M_ii/row_i per class; None marks classes absent from the truth."""
    rows = m.counts.sum(axis=1)
    return [
        100.0 * float(m.counts[i, i]) / int(rows[i]) if rows[i] > 0 else None
        for i in range(m.n_classes)
    ]


def metric_summary(m: ConfusionMatrix) -> dict:
    return {
        "oa": overall_accuracy(m),
        "kappa": kappa(m),
        "aa": average_accuracy(m),
        "per_class": per_class_accuracy(m),
        "n_pixels": m.total,
    }


# --- Monte Carlo cross-validation -------------------------------------------

@dataclass
class CvReport:
    """Per-fold metrics plus mean/std aggregates for both evaluation units.

    "center" scores the central pixel of each test patch; "full" scores
    every defined pixel of the whole image under tiled prediction.
    """

    folds: int
    seed: int
    n_patches: int
    train_fraction: float
    per_fold: list[dict]
    summary: dict

    def to_json(self) -> dict:
        return {
            "folds": self.folds,
            "seed": self.seed,
            "n_patches": self.n_patches,
            "train_fraction": self.train_fraction,
            "per_fold": self.per_fold,
            "summary": self.summary,
        }


def _mean_std(values: Sequence[float]) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    mean = float(np.mean(vals))
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return {"mean": mean, "std": std, "n": len(vals)}


def _aggregate(fold_metrics: list[dict], n_classes: int) -> dict:
    out = {}
    for key in ("oa", "kappa", "aa"):
        out[key] = _mean_std([fm[key] for fm in fold_metrics])
    out["per_class"] = [
        _mean_std([fm["per_class"][k] for fm in fold_metrics])
        for k in range(n_classes)
    ]
    return out


def monte_carlo_cv(cfg: TrainConfig, cube: HyperCube, labels: LabelMap,
                   n_patches: int, train_fraction: float, folds: int = 5,
                   log: Optional[Callable[[str], None]] = None) -> CvReport:
    """Repeated random resampling: each fold samples, splits, and trains anew.

    Fold f samples with seed master+f; the split and training seeds are
    the first two outputs of a SplitMix64 stream keyed by that fold seed,
    so folds never share weight init, shuffling, or augmentation streams.
    """
    if folds < 1:
        raise ValueError("folds must be >= 1")
    n_classes = cfg.model.n_classes
    per_fold = []
    for fold in range(folds):
        fold_seed = cfg.seed + fold
        derive = SplitMix64(fold_seed)
        split_seed = derive.next_u64()
        train_seed = derive.next_u64()

        ps = sample_patches(labels, n_patches, fold_seed)
        ps = split_patches(ps, train_fraction, split_seed)
        if log is not None:
            log(f"fold {fold + 1}/{folds}: {len(ps.subset('train'))} train / "
                f"{len(ps.subset('test'))} test patches, "
                f"window overlap {overlap_fraction(ps):.1%}")

        fold_cfg = TrainConfig(
            model=cfg.model, batch_size=cfg.batch_size, epochs=cfg.epochs,
            learning_rate=cfg.learning_rate, momentum=cfg.momentum,
            seed=train_seed, crop_size=cfg.crop_size)
        ckpt = train(fold_cfg, cube, labels, ps, log=log)
        model = ckpt.build_model()

        test_centers = ps.subset("test")
        preds = predict_at_centers(model, cube, test_centers,
                                   ckpt.band_mean, ckpt.band_std)
        truth = np.array([labels.labels[r, c] for r, c in test_centers], dtype=np.int64)
        center_m = confusion_from_pairs(truth, preds, n_classes)

        full_pred = tiled_predict(model, cube, ckpt.band_mean, ckpt.band_std)
        full_m = confusion(full_pred, labels, n_classes)

        entry = {
            "fold": fold,
            "sample_seed": fold_seed,
            "center": metric_summary(center_m),
            "full": metric_summary(full_m),
            "final_loss": ckpt.history["epoch_loss"][-1],
        }
        per_fold.append(entry)
        if log is not None:
            log(f"fold {fold + 1}/{folds}: center OA {entry['center']['oa']:.2f}%, "
                f"full OA {entry['full']['oa']:.2f}%")

    summary = {
        "center": _aggregate([f["center"] for f in per_fold], n_classes),
        "full": _aggregate([f["full"] for f in per_fold], n_classes),
    }
    return CvReport(
        folds=folds, seed=cfg.seed, n_patches=n_patches,
        train_fraction=train_fraction, per_fold=per_fold, summary=summary)


def _fmt_cell(stats: dict) -> str:
    if stats["mean"] is None:
        return "absent"
    return f"{stats['mean']:.2f} +- {stats['std']:.3f}"


def format_cv_table(report: CvReport) -> str:
    """Aligned text table: per-class rows, then OA, kappa x 100, AA."""
    center = report.summary["center"]
    full = report.summary["full"]
    rows = [("class", "test centers", "full image")]
    n_classes = len(center["per_class"])
    for k in range(n_classes):
        rows.append((str(k + 1),
                     _fmt_cell(center["per_class"][k]),
                     _fmt_cell(full["per_class"][k])))

    def scaled(stats: dict, factor: float) -> dict:
        if stats["mean"] is None:
            return stats
        return {"mean": stats["mean"] * factor, "std": stats["std"] * factor,
                "n": stats["n"]}

    rows.append(("OA (%)", _fmt_cell(center["oa"]), _fmt_cell(full["oa"])))
    rows.append(("Kappa x 100", _fmt_cell(scaled(center["kappa"], 100.0)),
                 _fmt_cell(scaled(full["kappa"], 100.0))))
    rows.append(("AA (%)", _fmt_cell(center["aa"]), _fmt_cell(full["aa"])))

    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * widths[j] for j in range(3)))
    return "\n".join(lines)

"""Transformer-based segmentation for multi-band (hyperspectral) rasters.

Submodules load lazily: the CLI must be able to set BLAS thread-count
environment variables before anything imports numpy, so importing this
package on its own stays side-effect free.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "tensor",
    "ComputationTape": "tensor",
    "no_grad": "tensor",
    "backward": "tensor",
    "SplitMix64": "rng",
    "ModelConfig": "model",
    "AmberModel": "model",
    "StageConfig": "encoder",
    "Encoder": "encoder",
    "Decoder": "decoder",
    "HyperCube": "data",
    "LabelMap": "data",
    "PatchSet": "data",
    "generate_synthetic_scene": "data",
    "read_cube": "data",
    "write_cube": "data",
    "read_labels": "data",
    "write_labels": "data",
    "TrainConfig": "training",
    "Checkpoint": "training",
    "train": "training",
    "predict_full": "training",
    "ConfusionMatrix": "metrics",
    "confusion": "metrics",
    "overall_accuracy": "metrics",
    "kappa": "metrics",
    "average_accuracy": "metrics",
    "monte_carlo_cv": "metrics",
    "AmberSegmenter": "estimator",
    "RunConfig": "config",
    "load_run_config": "config",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    module_name = _EXPORTS.get(name)
    if module_name is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    module = importlib.import_module(f".{module_name}", __name__)
    return getattr(module, name)


def __dir__():
    return __all__

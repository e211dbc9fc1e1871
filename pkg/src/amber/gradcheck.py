"""Finite-difference verification of every differentiable operation.

Each check builds a scalar probe loss sum(op(inputs) * W) for a fixed
random weighting W, computes gradients by tape replay, then re-evaluates
the probe under central differences in float64 (step 1e-4). The reported
figure is max|analytic - numeric| / max(max|numeric|, 1e-8).

Inputs stay small (at most ~200 elements per tensor) so the whole suite,
including the end-to-end model sweep over every parameter, runs in
minutes on one core.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from . import tensor as T
from .encoder import EfficientSelfAttention, MixFFN
from .model import AmberModel, ModelConfig
from .rng import SplitMix64
from .tensor import ComputationTape, Tensor, backward, no_grad

__all__ = ["CheckResult", "run_suite", "TINY_MODEL_CONFIG"]

STEP = 1e-4
OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3

# Smallest architecture whose every stage still exercises reduction,
# multi-stage merging, and the full decoder on an 8x8x8 crop.
TINY_MODEL_CONFIG = ModelConfig(
    channels=(4, 8, 12, 16),
    blocks=(1, 1, 1, 1),
    heads=(1, 1, 1, 1),
    reductions=(64, 16, 4, 1),
    expansion=2,
    decoder_channels=8,
    n_classes=3,
    schedule="preserving",
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _rand(rng: SplitMix64, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform_array(shape, low, high), requires_grad=True,
                  dtype=np.float64)


def _probe(rng: SplitMix64, shape) -> np.ndarray:
    return rng.uniform_array(shape, -1.0, 1.0)


def check_gradients(fn: Callable[[Sequence[Tensor]], Tensor],
                    inputs: Sequence[Tensor], step: float = STEP) -> float:
    """Max relative error between tape gradients and central differences."""
    for t in inputs:
        t.grad = None
    with ComputationTape():
        loss = fn(inputs)
        backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = fn(inputs).item()
                flat[i] = orig - step
                down = fn(inputs).item()
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * step)
            numeric = numeric.reshape(t.data.shape)
            scale = max(float(np.abs(numeric).max()), 1e-8)
            err = float(np.abs(a - numeric).max()) / scale
            worst = max(worst, err)
    return worst


def _scalarize(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * Tensor(w, dtype=np.float64)).sum()


def _op_checks(seed: int) -> list[tuple[str, float]]:
    rng = SplitMix64(seed)
    results = []

    def run(name: str, fn, inputs):
        results.append((name, check_gradients(fn, inputs)))

    a, b = _rand(rng, (3, 4)), _rand(rng, (4,))
    w = _probe(rng, (3, 4))
    run("add (broadcast)", lambda ts: _scalarize(ts[0] + ts[1], w), [a, b])

    a, b = _rand(rng, (3, 4)), _rand(rng, (3, 4))
    w = _probe(rng, (3, 4))
    run("mul", lambda ts: _scalarize(ts[0] * ts[1], w), [a, b])

    a, b = _rand(rng, (2, 3, 4)), _rand(rng, (2, 4, 5))
    w = _probe(rng, (2, 3, 5))
    run("matmul (batched)", lambda ts: _scalarize(T.matmul(ts[0], ts[1]), w), [a, b])

    a, b = _rand(rng, (3, 4)), _rand(rng, (2, 4, 5))
    w = _probe(rng, (2, 3, 5))
    run("matmul (broadcast lhs)", lambda ts: _scalarize(T.matmul(ts[0], ts[1]), w), [a, b])

    x = _rand(rng, (2, 3, 4))
    w = _probe(rng, (4, 6))
    run("reshape", lambda ts: _scalarize(ts[0].reshape((4, 6)), w), [x])

    x = _rand(rng, (2, 3, 4))
    w = _probe(rng, (4, 2, 3))
    run("transpose", lambda ts: _scalarize(T.transpose(ts[0], (2, 0, 1)), w), [x])

    x = _rand(rng, (3, 4, 5))
    w = _probe(rng, (3, 5))
    run("sum (axis)", lambda ts: _scalarize(ts[0].sum(axis=1), w), [x])

    x = _rand(rng, (3, 4, 5))
    w = _probe(rng, (3, 1, 5))
    run("mean (keepdims)", lambda ts: _scalarize(ts[0].mean(axis=1, keepdims=True), w), [x])

    a, b = _rand(rng, (2, 3)), _rand(rng, (2, 5))
    w = _probe(rng, (2, 8))
    run("concat", lambda ts: _scalarize(T.concat(list(ts), axis=1), w), [a, b])

    x = _rand(rng, (2, 5, 3))
    w = _probe(rng, (2, 9, 3))
    run("pad_axis", lambda ts: _scalarize(T.pad_axis(ts[0], 1, 1, 3), w), [x])

    x = _rand(rng, (4, 5))
    w = _probe(rng, (4, 5))
    run("exp", lambda ts: _scalarize(T.exp(ts[0]), w), [x])

    x = _rand(rng, (4, 5), 0.5, 2.0)
    run("log", lambda ts: _scalarize(T.log(ts[0]), w), [x])

    x, lw, lb = _rand(rng, (5, 7)), _rand(rng, (7, 3)), _rand(rng, (3,))
    w = _probe(rng, (5, 3))
    run("linear", lambda ts: _scalarize(F.linear(*ts), w), [x, lw, lb])

    x, g, bt = _rand(rng, (4, 6)), _rand(rng, (6,), 0.5, 1.5), _rand(rng, (6,))
    w = _probe(rng, (4, 6))
    run("layer_norm", lambda ts: _scalarize(F.layer_norm(*ts), w), [x, g, bt])

    x = _rand(rng, (3, 5), -2.0, 2.0)
    w = _probe(rng, (3, 5))
    run("gelu", lambda ts: _scalarize(F.gelu(ts[0]), w), [x])

    x = _rand(rng, (3, 7), -3.0, 3.0)
    w = _probe(rng, (3, 7))
    run("softmax", lambda ts: _scalarize(F.softmax(ts[0], axis=-1), w), [x])

    x, cw, cb = (_rand(rng, (2, 3, 6, 6)), _rand(rng, (4, 3, 3, 3)), _rand(rng, (4,)))
    w = _probe(rng, (2, 4, 3, 3))
    run("conv2d (stride 2)",
        lambda ts: _scalarize(F.conv2d(ts[0], ts[1], ts[2], stride=2, padding=1), w),
        [x, cw, cb])

    x, cw, cb = (_rand(rng, (1, 2, 4, 5, 5)), _rand(rng, (3, 2, 2, 3, 3)), _rand(rng, (3,)))
    w = _probe(rng, (1, 3, 3, 3, 3))
    run("conv3d (anisotropic)",
        lambda ts: _scalarize(
            F.conv3d(ts[0], ts[1], ts[2], stride=(1, 2, 2), padding=(0, 1, 1)), w),
        [x, cw, cb])

    x, cw, cb = (_rand(rng, (1, 4, 3, 4, 4)), _rand(rng, (4, 1, 3, 3, 3)), _rand(rng, (4,)))
    w = _probe(rng, (1, 4, 3, 4, 4))
    run("conv3d (depthwise)",
        lambda ts: _scalarize(
            F.conv3d(ts[0], ts[1], ts[2], stride=1, padding=1, groups=4), w),
        [x, cw, cb])

    x = _rand(rng, (1, 2, 3, 4, 4))
    w = _probe(rng, (1, 2, 5, 6, 7))
    run("upsample_trilinear",
        lambda ts: _scalarize(F.upsample_trilinear(ts[0], (5, 6, 7)), w), [x])

    x = _rand(rng, (1, 2, 4, 5))
    w = _probe(rng, (1, 2, 7, 9))
    run("upsample_bilinear",
        lambda ts: _scalarize(F.upsample_bilinear(ts[0], (7, 9)), w), [x])

    logits = _rand(rng, (2, 4, 5, 5), -2.0, 2.0)
    labels = np.array(
        [[rng.randint(5) for _ in range(5)] for _ in range(10)],
        dtype=np.int64).reshape(2, 5, 5)
    run("masked_cross_entropy", lambda ts: F.masked_cross_entropy(ts[0], labels), [logits])

    return results


def _composed_checks(seed: int) -> list[tuple[str, float]]:
    rng = SplitMix64(seed)
    results = []

    for reduction in (1, 4):
        attn = EfficientSelfAttention(8, 2, reduction, rng).astype(np.float64)
        params = attn.parameters()
        x = _rand(rng, (1, 16, 8))
        w = _probe(rng, (1, 16, 8))
        err = check_gradients(lambda ts: _scalarize(attn(ts[0]), w), [x] + params)
        results.append((f"attention (R={reduction})", err))

    ffn = MixFFN(4, 2, rng).astype(np.float64)
    x = _rand(rng, (1, 8, 4))
    w = _probe(rng, (1, 8, 4))
    err = check_gradients(lambda ts: _scalarize(ffn(ts[0], (2, 2, 2)), w),
                          [x] + ffn.parameters())
    results.append(("mix_ffn block", err))
    return results


def model_check(seed: int) -> float:
    """Finite differences over every parameter of the tiny end-to-end model."""
    rng = SplitMix64(seed)
    model = AmberModel(TINY_MODEL_CONFIG, bands=8, seed=seed).astype(np.float64)
    x = Tensor(rng.uniform_array((1, 1, 8, 8, 8), -1.0, 1.0), dtype=np.float64)
    labels = np.array([rng.randint(TINY_MODEL_CONFIG.n_classes + 1)
                       for _ in range(64)], dtype=np.int64).reshape(1, 8, 8)

    def fn(ts):
        return F.masked_cross_entropy(model(x), labels)

    return check_gradients(fn, model.parameters())


def run_suite(seed: int = 2024, op_tolerance: float = OP_TOLERANCE,
              model_tolerance: float = MODEL_TOLERANCE,
              include_model: bool = True) -> list[CheckResult]:
    out = [CheckResult(name, err, op_tolerance) for name, err in _op_checks(seed)]
    out += [CheckResult(name, err, model_tolerance) for name, err in _composed_checks(seed)]
    if include_model:
        out.append(CheckResult("end-to-end tiny model", model_check(seed), model_tolerance))
    return out

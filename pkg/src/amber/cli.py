"""Command-line entry point.

Imports of numeric modules happen inside handlers: ``AMBER_THREADS`` must
land in the BLAS thread-count environment variables before numpy first
loads, or it has no effect.

Conventions: machine-readable JSON on stdout, logs and tables on stderr,
exit 0 on success, 1 on validation/runtime failures, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time


def _configure_threads() -> None:
    n = os.environ.get("AMBER_THREADS")
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise SystemExit(f"AMBER_THREADS must be a positive integer, got {n!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(doc: dict) -> None:
    json.dump(doc, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


def _load_dataset(run_cfg, require_files: bool):
    """Cube + labels per the config's data section, rebalanced if asked."""
    from .data import read_cube, read_labels, rebalance_to_undefined

    d = run_cfg.data
    if d.cube is None:
        if require_files:
            raise ValueError(
                "config declares no dataset files (data.cube/data.labels); "
                "this command needs real rasters")
        return None, None
    cube = read_cube(d.cube)
    labels = read_labels(d.labels)
    if cube.bands != d.bands:
        raise ValueError(f"config declares {d.bands} bands, cube has {cube.bands}")
    if (cube.height, cube.width) != (labels.height, labels.width):
        raise ValueError(
            f"cube {cube.height}x{cube.width} and labels "
            f"{labels.height}x{labels.width} extents differ")
    if d.rebalance is not None:
        labels = rebalance_to_undefined(labels, d.rebalance.class_id,
                                        d.rebalance.n_pixels, d.rebalance.seed)
    return cube, labels


def cmd_synth(args) -> int:
    from .data import generate_synthetic_scene, write_cube, write_labels

    if args.classes < 2:
        raise ValueError(f"--classes must be >= 2, got {args.classes}")
    cube, labels = generate_synthetic_scene(
        args.classes, args.bands, args.height, args.width, args.seed, args.noise)
    os.makedirs(args.out, exist_ok=True)
    cube_base = os.path.join(args.out, "cube")
    labels_base = os.path.join(args.out, "labels")
    write_cube(cube, cube_base)
    write_labels(labels, labels_base)
    _log(f"wrote {cube.bands}x{cube.height}x{cube.width} cube and labels to {args.out}")
    _emit({
        "cube": cube_base, "labels": labels_base,
        "bands": cube.bands, "height": cube.height, "width": cube.width,
        "classes": args.classes, "seed": args.seed,
    })
    return 0


def cmd_sample(args) -> int:
    from .data import overlap_fraction, read_labels, sample_patches, split_patches

    labels = read_labels(args.labels)
    ps = sample_patches(labels, args.n, args.seed)
    if args.train_fraction is not None:
        split_seed = args.split_seed if args.split_seed is not None else args.seed + 1
        ps = split_patches(ps, args.train_fraction, split_seed)
    doc = ps.to_json()
    doc["overlap_fraction"] = overlap_fraction(ps)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1)
            f.write("\n")
        _log(f"wrote {len(ps)} patches to {args.out}")
        _emit({"out": args.out, "n": len(ps),
               "train": len(ps.subset("train")), "test": len(ps.subset("test"))})
    else:
        _emit(doc)
    return 0


def _dry_run(run_cfg) -> int:
    import numpy as np

    from .model import AmberModel
    from .tensor import Tensor, no_grad
    from .rng import SplitMix64

    start = time.monotonic()
    model = AmberModel(run_cfg.model, run_cfg.data.bands, seed=run_cfg.seed)
    built = time.monotonic()
    rng = SplitMix64(run_cfg.seed)
    x = rng.uniform_array((1, 1, run_cfg.data.bands, 32, 32), -1.0, 1.0).astype(np.float32)
    with no_grad():
        logits = model(Tensor(x))
    done = time.monotonic()
    _log(f"dry run: construct {built - start:.1f}s, forward {done - built:.1f}s")
    _emit({
        "dry_run": True,
        "n_parameters": model.num_parameters(),
        "logits_shape": list(logits.shape),
        "construct_seconds": round(built - start, 3),
        "forward_seconds": round(done - built, 3),
    })
    return 0


def cmd_train(args) -> int:
    from .config import load_run_config
    from .data import PatchSet, overlap_fraction, sample_patches, split_patches
    from .training import TrainConfig, train

    run_cfg = load_run_config(args.config)
    if args.seed is not None:
        import dataclasses

        run_cfg = dataclasses.replace(run_cfg, seed=args.seed)
    if args.dry_run:
        return _dry_run(run_cfg)

    cube, labels = _load_dataset(run_cfg, require_files=True)
    if args.patches:
        with open(args.patches, "r", encoding="utf-8") as f:
            ps = PatchSet.from_json(json.load(f))
    else:
        ps = sample_patches(labels, run_cfg.data.n_patches, run_cfg.seed)
        ps = split_patches(ps, run_cfg.data.train_fraction, run_cfg.seed + 1)
    _log(f"{len(ps.subset('train'))} train / {len(ps.subset('test'))} test patches, "
         f"window overlap {overlap_fraction(ps):.1%}")

    cfg = TrainConfig(
        model=run_cfg.model, batch_size=run_cfg.training.batch_size,
        epochs=run_cfg.training.epochs, learning_rate=run_cfg.training.learning_rate,
        momentum=run_cfg.training.momentum, seed=run_cfg.seed)
    ckpt = train(cfg, cube, labels, ps, log=_log)
    ckpt.config["run_config"] = run_cfg.document

    out_dir = args.out or run_cfg.output_dir
    if not out_dir:
        raise ValueError("no output directory: pass --out or set output_dir in the config")
    ckpt.save(out_dir)
    with open(os.path.join(out_dir, "patches.json"), "w", encoding="utf-8") as f:
        json.dump(ps.to_json(), f, indent=1)
        f.write("\n")
    _log(f"checkpoint saved to {out_dir}")
    _emit({
        "checkpoint": out_dir,
        "epochs": cfg.epochs,
        "first_loss": ckpt.history["epoch_loss"][0],
        "final_loss": ckpt.history["epoch_loss"][-1],
        "n_parameters": sum(int(v.size) for v in ckpt.state.values()),
    })
    return 0


def cmd_predict(args) -> int:
    from .data import read_cube, write_labels
    from .training import Checkpoint, predict_full

    ckpt = Checkpoint.load(args.checkpoint)
    cube = read_cube(args.cube)
    pred = predict_full(ckpt, cube, tile_batch=args.tile_batch)
    write_labels(pred, args.out)
    _emit({"out": args.out, "height": pred.height, "width": pred.width,
           "classes_seen": sorted(int(v) for v in set(pred.labels.ravel()))})
    return 0


def cmd_eval(args) -> int:
    from .data import read_labels
    from .metrics import confusion, metric_summary

    pred = read_labels(args.pred)
    truth = read_labels(args.truth)
    m = confusion(pred, truth, args.classes)
    summary = metric_summary(m)
    per_class = summary["per_class"]
    width = max(len("class"), len(str(args.classes)))
    _log(f"{'class'.ljust(width)}  accuracy")
    for k, acc in enumerate(per_class, start=1):
        text = "absent" if acc is None else f"{acc:.2f}%"
        _log(f"{str(k).ljust(width)}  {text}")
    _log(f"OA {summary['oa']:.2f}%  Kappa {summary['kappa']:.4f}  AA {summary['aa']:.2f}%")
    _emit(summary)
    return 0


def cmd_cv(args) -> int:
    from .config import load_run_config
    from .metrics import format_cv_table, monte_carlo_cv
    from .training import TrainConfig

    run_cfg = load_run_config(args.config)
    cube, labels = _load_dataset(run_cfg, require_files=True)
    cfg = TrainConfig(
        model=run_cfg.model, batch_size=run_cfg.training.batch_size,
        epochs=run_cfg.training.epochs, learning_rate=run_cfg.training.learning_rate,
        momentum=run_cfg.training.momentum, seed=run_cfg.seed)
    report = monte_carlo_cv(cfg, cube, labels, run_cfg.data.n_patches,
                            run_cfg.data.train_fraction, folds=args.folds, log=_log)
    _log(format_cv_table(report))
    doc = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
            f.write("\n")
        _log(f"report written to {args.out}")
    _emit(doc)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import MODEL_TOLERANCE, run_suite

    model_tol = max(args.tolerance, MODEL_TOLERANCE) if args.tolerance > 0 else 0.0
    results = run_suite(seed=args.seed, op_tolerance=args.tolerance,
                        model_tolerance=model_tol,
                        include_model=not args.skip_model)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "pass" if r.passed else "FAIL"
        _log(f"{r.name.ljust(width)}  max rel err {r.max_rel_err:.3e}  "
             f"(tol {r.tolerance:g})  {status}")
    ok = all(r.passed for r in results)
    _emit({
        "seed": args.seed,
        "checks": [
            {"name": r.name, "max_rel_err": r.max_rel_err,
             "tolerance": r.tolerance, "passed": r.passed}
            for r in results
        ],
        "passed": ok,
    })
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="amber",
        description="Train and evaluate a transformer segmenter on multi-band rasters.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic labeled scene")
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--bands", type=int, required=True)
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("sample", help="sample crop centers from a label raster")
    s.add_argument("--labels", required=True, help="label raster base path")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-fraction", type=float, default=None)
    s.add_argument("--split-seed", type=int, default=None)
    s.add_argument("--out", default=None, help="patch list JSON path")
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("train", help="train from a JSON run configuration")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None, help="checkpoint directory")
    s.add_argument("--seed", type=int, default=None, help="override config seed")
    s.add_argument("--patches", default=None, help="reuse a sampled patch list")
    s.add_argument("--dry-run", action="store_true",
                   help="construct the model and run one forward pass only")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", help="classify a whole cube with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cube", required=True)
    s.add_argument("--out", required=True, help="output label raster base path")
    s.add_argument("--tile-batch", type=int, default=4)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("eval", help="score a prediction against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--classes", type=int, required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("cv", help="Monte Carlo cross-validation")
    s.add_argument("--config", required=True)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--out", default=None, help="report JSON path")
    s.set_defaults(fn=cmd_cv)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    s.add_argument("--seed", type=int, default=2024)
    s.add_argument("--tolerance", type=float, default=1e-4,
                   help="per-op tolerance (composed blocks and the model use 1e-3)")
    s.add_argument("--skip-model", action="store_true",
                   help="skip the end-to-end model sweep (slowest check)")
    s.set_defaults(fn=cmd_gradcheck)

    return p


def main(argv=None) -> int:
    _configure_threads()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

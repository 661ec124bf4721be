"""Batch command-line front end: simulate, fit, predict, evaluate.

The config file is one JSON object with optional sections:

  model     structural settings (see model.config_from_dict)
  train     optimization settings (trainer.TrainConfig fields)
  simulate / predict / evaluate
            per-command defaults mirroring the flags

Flags override file values. Every artifact embeds the resolved
configuration and the tool version; wall-clock timing goes to stderr
only, so rerunning a command with the same seed reproduces every output
byte for byte.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 training
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .exceptions import FactorizationError, MgfDomainError, TrainingFailureError

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _cap_threads(n: int | None) -> None:
    # exported before the numerical backends build their pools; the jax
    # CPU client reads XLA_FLAGS on first computation, which happens
    # well after argument parsing
    if n is None:
        return
    if n < 1:
        raise ValueError("--threads must be positive")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)
    flags = os.environ.get("XLA_FLAGS", "")
    extra = f"--xla_cpu_multi_thread_eigen=false intra_op_parallelism_threads={n}"
    os.environ["XLA_FLAGS"] = f"{flags} {extra}".strip()


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: top level must be a JSON object")
    return payload


def _section(conf: dict, name: str) -> dict:
    section = conf.get(name) or {}
    if not isinstance(section, dict):
        raise ValueError(f"config section {name!r} must be a JSON object")
    return dict(section)


def _pick(flag_value, section: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    return section.get(key, default)


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _stamp(resolved: dict) -> dict:
    return {"config": resolved, "tool_version": __version__}


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    from . import data
    from .kernels import KernelSpec
    from .model import ModelConfig, config_from_dict, config_to_dict, sample_prior_counts

    conf = _load_json(args.config) if args.config else {}
    section = _section(conf, "simulate")
    preset = _pick(args.preset, section, "preset", None)
    if preset not in ("s1", "line", "prior"):
        raise ValueError(f"simulate needs --preset s1|line|prior, got {preset!r}")
    seed = int(_pick(args.seed, section, "seed", 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    resolved: dict = {"command": "simulate", "preset": preset, "seed": seed}
    if preset == "s1":
        noise = float(_pick(args.noise_std, section, "noise_std", 0.05))
        made = data.generate_s1(seed, noise_std=noise)
        resolved["noise_std"] = noise
        grid, intensity, weights = made.grid, made.intensity, made.weights
    elif preset == "line":
        num_cells = int(_pick(args.num_cells, section, "num_cells", 50))
        holdout = _pick(args.holdout_above, section, "holdout_above", None)
        made = data.generate_line(seed, num_cells=num_cells, holdout_above=holdout)
        resolved["num_cells"] = num_cells
        resolved["holdout_above"] = holdout
        grid, intensity, weights = made.grid, made.intensity, made.weights
    else:
        per_side = int(_pick(args.grid, section, "grid", 20))
        model_dict = _section(conf, "model")
        if model_dict:
            if args.q is not None:
                model_dict["num_latents"] = args.q
            if args.p is not None:
                model_dict["num_tasks"] = args.p
            cfg = config_from_dict(model_dict)
        else:
            q = int(_pick(args.q, section, "q", 2))
            p = int(_pick(args.p, section, "p", 4))
            cfg = ModelConfig(
                num_latents=q, num_tasks=p,
                latent_kernel=KernelSpec(lengthscales=(0.25, 0.25)),
            )
        grid_spec = data.GridSpec(
            cells_per_dim=(per_side, per_side), bounds=((0.0, 1.0), (0.0, 1.0))
        )
        sample = sample_prior_counts(cfg, grid_spec.centroids(), seed)
        grid = replace(sample.grid, grid=grid_spec)
        intensity, weights = sample.intensity, sample.weights
        resolved["grid"] = per_side
        resolved["model"] = config_to_dict(cfg)
    resolved["weights"] = [[float(v) for v in row] for row in weights]

    data.write_counts_csv(out / "counts.csv", grid, meta=_stamp(resolved))
    data.write_truth_csv(out / "truth.csv", grid, intensity, meta=_stamp(resolved))
    if args.folds is not None:
        if grid.grid is None:
            raise ValueError("--folds needs lattice geometry")
        fold_spec = data.make_folds(grid.grid, int(args.folds), grid.num_tasks, seed)
        data.write_fold_json(out / "folds.json", fold_spec, meta=_stamp(resolved))
        resolved["folds"] = int(args.folds)
    _write_json(out / "run.json", _stamp(resolved))
    print(f"simulate: wrote {grid.num_cells} cells x {grid.num_tasks} tasks to {out}")
    return 0


# ---------------------------------------------------------------------------
# fit


def _masked_grid(args, load_counts_csv, load_fold_json, apply_fold):
    grid, _ = load_counts_csv(args.counts)
    if args.fold is None:
        return grid, None
    if args.fold_spec is None:
        raise ValueError("--fold needs --fold-spec pointing at a folds file")
    fold_spec = load_fold_json(args.fold_spec)
    return apply_fold(grid, fold_spec, int(args.fold)), int(args.fold)


def cmd_fit(args) -> int:
    from .data import apply_fold, load_counts_csv, load_fold_json
    from .model import config_from_dict, config_to_dict, save_checkpoint
    from .trainer import TrainConfig, fit

    conf = _load_json(args.config)
    grid, fold_id = _masked_grid(args, load_counts_csv, load_fold_json, apply_fold)

    model_dict = _section(conf, "model")
    model_dict.setdefault("num_tasks", grid.num_tasks)
    mode = args.mode or model_dict.get("baseline_mode", "mcpm")
    model_dict["baseline_mode"] = mode
    if mode == "lgcp":
        # single-task baseline: one latent per task, identity mixing
        model_dict["num_latents"] = model_dict["num_tasks"]
        model_dict.pop("fixed_weights", None)
    elif mode == "icm-limit":
        model_dict.pop("fixed_weights", None)
    if "num_latents" not in model_dict:
        raise ValueError("config must set model.num_latents (or use --mode lgcp)")
    model_cfg = config_from_dict(model_dict)
    if model_cfg.num_tasks != grid.num_tasks:
        raise ValueError(
            f"config says {model_cfg.num_tasks} tasks but counts file has {grid.num_tasks}"
        )

    train_dict = _section(conf, "train")
    for key, value in (
        ("learning_rate", args.learning_rate),
        ("epochs", args.epochs),
        ("batch_size", args.batch_size),
        ("seed", args.seed),
    ):
        if value is not None:
            train_dict[key] = value
    try:
        train_cfg = TrainConfig(**train_dict)
    except TypeError as exc:
        raise ValueError(f"bad train config: {exc}") from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    state, trace = fit(model_cfg, train_cfg, grid)
    elapsed = time.perf_counter() - started

    resolved = {
        "command": "fit",
        "counts": str(args.counts),
        "fold": fold_id,
        "mode": mode,
        "model": config_to_dict(model_cfg),
        "train": asdict(train_cfg),
    }
    save_checkpoint(state, out / "checkpoint.json", meta=_stamp(resolved))
    trace.to_csv(out / "trace.csv", meta=_stamp(resolved), wall_clock=False)
    print(
        f"fit: elbo {trace.elbo[0]!r} -> {max(trace.elbo)!r} over {len(trace) - 1} epochs "
        f"({elapsed:.1f}s, {trace.rejected_steps} rejected steps)",
        file=sys.stderr,
    )
    return 0


# ---------------------------------------------------------------------------
# predict


def _parse_grid_arg(spec: str, bounds_arg: str | None):
    from .data import GridSpec

    try:
        cells = tuple(int(tok) for tok in spec.lower().split("x"))
    except ValueError:
        raise ValueError(f"--grid expects N1xN2..., got {spec!r}") from None
    if bounds_arg is None:
        bounds = tuple((0.0, 1.0) for _ in cells)
    else:
        vals = [float(tok) for tok in bounds_arg.split(",")]
        if len(vals) != 2 * len(cells):
            raise ValueError("--bounds needs lo,hi per grid dimension")
        bounds = tuple((vals[2 * d], vals[2 * d + 1]) for d in range(len(cells)))
    return GridSpec(cells_per_dim=cells, bounds=bounds)


def cmd_predict(args) -> int:
    from .data import load_counts_csv
    from .model import load_checkpoint
    from .predict import write_surface_csv

    conf = _load_json(args.config) if args.config else {}
    section = _section(conf, "predict")
    state = load_checkpoint(args.checkpoint)
    if args.counts is not None:
        grid, _ = load_counts_csv(args.counts)
        x_star = grid.centroids
        source = {"counts": str(args.counts)}
    elif args.grid is not None:
        grid_spec = _parse_grid_arg(args.grid, args.bounds)
        x_star = grid_spec.centroids()
        source = {"grid": grid_spec.to_dict()}
    else:
        raise ValueError("predict needs --counts or --grid to supply locations")
    num_samples = int(_pick(args.num_samples, section, "num_samples", 1000))
    seed = int(_pick(args.seed, section, "seed", 0))
    resolved = {
        "command": "predict",
        "checkpoint": str(args.checkpoint),
        "num_samples": num_samples,
        "seed": seed,
        **source,
    }
    write_surface_csv(
        args.out, state, x_star, num_samples=num_samples, seed=seed, meta=_stamp(resolved)
    )
    print(f"predict: wrote {x_star.shape[0]} cells x {state.config.num_tasks} tasks to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    from .data import apply_fold, load_counts_csv, load_fold_json
    from .metrics import evaluation_report
    from .model import load_checkpoint

    conf = _load_json(args.config) if args.config else {}
    section = _section(conf, "evaluate")
    state = load_checkpoint(args.checkpoint)
    grid, fold_id = _masked_grid(args, load_counts_csv, load_fold_json, apply_fold)
    cells = _pick(args.cells, section, "cells", "missing")
    seed = int(_pick(args.seed, section, "seed", 0))
    region_cells = int(_pick(args.region_cells, section, "region_cells", 4))
    num_regions = int(_pick(args.num_regions, section, "num_regions", 100))
    level = float(_pick(args.level, section, "level", 0.9))
    intensity_samples = int(_pick(args.intensity_samples, section, "intensity_samples", 1000))
    count_samples = int(_pick(args.count_samples, section, "count_samples", 100))
    resolved = {
        "command": "evaluate",
        "checkpoint": str(args.checkpoint),
        "counts": str(args.counts),
        "cells": cells,
        "region_cells": region_cells,
        "num_regions": num_regions,
        "level": level,
        "intensity_samples": intensity_samples,
        "count_samples": count_samples,
        "seed": seed,
    }
    report = evaluation_report(
        state,
        grid,
        cells=cells,
        region_cells=region_cells,
        num_regions=num_regions,
        level=level,
        num_intensity_samples=intensity_samples,
        num_count_samples=count_samples,
        seed=seed,
        fold_id=fold_id,
        config=resolved,
    )
    report["tool_version"] = __version__
    _write_json(args.out, report)
    print(f"evaluate: wrote per-task report for {grid.num_tasks} tasks to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcpm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mcpm {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=None, help="cap worker pools")
    common.add_argument("--config", default=None, help="JSON config file")

    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    sim.add_argument("--preset", choices=["s1", "line", "prior"])
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--q", type=int, default=None, help="latent count (prior preset)")
    sim.add_argument("--p", type=int, default=None, help="task count (prior preset)")
    sim.add_argument("--grid", type=int, default=None, help="cells per side (prior preset)")
    sim.add_argument("--noise-std", type=float, default=None, dest="noise_std")
    sim.add_argument("--num-cells", type=int, default=None, dest="num_cells")
    sim.add_argument("--holdout-above", type=float, default=None, dest="holdout_above")
    sim.add_argument("--folds", type=int, default=None, help="also write a fold assignment")
    sim.set_defaults(handler=cmd_simulate)

    fit_p = sub.add_parser("fit", parents=[common], help="train on a counts file")
    fit_p.add_argument("--counts", required=True)
    fit_p.add_argument("--out", required=True, help="output directory")
    fit_p.add_argument("--mode", choices=["mcpm", "lgcp", "icm-limit"], default=None)
    fit_p.add_argument("--fold", type=int, default=None)
    fit_p.add_argument("--fold-spec", default=None, dest="fold_spec")
    fit_p.add_argument("--epochs", type=int, default=None)
    fit_p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    fit_p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    fit_p.set_defaults(handler=cmd_fit)

    pred = sub.add_parser("predict", parents=[common], help="write intensity surfaces")
    pred.add_argument("--checkpoint", required=True)
    pred.add_argument("--out", required=True, help="surface CSV path")
    pred.add_argument("--counts", default=None, help="take locations from this counts file")
    pred.add_argument("--grid", default=None, help="N1xN2 lattice instead of a counts file")
    pred.add_argument("--bounds", default=None, help="lo,hi per dimension for --grid")
    pred.add_argument("--num-samples", type=int, default=None, dest="num_samples")
    pred.set_defaults(handler=cmd_predict)

    ev = sub.add_parser("evaluate", parents=[common], help="score a checkpoint against counts")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--counts", required=True)
    ev.add_argument("--out", required=True, help="report JSON path")
    ev.add_argument("--cells", choices=["observed", "missing", "all"], default=None)
    ev.add_argument("--fold", type=int, default=None)
    ev.add_argument("--fold-spec", default=None, dest="fold_spec")
    ev.add_argument("--region-cells", type=int, default=None, dest="region_cells")
    ev.add_argument("--num-regions", type=int, default=None, dest="num_regions")
    ev.add_argument("--level", type=float, default=None)
    ev.add_argument("--intensity-samples", type=int, default=None, dest="intensity_samples")
    ev.add_argument("--count-samples", type=int, default=None, dest="count_samples")
    ev.set_defaults(handler=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _cap_threads(args.threads)
        return args.handler(args)
    except (MgfDomainError, FactorizationError) as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 3
    except TrainingFailureError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 4
    except (ValueError, KeyError, OSError) as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

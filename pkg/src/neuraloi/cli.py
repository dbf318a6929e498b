"""Command-line entry points: simulate, observe, interpolate, train, benchmark."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .bench import (
    INTERPOLATION_METHODS,
    ConfigError,
    interpolate,
    load_config,
    make_cost,
    make_solver,
    model_config,
    prepare,
    run_benchmark,
    spde_params,
    train_config,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .io import FormatError, read_field, write_field, write_json
from .observation import ObsSet, observe, track_mask
from .solver import SolverDivergedError
from .spde import simulate
from .training import TrainingError, train

log = logging.getLogger("neuraloi")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def read_obs(directory) -> ObsSet:
    d = Path(directory)
    meta_path = d / "obs.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"observation metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    mask = read_field(d / "mask.noi").values
    values = read_field(d / "obs.noi").values
    if mask.dtype != bool:
        raise FormatError(f"{d / 'mask.noi'} is not a mask file")
    return ObsSet(mask, np.where(mask, values, 0.0), float(meta["sigma2"]))


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    params = spde_params(cfg)
    field = simulate(params, seed=args.seed)
    out = _out_dir(args.out)
    write_field(out / "truth.noi", field)
    log.info("wrote %s %s", out / "truth.noi", field.shape)
    return 0


def cmd_observe(args) -> int:
    truth = read_field(args.truth)
    mask = track_mask(truth.shape, args.track_spacing, args.angle, 0, args.phase_step)
    obs = observe(truth, mask, args.sigma2, args.seed)
    out = _out_dir(args.out)
    write_field(out / "mask.noi", obs.mask, truth.dx, truth.dy, truth.dt)
    write_field(out / "obs.noi", obs.values, truth.dx, truth.dy, truth.dt)
    write_json(out / "obs.json", {
        "sigma2": args.sigma2, "track_spacing": args.track_spacing, "angle": args.angle,
        "phase_step": args.phase_step, "seed": args.seed, "observed_fraction": obs.fraction,
    })
    log.info("observed fraction %.4f", obs.fraction)
    return 0


def cmd_interpolate(args) -> int:
    cfg = load_config(args.config)
    obs = read_obs(args.obs)
    truth = read_field(args.truth).values if args.truth else None
    z = read_field(args.modality).values if args.modality else None
    model = cost = None
    if args.method == "solver":
        if not args.model:
            raise ConfigError("--model is required for --method solver")
        model, cost, _ = load_checkpoint(args.model)
    res = interpolate(args.method, cfg, obs, model, cost, args.iterations, truth, z)
    out = _out_dir(args.out)
    write_field(out / "reconstruction.noi", res.field)
    res.trace.to_csv(out / "trace.csv")
    metrics = {"method": args.method, "oi_score": res.oi_score}
    if res.mse_truth is not None:
        metrics["mse_truth"] = res.mse_truth
    write_json(out / "metrics.json", metrics)
    return 0


def _experiment_from_data(cfg: dict, data_dir, seed: int, oi_ranges: list):
    d = Path(data_dir)
    truth = read_field(d / "truth.noi").values
    obs = read_obs(d)
    return prepare(cfg, seed, oi_ranges, truth=truth, obs=obs)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.get("seed", 0)
    tcfg = train_config(cfg)
    mcfg = model_config(cfg)
    oi_ranges = [tcfg.train_range, tcfg.val_range] if tcfg.loss == "l2" else []
    exp = _experiment_from_data(cfg, args.data, seed, oi_ranges)
    model = make_solver(mcfg, exp.dataset.window, seed)
    cost = make_cost(mcfg, exp.params, exp.dataset.window, exp.precision, exp.obs.sigma2, seed)
    result = train(tcfg, exp.dataset, model, cost)
    out = _out_dir(args.out)
    save_checkpoint(out, model, cost, {"config": cfg, "seed": seed, "best_epoch": result.best_epoch})
    result.history_csv(out / "history.csv", timing=args.timing)
    return 0


def cmd_benchmark(args) -> int:
    cfg = load_config(args.config)
    run_benchmark(cfg, args.out, timing=args.timing)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neuraloi", description=__doc__)
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a truth field")
    s.add_argument("config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("observe", help="draw along-track observations of a truth field")
    s.add_argument("truth")
    s.add_argument("--track-spacing", type=int, default=10)
    s.add_argument("--angle", type=float, default=45.0)
    s.add_argument("--phase-step", type=int, default=1)
    s.add_argument("--sigma2", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_observe)

    s = sub.add_parser("interpolate", help="reconstruct a field from observations")
    s.add_argument("--method", choices=INTERPOLATION_METHODS, required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--obs", required=True, help="directory written by 'observe'")
    s.add_argument("--model", help="checkpoint directory written by 'train'")
    s.add_argument("--iterations", type=int)
    s.add_argument("--truth", help="truth field, for the reported mse")
    s.add_argument("--modality", help="second-modality field for multimodal models")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("train", help="train a solver on simulated data")
    s.add_argument("config")
    s.add_argument("--data", required=True, help="directory with truth.noi and observation files")
    s.add_argument("--out", required=True)
    s.add_argument("--timing", action="store_true", help="also write per-epoch CPU wall times")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("benchmark", help="train and compare every configured method")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--timing", action="store_true", help="also write CPU wall times")
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TrainingError, SolverDivergedError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

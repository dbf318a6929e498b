"""Experiment configuration, model construction and the benchmark harness."""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .io import write_json
from .observation import DEFAULT_SIGMA2, ObsSet, observe, track_mask
from .oi import OIProblem, oi_cost
from .solver import Schedule, SolveTrace, SolverModel, solve
from .spde import SpdeParams, precision_matrix, simulate
from .sparse import SparseSym
from .training import (
    Dataset,
    Metrics,
    OICache,
    TrainConfig,
    build_dataset,
    evaluate_outputs,
    run_direct,
    run_solver,
    train,
    train_direct,
)
from .variational import (
    ConvNet,
    ConvResPrior,
    LinearConvPrior,
    Multimodal,
    VarCost,
    Weight,
    make_matrix_prior,
)

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("method", "kind", "prior", "loss", "iterations", "mse_truth", "mse_center", "oi_score")


class ConfigError(ValueError):
    """Configuration file is missing, malformed or fails schema validation."""


def _schema() -> dict:
    text = resources.files("neuraloi").joinpath("schemas/config.schema.json").read_text()
    return json.loads(text)


def validate_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    return cfg


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from None
    return validate_config(cfg)


def spde_params(cfg: dict) -> SpdeParams:
    try:
        return SpdeParams.from_dict(cfg.get("spde", {}))
    except ValueError as exc:
        raise ConfigError(f"spde section: {exc}") from None


def observation_mask(cfg: dict, shape: tuple) -> np.ndarray:
    o = cfg.get("observation", {})
    return track_mask(shape, o.get("track_spacing", 10), o.get("angle", 45.0), 0, o.get("phase_step", 1))


def sigma2_of(cfg: dict) -> float:
    return float(cfg.get("observation", {}).get("sigma2", DEFAULT_SIGMA2))


def window_centers(cfg: dict, nt: int) -> list:
    w = cfg.get("window", 5)
    half = w // 2
    lo, hi = cfg.get("centers", [half, nt - w + half])
    if lo < half or hi > nt - w + half or lo > hi:
        raise ConfigError(f"window centres [{lo}, {hi}] do not fit {nt} time steps")
    return list(range(lo, hi + 1))


def train_config(cfg: dict, overrides: dict | None = None) -> TrainConfig:
    d = dict(cfg.get("train", {}))
    d.update(overrides or {})
    d.setdefault("seed", cfg.get("seed", 0))
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train section: {exc}") from None


def model_config(cfg: dict, overrides: dict | None = None) -> dict:
    d = copy.deepcopy(cfg.get("model", {}))
    d.update(copy.deepcopy(overrides or {}))
    return d


def make_solver(mcfg: dict, channels: int, seed: int = 0) -> SolverModel:
    return SolverModel.create(
        channels,
        hidden=mcfg.get("hidden", 16),
        kernel_size=mcfg.get("kernel_size", 3),
        seed=seed,
        schedule=Schedule(**mcfg.get("schedule", {})),
        iterations=mcfg.get("iterations", 20),
        projection_scale=mcfg.get("projection_scale", 1.0),
    )


def make_cost(mcfg: dict, params: SpdeParams, window: int, q: SparseSym, sigma2: float,
              seed: int = 0) -> VarCost:
    """Prior and weights from the ``model`` section.

    ``known`` uses the exact stationary square-root kernel when the field is
    periodic and isotropic, and the sparse Cholesky factor otherwise.
    """
    kind = mcfg.get("prior", "known")
    rng = np.random.default_rng(seed + 7919)
    lam = None
    if kind == "known":
        if params.boundary == "periodic" and params.beta == 0.0:
            prior = LinearConvPrior.from_precision(q, (window, params.ny, params.nx),
                                                   mcfg.get("prior_radius", 3))
        else:
            prior = make_matrix_prior(q)
    elif kind == "matrix":
        prior = make_matrix_prior(q)
    elif kind == "linear_conv":
        prior = LinearConvPrior.create(window, 2 * mcfg.get("prior_radius", 1) + 1, rng=rng)
        lam = Weight.trainable(sigma2)
    else:
        prior = ConvResPrior.create(window, mcfg.get("prior_hidden", 16), rng=rng)
        lam = Weight.trainable(sigma2)
    mm = None
    mmc = mcfg.get("multimodal")
    if mmc:
        ch, hid = mmc.get("channels", 8), mmc.get("hidden", 8)
        make_w = Weight.trainable if mmc.get("trainable", True) else Weight
        mm = Multimodal(
            lam1=Weight(mmc.get("lam1", 1.0)),
            lam2=make_w(mmc.get("lam2", 1.0)),
            lam3=None,
            g=ConvNet.create(window, ch, hid, rng=rng),
            h=ConvNet.create(window, ch, hid, rng=rng),
        )
    return VarCost(prior, lam, mm)


@dataclass
class Experiment:
    params: SpdeParams
    truth: np.ndarray
    obs: ObsSet
    precision: SparseSym
    dataset: Dataset


def prepare(cfg: dict, seed: int, oi_ranges: list, truth: np.ndarray | None = None,
            obs: ObsSet | None = None) -> Experiment:
    """Simulate (unless given), observe and cut windows; exact OI for ``oi_ranges``."""
    params = spde_params(cfg)
    window = cfg.get("window", 5)
    if truth is None:
        truth = simulate(params, seed=seed).values
    if obs is None:
        obs = observe(truth, observation_mask(cfg, truth.shape), sigma2_of(cfg), seed + 1)
    q = precision_matrix(params, window)
    centers = window_centers(cfg, truth.shape[0])
    oi_centers = [c for c in centers if any(lo <= c <= hi for lo, hi in oi_ranges)]
    mmc = cfg.get("model", {}).get("multimodal")
    modality = None
    if mmc:
        modality = {"noise_std": mmc.get("noise_std", 0.1), "smooth": mmc.get("smooth", 2.0)}
    ds = build_dataset(truth, centers, window, q, obs=obs, seed=seed, with_oi=oi_centers,
                       modality=modality)
    return Experiment(params, truth, obs, q, ds)


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def add(self, method: str, kind: str, prior: str, loss: str, iterations: int, m: Metrics) -> None:
        self.rows.append({
            "method": method, "kind": kind, "prior": prior, "loss": loss,
            "iterations": int(iterations), "mse_truth": m.mse_truth,
            "mse_center": m.mse_center, "oi_score": m.oi_score,
        })
        self.timing[f"{method}@{iterations}"] = m.wall_time

    def row(self, method: str, iterations: int | None = None) -> dict:
        for r in self.rows:
            if r["method"] == method and (iterations is None or r["iterations"] == iterations):
                return r
        raise KeyError(f"no report row for {method!r} at {iterations}")

    def to_json(self, path, timing: bool = False) -> None:
        out = {"rows": self.rows}
        if timing:
            out["wall_time_cpu_seconds"] = self.timing
        write_json(path, out)

    def to_csv(self, path, timing: bool = False) -> None:
        cols = REPORT_COLUMNS + (("wall_time_cpu_s",) if timing else ())
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                vals = [r[c] if isinstance(r[c], (str, int)) else repr(float(r[c])) for c in REPORT_COLUMNS]
                if timing:
                    vals.append(f"{self.timing[r['method'] + '@' + str(r['iterations'])]:.3f}")
                w.writerow(vals)


def run_benchmark(cfg: dict, out_dir=None, timing: bool = False) -> BenchReport:
    """Train and evaluate every configured method on the test windows.

    Writes ``report.json``, ``report.csv`` and one ``trace_<method>.csv`` per
    iterative method (iterates on the test windows, summed cost) when
    ``out_dir`` is given.  Wall times are only written with ``timing`` since
    they differ between runs.
    """
    validate_config(cfg)
    if "methods" not in cfg:
        raise ConfigError("benchmark config needs a 'methods' list")
    seed = cfg.get("seed", 0)
    base_train = train_config(cfg)
    needs_l2 = any(
        m["kind"] == "solver" and train_config(cfg, m.get("train")).loss == "l2" for m in cfg["methods"]
    )
    oi_ranges = [base_train.test_range]
    if needs_l2:
        oi_ranges += [base_train.train_range, base_train.val_range]
    exp = prepare(cfg, seed, oi_ranges)
    ds = exp.dataset
    sigma2 = exp.obs.sigma2
    window = ds.window
    test = ds.centers(base_train.test_range)
    truth_test = np.stack([ds.samples[c].truth for c in test])
    oi_test = np.stack([ds.samples[c].x_oi for c in test])
    report = BenchReport()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for m in cfg["methods"]:
        name, kind = m["name"], m["kind"]
        mcfg = model_config(cfg, m.get("model"))
        tcfg = train_config(cfg, m.get("train"))
        log.info("benchmark method %s (%s)", name, kind)
        if kind == "oi":
            report.add(name, kind, "exact", "-", 0, evaluate_outputs(oi_test, ds, test))
            continue
        if kind == "cnn":
            net = ConvResPrior.create(window, mcfg.get("prior_hidden", 16),
                                      rng=np.random.default_rng(seed + 31))
            train_direct(tcfg, ds, net)
            outputs, secs = run_direct(net, ds, test)
            report.add(name, kind, "conv_res", "l1", 1, evaluate_outputs(outputs, ds, test, secs))
            continue
        budgets = m.get("iterations", [mcfg.get("iterations", 20)])
        if kind == "oi-gd":
            cost = VarCost(make_matrix_prior(exp.precision))
            model = SolverModel.gradient_descent(window, Schedule(**mcfg.get("schedule", {})))
            prior_name, loss_name = "matrix", "-"
        else:
            cost = make_cost(mcfg, exp.params, window, exp.precision, sigma2, seed)
            model = make_solver(mcfg, window, seed)
            train(tcfg, ds, model, cost)
            prior_name, loss_name = mcfg.get("prior", "known"), tcfg.loss
        for k in budgets:
            outputs, secs = run_solver(model.with_iterations(k), cost, ds, test)
            report.add(name, kind, prior_name, loss_name, k, evaluate_outputs(outputs, ds, test, secs))
        if out is not None:
            b = ds.batch(test)
            _, trace = solve(model.with_iterations(max(budgets)), cost, b.obs, z=b.z,
                             truth=truth_test, x_oi=oi_test)
            trace.to_csv(out / f"trace_{name}.csv")
    if out is not None:
        report.to_json(out / "report.json", timing)
        report.to_csv(out / "report.csv", timing)
    return report


# ---------------------------------------------------------------------------
# whole-field interpolation by sliding windows


INTERPOLATION_METHODS = ("oi-exact", "oi-gd", "solver")


def stitch(outputs: np.ndarray, centers: list, nt: int, window: int) -> np.ndarray:
    """Keep each window's centre step; the first and last windows fill the edges."""
    half = window // 2
    by_center = dict(zip(centers, outputs))
    out = np.empty((nt,) + outputs.shape[2:])
    for t in range(nt):
        c = min(max(t, centers[0]), centers[-1])
        out[t] = by_center[c][t - (c - half)]
    return out


@dataclass
class Interpolation:
    field: np.ndarray
    windows: np.ndarray
    trace: object
    oi_score: float
    mse_truth: float | None


def interpolate(method: str, cfg: dict, obs: ObsSet, model: SolverModel | None = None,
                cost: VarCost | None = None, iterations: int | None = None,
                truth: np.ndarray | None = None, z: np.ndarray | None = None) -> Interpolation:
    """Reconstruct a full field window by window."""
    if method not in INTERPOLATION_METHODS:
        raise ConfigError(f"method must be one of {INTERPOLATION_METHODS}")
    params = spde_params(cfg)
    window = cfg.get("window", 5)
    nt = obs.shape[0]
    if obs.shape != (params.nt, params.ny, params.nx):
        raise ConfigError(f"observations {obs.shape} do not match the configured grid")
    q = precision_matrix(params, window)
    centers = window_centers(cfg, nt)
    half = window // 2
    wins = [obs.window(c - half, c - half + window) for c in centers]
    batch = ObsSet(np.stack([w.mask for w in wins]), np.stack([w.values for w in wins]), obs.sigma2)
    zb = None
    if z is not None:
        zb = np.stack([z[c - half:c - half + window] for c in centers])
    if method == "oi-exact":
        cache = OICache(q)
        outputs = np.stack([cache.solve(w) for w in wins])
        scores = [oi_cost(o, OIProblem(w, precision=q)) for o, w in zip(outputs, wins)]
        trace = SolveTrace([obs.sigma2 * float(np.sum(scores))], [0.0])
    else:
        if method == "oi-gd":
            cost = VarCost(make_matrix_prior(q))
            model = SolverModel.gradient_descent(
                window, Schedule(**cfg.get("model", {}).get("schedule", {})),
                cfg.get("model", {}).get("iterations", 20))
        elif model is None or cost is None:
            raise ConfigError("method 'solver' needs a trained model checkpoint")
        if cost.multimodal is not None and zb is None:
            raise ConfigError("multimodal model needs the second modality")
        if iterations is not None:
            model = model.with_iterations(iterations)
        wtruth = None
        if truth is not None:
            wtruth = np.stack([truth[c - half:c - half + window] for c in centers])
        outputs, trace = solve(model, cost, batch, z=zb, truth=wtruth)
    scores = [oi_cost(o, OIProblem(w, precision=q)) for o, w in zip(outputs, wins)]
    full = stitch(outputs, centers, nt, window)
    mse = None if truth is None else float(np.mean((full - truth) ** 2))
    return Interpolation(full, outputs, trace, float(np.mean(scores)), mse)

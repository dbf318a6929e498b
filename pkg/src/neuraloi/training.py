"""Bi-level training of the solver and prior, datasets of windows, and metrics."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .autodiff import (
    AdamState,
    NonFiniteError,
    Tape,
    Tensor,
    adam_update,
    add,
    grad,
    inner,
    mul,
    no_record,
    sparse_apply,
    sub,
    sumsq,
)
from .observation import ObsSet, observe, track_mask
from .oi import OIProblem, oi_cost, posterior_precision
from .solver import SolverDivergedError, SolverModel, init_state, solve, unroll
from .sparse import SparseSym, cholesky
from .variational import VarCost

log = logging.getLogger(__name__)

LOSSES = ("l1", "l2", "l3")
INIT_POLICIES = ("alternate", "zero")
AUGMENTATIONS = ("transpose", "reverse")


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    loss: str = "l1"
    epochs: int = 20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    unroll: int = 20
    batch_size: int = 8
    init_policy: str = "alternate"
    train_prior: bool = True
    augment: tuple = ()
    train_range: tuple = (13, 51)
    val_range: tuple = (4, 10)
    test_range: tuple = (58, 60)
    seed: int = 0

    def __post_init__(self):
        self.train_range = tuple(self.train_range)
        self.val_range = tuple(self.val_range)
        self.test_range = tuple(self.test_range)
        self.augment = tuple(self.augment)
        self.validate()

    def validate(self) -> None:
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.init_policy not in INIT_POLICIES:
            raise ValueError(f"init_policy must be one of {INIT_POLICIES}")
        if not set(self.augment) <= set(AUGMENTATIONS) or len(set(self.augment)) != len(self.augment):
            raise ValueError(f"augment entries must be distinct members of {AUGMENTATIONS}")
        if self.epochs < 0 or self.unroll < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 0, unroll >= 1, batch_size >= 1, lr > 0")
        ranges = [self.train_range, self.val_range, self.test_range]
        for lo, hi in ranges:
            if lo > hi:
                raise ValueError(f"window range ({lo}, {hi}) is empty")
        spans = sorted(ranges)
        for (_, hi), (lo, _) in zip(spans, spans[1:]):
            if lo <= hi:
                raise ValueError("train/val/test window ranges must be disjoint")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("train_range", "val_range", "test_range", "augment"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# datasets


@dataclass(eq=False)
class Sample:
    center: int
    truth: np.ndarray
    obs: ObsSet
    x_oi: np.ndarray | None = None
    z: np.ndarray | None = None


@dataclass(eq=False)
class Batch:
    truth: np.ndarray
    obs: ObsSet
    x_oi: np.ndarray | None
    z: np.ndarray | None
    centers: list


@dataclass(eq=False)
class Dataset:
    """Windows keyed by their centre time index, plus the window precision."""

    samples: dict
    window: int
    precision: SparseSym | None = None

    def __post_init__(self):
        shapes = {s.truth.shape for s in self.samples.values()}
        if len(shapes) > 1:
            raise ValueError("all windows must share one shape")
        if shapes and next(iter(shapes))[0] != self.window:
            raise ValueError("window length does not match the samples")

    def centers(self, rng: tuple) -> list:
        lo, hi = rng
        out = [c for c in sorted(self.samples) if lo <= c <= hi]
        if not out:
            raise ValueError(f"no windows with centres in [{lo}, {hi}]")
        return out

    def batch(self, centers: list) -> Batch:
        ss = [self.samples[c] for c in centers]
        obs = ObsSet(
            np.stack([s.obs.mask for s in ss]),
            np.stack([s.obs.values for s in ss]),
            ss[0].obs.sigma2,
        )
        x_oi = np.stack([s.x_oi for s in ss]) if all(s.x_oi is not None for s in ss) else None
        z = np.stack([s.z for s in ss]) if all(s.z is not None for s in ss) else None
        return Batch(np.stack([s.truth for s in ss]), obs, x_oi, z, list(centers))


def _symmetry(a: np.ndarray | None, variant: tuple) -> np.ndarray | None:
    if a is None:
        return None
    if "transpose" in variant:
        a = np.swapaxes(a, -1, -2)
    if "reverse" in variant:
        a = a[..., ::-1, ::-1, ::-1]
    return np.ascontiguousarray(a)


def transform_batch(b: Batch, variant: tuple) -> Batch:
    """Apply grid symmetries to every array of a batch.

    ``transpose`` swaps the two spatial axes; ``reverse`` rotates the grid by
    180 degrees and reverses time, which keeps drifting tracks drifting the
    same way.  Both leave an isotropic stationary field's statistics unchanged.
    """
    if not variant:
        return b
    obs = ObsSet(_symmetry(b.obs.mask, variant), _symmetry(b.obs.values, variant), b.obs.sigma2)
    return Batch(_symmetry(b.truth, variant), obs, _symmetry(b.x_oi, variant),
                 _symmetry(b.z, variant), b.centers)


def _variants(augment: tuple) -> list:
    out = [()]
    for name in augment:
        out += [v + (name,) for v in out]
    return out


def synthetic_modality(truth: np.ndarray, noise_std: float = 0.1, smooth: float = 2.0,
                       seed: int = 0) -> np.ndarray:
    """Gap-free second modality ``tanh(truth / scale) + eta`` with spatially smooth noise."""
    rng = np.random.default_rng(seed)
    truth = np.asarray(truth, dtype=np.float64)
    scale = truth.std() if truth.std() > 0 else 1.0
    eta = ndi.gaussian_filter(rng.standard_normal(truth.shape), sigma=(0, smooth, smooth), mode="wrap")
    eta *= noise_std / max(eta.std(), 1e-12)
    return np.tanh(truth / scale) + eta


class OICache:
    """Exact OI per window, reusing one factorization per distinct mask."""

    def __init__(self, q: SparseSym):
        self.q = q
        self.factors: dict = {}

    def solve(self, obs: ObsSet) -> np.ndarray:
        key = obs.mask.tobytes()
        if key not in self.factors:
            self.factors[key] = cholesky(posterior_precision(OIProblem(obs, precision=self.q)))
        rhs = np.where(obs.mask, obs.values, 0.0) / obs.sigma2
        return self.factors[key].solve(rhs.ravel()).reshape(obs.shape)


def build_dataset(
    truth: np.ndarray,
    centers,
    window: int = 5,
    precision: SparseSym | None = None,
    mask: np.ndarray | None = None,
    sigma2: float = 1e-3,
    seed: int = 0,
    with_oi=True,
    modality: dict | None = None,
    obs: ObsSet | None = None,
) -> Dataset:
    """Cut ``window``-long windows centred at ``centers`` out of a simulated field.

    Observations are drawn once over the full field (track mask by default),
    so overlapping windows share their observations; pass ``obs`` to use
    existing full-field observations instead.  ``with_oi`` is a bool or a
    collection of centres that get an exact OI reference.
    """
    truth = np.asarray(getattr(truth, "values", truth), dtype=np.float64)
    nt = truth.shape[0]
    half = window // 2
    if obs is None:
        mask = track_mask(truth.shape) if mask is None else np.asarray(mask, dtype=bool)
        full = observe(truth, mask, sigma2, seed)
    elif obs.shape != truth.shape:
        raise ValueError(f"observations {obs.shape} do not match the field {truth.shape}")
    else:
        full = obs
    z_full = None
    if modality is not None:
        z_full = synthetic_modality(truth, seed=seed + 1, **modality)
    cache = OICache(precision) if (with_oi is not False and precision is not None) else None
    oi_set = set(centers) if with_oi is True else set(with_oi or ())
    samples = {}
    for c in centers:
        lo, hi = c - half, c - half + window
        if lo < 0 or hi > nt:
            raise ValueError(f"window centred at {c} leaves the simulated range [0, {nt})")
        obs = full.window(lo, hi)
        x_oi = cache.solve(obs) if (cache is not None and c in oi_set) else None
        z = z_full[lo:hi] if z_full is not None else None
        samples[c] = Sample(c, truth[lo:hi], obs, x_oi, z)
    return Dataset(samples, window, precision)


# ---------------------------------------------------------------------------
# losses


def _const(a) -> Tensor:
    return Tensor._wrap(np.asarray(a, dtype=np.float64))


def loss_l1(x_hat: Tensor, truth) -> Tensor:
    """``sum ||x - x_hat||^2``."""
    return sumsq(sub(x_hat, _const(truth)))


def loss_l2(x_hat: Tensor, x_oi) -> Tensor:
    """``sum ||x_oi - x_hat||^2``."""
    return sumsq(sub(x_hat, _const(x_oi)))


def loss_l3(x_hat: Tensor, obs: ObsSet, q: SparseSym) -> Tensor:
    """Exact OI cost with zero mean, summed over a batch."""
    m = _const(obs.mask.astype(np.float64))
    data = mul(1.0 / obs.sigma2, sumsq(sub(mul(x_hat, m), _const(obs.values))))
    return add(data, inner(x_hat, sparse_apply(x_hat, q.matrix, ndim=3)))


def training_loss(kind: str, x_hat: Tensor, batch: Batch, q: SparseSym | None) -> Tensor:
    if kind == "l1":
        return loss_l1(x_hat, batch.truth)
    if kind == "l2":
        if batch.x_oi is None:
            raise ValueError("loss l2 needs OI references in the dataset")
        return loss_l2(x_hat, batch.x_oi)
    if kind == "l3":
        if q is None:
            raise ValueError("loss l3 needs the prior precision")
        return loss_l3(x_hat, batch.obs, q)
    raise ValueError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    best_epoch: int = -1

    def history_csv(self, path, timing: bool = False) -> None:
        """Per-epoch losses; the ``seconds`` column only with ``timing``."""
        cols = ("epoch", "train_loss", "val_loss") + (("seconds",) if timing else ())
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.history:
                vals = [row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])]
                if timing:
                    vals.append(f"{row['seconds']:.3f}")
                w.writerow(vals)


def trainable(model: SolverModel, cost: VarCost, train_prior: bool = True) -> dict:
    params = {f"solver.{k}": v for k, v in model.parameters().items()}
    if train_prior:
        params.update({f"cost.{k}": v for k, v in cost.parameters().items()})
    return params


def _stack_batches(parts: list) -> Batch:
    def cat(xs):
        return None if any(x is None for x in xs) else np.concatenate(xs)

    obs = ObsSet(cat([p.obs.mask for p in parts]), cat([p.obs.values for p in parts]), parts[0].obs.sigma2)
    return Batch(cat([p.truth for p in parts]), obs, cat([p.x_oi for p in parts]),
                 cat([p.z for p in parts]), [c for p in parts for c in p.centers])


def _load(model: SolverModel, cost: VarCost, params: dict) -> None:
    model.load({k[7:]: v for k, v in params.items() if k.startswith("solver.")})
    cost.load({k[5:]: v for k, v in params.items() if k.startswith("cost.")})


def validation_loss(config: TrainConfig, dataset: Dataset, model: SolverModel, cost: VarCost,
                    centers: list) -> float:
    """Training loss per window on ``centers``, solving from the zero-filled state."""
    solver = model.with_iterations(config.unroll)
    total = 0.0
    for i in range(0, len(centers), config.batch_size):
        b = dataset.batch(centers[i:i + config.batch_size])
        x, _ = solve(solver, cost, b.obs, z=b.z, record=False)
        with no_record():
            total += training_loss(config.loss, _const(x), b, dataset.precision).item()
    return total / len(centers)


def train(config: TrainConfig, dataset: Dataset, model: SolverModel, cost: VarCost) -> TrainResult:
    """Adam on the chosen loss through ``config.unroll`` differentiable solver iterations.

    Initial states alternate by epoch between the zero-filled field (even
    epochs) and the detached output of the previous epoch's solve of the same
    window (odd epochs).  With ``config.augment`` every epoch also visits each
    training window under the listed grid symmetries, which is only sound for
    isotropic stationary fields on square grids.  The parameters of the epoch
    with the lowest validation loss are loaded into ``model`` and ``cost`` and
    returned.
    """
    config.validate()
    if config.loss in ("l2", "l3") and dataset.precision is None:
        raise ValueError(f"loss {config.loss} requires the dataset precision")
    rng = np.random.default_rng(config.seed)
    train_c = dataset.centers(config.train_range)
    val_c = dataset.centers(config.val_range)
    shape = dataset.samples[train_c[0]].truth.shape
    if "transpose" in config.augment and shape[1] != shape[2]:
        raise ValueError(f"transpose augmentation needs a square grid, got {shape[1:]}")
    items = [(c, v) for c in train_c for v in _variants(config.augment)]
    params = trainable(model, cost, config.train_prior)
    solver = model.with_iterations(config.unroll)
    adam = AdamState(config.lr, config.beta1, config.beta2, config.eps)
    best = {k: v for k, v in params.items()}
    result = TrainResult(best)
    if config.epochs == 0:
        return result
    best_val = np.inf
    previous: dict = {}
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = [items[i] for i in rng.permutation(len(items))]
        running = 0.0
        for i in range(0, len(order), config.batch_size):
            chunk = order[i:i + config.batch_size]
            centers = [c for c, _ in chunk]
            if len({v for _, v in chunk}) == 1:
                b = transform_batch(dataset.batch(centers), chunk[0][1])
            else:
                parts = [transform_batch(dataset.batch([c]), v) for c, v in chunk]
                b = _stack_batches(parts)
            x0 = init_state(b.obs)
            if config.init_policy == "alternate" and epoch % 2 == 1:
                x0 = np.stack([previous.get(key, x0[j]) for j, key in enumerate(chunk)])
            try:
                # overflow surfaces as NonFiniteError below, so numpy need not warn
                with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                    x_hat = unroll(solver, cost, b.obs, x0, b.z)
                    loss = training_loss(config.loss, x_hat, b, dataset.precision)
                names = list(params)
                grads = dict(zip(names, grad(loss, [params[n] for n in names], tape)))
            except (NonFiniteError, SolverDivergedError) as exc:
                raise TrainingError(f"epoch {epoch}, windows {centers}: {exc}") from None
            if not all(np.isfinite(g.data).all() for g in grads.values()):
                raise TrainingError(f"epoch {epoch}, windows {centers}: non-finite gradient")
            for j, key in enumerate(chunk):
                previous[key] = x_hat.data[j].copy()
            running += loss.item()
            params = adam_update(adam, params, grads)
            solver.load({k[7:]: v for k, v in params.items() if k.startswith("solver.")})
            _load(model, cost, params)
        val = validation_loss(config, dataset, model, cost, val_c)
        if not np.isfinite(val):
            raise TrainingError(f"epoch {epoch}: non-finite validation loss")
        row = {"epoch": epoch, "train_loss": running / len(order), "val_loss": val,
               "seconds": time.perf_counter() - t0}
        result.history.append(row)
        log.info("epoch %d train %.5g val %.5g (%.1fs)", epoch, row["train_loss"], val, row["seconds"])
        if val < best_val:
            best_val, best = val, dict(params)
            result.best_epoch = epoch
    _load(model, cost, best)
    result.params = best
    return result


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Metrics:
    mse_truth: float
    mse_center: float
    oi_score: float
    wall_time: float
    n_windows: int


def evaluate_outputs(outputs: np.ndarray, dataset: Dataset, centers: list, wall_time: float = 0.0) -> Metrics:
    """Metrics of reconstructions ``outputs[i]`` for windows ``centers[i]``.

    ``oi_score`` is the mean exact OI cost under the dataset precision (NaN
    when none is known); ``mse_center`` uses only the middle time step.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    truth = np.stack([dataset.samples[c].truth for c in centers])
    mid = dataset.window // 2
    if dataset.precision is not None:
        scores = [oi_cost(outputs[i], OIProblem(dataset.samples[c].obs, precision=dataset.precision))
                  for i, c in enumerate(centers)]
        oi_score = float(np.mean(scores))
    else:
        oi_score = float("nan")
    return Metrics(
        mse_truth=float(np.mean((outputs - truth) ** 2)),
        mse_center=float(np.mean((outputs[:, mid] - truth[:, mid]) ** 2)),
        oi_score=oi_score,
        wall_time=wall_time,
        n_windows=len(centers),
    )


def run_solver(model: SolverModel, cost: VarCost, dataset: Dataset, centers: list,
               batch_size: int = 8) -> tuple:
    """Solve every window from its zero-filled state; returns ``(outputs, seconds)``."""
    outs = []
    t0 = time.perf_counter()
    for i in range(0, len(centers), batch_size):
        b = dataset.batch(centers[i:i + batch_size])
        x, _ = solve(model, cost, b.obs, z=b.z, record=False)
        outs.append(x)
    return np.concatenate(outs), time.perf_counter() - t0


def evaluate(model: SolverModel, cost: VarCost, dataset: Dataset, centers: list,
             batch_size: int = 8) -> Metrics:
    outputs, seconds = run_solver(model, cost, dataset, centers, batch_size)
    return evaluate_outputs(outputs, dataset, centers, seconds)


# ---------------------------------------------------------------------------
# one-shot learned inverse (no solver iterations)


def train_direct(config: TrainConfig, dataset: Dataset, net) -> TrainResult:
    """Fit ``net(zero-filled obs) ~ truth`` with Adam on the squared error."""
    rng = np.random.default_rng(config.seed)
    train_c = dataset.centers(config.train_range)
    val_c = dataset.centers(config.val_range)
    params = dict(net.parameters())
    adam = AdamState(config.lr, config.beta1, config.beta2, config.eps)
    result = TrainResult(dict(params))
    best_val = np.inf
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = [train_c[i] for i in rng.permutation(len(train_c))]
        running = 0.0
        for i in range(0, len(order), config.batch_size):
            b = dataset.batch(order[i:i + config.batch_size])
            try:
                with Tape() as tape:
                    loss = loss_l1(net(_const(init_state(b.obs))), b.truth)
                names = list(params)
                grads = dict(zip(names, grad(loss, [params[n] for n in names], tape)))
            except NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            running += loss.item()
            params = adam_update(adam, params, grads)
            net.load(params)
        outputs, _ = run_direct(net, dataset, val_c)
        val = float(np.sum((outputs - np.stack([dataset.samples[c].truth for c in val_c])) ** 2)) / len(val_c)
        result.history.append({"epoch": epoch, "train_loss": running / len(order), "val_loss": val,
                               "seconds": time.perf_counter() - t0})
        if val < best_val:
            best_val, result.params, result.best_epoch = val, dict(params), epoch
    net.load(result.params)
    return result


def run_direct(net, dataset: Dataset, centers: list, batch_size: int = 8) -> tuple:
    outs = []
    t0 = time.perf_counter()
    with no_record():
        for i in range(0, len(centers), batch_size):
            b = dataset.batch(centers[i:i + batch_size])
            outs.append(net(_const(init_state(b.obs))).data)
    return np.concatenate(outs), time.perf_counter() - t0

"""Iterative gradient-based solver with a learned convolutional-LSTM direction.

Each iteration takes the gradient ``g`` of the variational cost and steps

    x <- x - a(k) * (w(k) * g + (1 - w(k)) * G(g))

where ``G`` is a ConvLSTM followed by a 1x1 projection back to the state
channels, ``a(k) = nu * K0 / (K0 + k)`` and ``w(k) = tanh(alpha * (k - K1))``.
The LSTM state starts at zero for every solve.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ContractError,
    ConvLSTMCell,
    DimensionError,
    NonFiniteError,
    Tape,
    Tensor,
    add,
    conv2d,
    grad,
    lstm_step,
    mul,
    no_record,
    sub,
)
from .autodiff.tensor import current_tape
from .observation import ObsSet
from .variational import VarCost, evaluate_cost

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "j_phi", "grad_norm", "mse_truth", "mse_oi")


class SolverDivergedError(FloatingPointError):
    """Non-finite values appeared during a solve."""

    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"non-finite values at solver iteration {iteration}{': ' + detail if detail else ''}")
        self.iteration = iteration


@dataclass(frozen=True)
class Schedule:
    nu: float = 0.05
    k0: int = 50
    alpha: float = 0.1
    k1: int = 10

    def __post_init__(self):
        if self.nu <= 0 or self.k0 < 1 or self.alpha <= 0 or self.k1 < 1:
            raise ValueError("schedule needs nu > 0, K0 >= 1, alpha > 0, K1 >= 1")


def schedule_eval(s: Schedule, k: int) -> tuple:
    """Step size ``a(k)`` and gradient weight ``w(k)`` at iteration ``k``."""
    return s.nu * s.k0 / (s.k0 + k), math.tanh(s.alpha * (k - s.k1))


@dataclass(eq=False)
class SolverModel:
    cell: ConvLSTMCell
    projection: Tensor
    schedule: Schedule = field(default_factory=Schedule)
    iterations: int = 20
    pure_gradient: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iteration budget must be >= 1")
        p = self.projection
        if p.ndim != 4 or p.shape[1] != self.cell.hidden_channels or p.shape[-2:] != (1, 1):
            raise DimensionError(f"projection must be [channels, hidden, 1, 1], got {p.shape}")
        if p.shape[0] != self.cell.in_channels:
            raise DimensionError("projection must map back to the gradient channels")

    @classmethod
    def create(
        cls,
        channels: int,
        hidden: int = 16,
        kernel_size: int = 3,
        seed: int = 0,
        schedule: Schedule | None = None,
        iterations: int = 20,
        projection_scale: float = 1.0,
    ) -> "SolverModel":
        rng = np.random.default_rng(seed)
        cell = ConvLSTMCell.create(channels, hidden, kernel_size, rng=rng)
        bound = projection_scale / np.sqrt(hidden)
        proj = Tensor(rng.uniform(-bound, bound, (channels, hidden, 1, 1)), True)
        return cls(cell, proj, schedule or Schedule(), iterations)

    @classmethod
    def gradient_descent(cls, channels: int, schedule: Schedule | None = None,
                         iterations: int = 20) -> "SolverModel":
        """Untrained solver that follows the plain gradient (``w = 1``, ``G = 0``)."""
        cell = ConvLSTMCell.zeros(channels, 1, 1)
        proj = Tensor(np.zeros((channels, 1, 1, 1)), True)
        return cls(cell, proj, schedule or Schedule(), iterations, pure_gradient=True)

    @property
    def channels(self) -> int:
        return self.cell.in_channels

    def direction_bound(self) -> float:
        """Sup-norm bound on ``G``: hidden states lie in (-1, 1)."""
        return float(np.abs(self.projection.data).sum(axis=(1, 2, 3)).max())

    def parameters(self) -> dict:
        out = {f"cell.{k}": v for k, v in self.cell.parameters().items()}
        out["projection"] = self.projection
        return out

    def load(self, params: dict) -> None:
        cell = {k[5:]: v for k, v in params.items() if k.startswith("cell.")}
        self.cell.load(cell)
        if "projection" in params:
            self.projection = params["projection"]

    def with_iterations(self, k: int) -> "SolverModel":
        return SolverModel(self.cell, self.projection, self.schedule, k, self.pure_gradient)


@dataclass
class SolveTrace:
    """Per-iteration diagnostics; row ``k`` describes the iterate after ``k`` updates."""

    j_phi: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    mse_truth: list = field(default_factory=list)
    mse_oi: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.j_phi)

    def rows(self) -> list:
        out = []
        for k in range(len(self)):
            out.append((
                k + 1,
                self.j_phi[k],
                self.grad_norm[k],
                self.mse_truth[k] if self.mse_truth else "",
                self.mse_oi[k] if self.mse_oi else "",
            ))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [r if isinstance(r, str) else repr(float(r)) for r in row[1:]])


def init_state(obs: ObsSet) -> np.ndarray:
    """Zero-filled initialization: observed values on the mask, 0 elsewhere."""
    return np.where(obs.mask, obs.values, 0.0)


def _direction(model: SolverModel, g: Tensor, hidden, state):
    hidden, state = lstm_step(model.cell, g, hidden, state)
    return conv2d(hidden, model.projection), hidden, state


def _mse(a: np.ndarray, b) -> float:
    return float(np.mean((a - b) ** 2))


def _cost_and_grad(x: np.ndarray, obs, cost, z):
    with Tape():
        xt = Tensor(x, requires_grad=True)
        j = evaluate_cost(xt, obs, cost, z)
        (g,) = grad(j, [xt])
    return j.item(), g


def solve(
    model: SolverModel,
    cost: VarCost,
    obs: ObsSet,
    x0=None,
    z=None,
    truth=None,
    x_oi=None,
    record: bool = True,
) -> tuple:
    """Run exactly ``model.iterations`` updates without building a training graph.

    Returns ``(x, trace)``; ``trace`` is None when ``record`` is False.
    """
    x = init_state(obs) if x0 is None else np.array(getattr(x0, "data", x0), dtype=np.float64)
    if x.shape != obs.shape:
        raise DimensionError(f"initial state {x.shape} does not match observations {obs.shape}")
    trace = SolveTrace() if record else None
    hidden = state = None
    try:
        j_val, g = _cost_and_grad(x, obs, cost, z)
    except NonFiniteError as exc:
        raise SolverDivergedError(0, str(exc)) from None
    for k in range(1, model.iterations + 1):
        a, w = schedule_eval(model.schedule, k)
        try:
            with no_record():
                if model.pure_gradient:
                    step = g.data
                else:
                    if hidden is None:
                        hidden, state = model.cell.zero_state(g.shape)
                    d, hidden, state = _direction(model, g, hidden, state)
                    step = w * g.data + (1.0 - w) * d.data
            with np.errstate(over="ignore", invalid="ignore"):
                x = x - a * step
                if not np.isfinite(x).all():
                    raise SolverDivergedError(k)
                j_val, g = _cost_and_grad(x, obs, cost, z)
        except NonFiniteError as exc:
            raise SolverDivergedError(k, str(exc)) from None
        if record:
            trace.j_phi.append(j_val)
            trace.grad_norm.append(float(np.linalg.norm(g.data)))
            if truth is not None:
                trace.mse_truth.append(_mse(x, truth))
            if x_oi is not None:
                trace.mse_oi.append(_mse(x, x_oi))
    return x, trace


def unroll(model: SolverModel, cost: VarCost, obs: ObsSet, x0=None, z=None) -> Tensor:
    """Differentiable solve; call inside an active :class:`Tape`.

    The initial state enters as a fresh leaf, so no gradient flows into
    whatever produced it.  Gradients of the cost are taken with
    ``create_graph=True`` so the result can be differentiated with respect to
    the solver and prior parameters.
    """
    if current_tape() is None:
        raise ContractError("unroll needs an active Tape; use solve() outside training")
    x0 = init_state(obs) if x0 is None else np.array(getattr(x0, "data", x0), dtype=np.float64)
    if x0.shape != obs.shape:
        raise DimensionError(f"initial state {x0.shape} does not match observations {obs.shape}")
    x = Tensor(x0, requires_grad=True)
    hidden = state = None
    for k in range(1, model.iterations + 1):
        a, w = schedule_eval(model.schedule, k)
        try:
            j = evaluate_cost(x, obs, cost, z)
            (g,) = grad(j, [x], create_graph=True)
            if model.pure_gradient:
                step = g
            else:
                if hidden is None:
                    hidden, state = model.cell.zero_state(g.shape)
                d, hidden, state = _direction(model, g, hidden, state)
                step = add(mul(w, g), mul(1.0 - w, d))
            x = sub(x, mul(a, step))
        except NonFiniteError as exc:
            raise SolverDivergedError(k, str(exc)) from None
    return x

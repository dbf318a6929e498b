"""Prior-regularized variational costs and the prior operators they use.

A prior ``Phi`` maps a state window ``[..., T, ny, nx]`` to a state of the
same shape, with time steps acting as convolution channels.  The cost

    j_phi(x) = ||y - H x||^2 + lam * ||x - Phi(x)||^2

is built from tensor operations so it can be differentiated with respect to
the state and, through the solver, with respect to the prior parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    add_bias,
    conv2d,
    exp,
    mul,
    sparse_apply,
    sub,
    sumsq,
    tanh,
)
from .observation import ObsSet
from .oi import precision_sqrt_taps
from .sparse import SparseSym, cholesky

PRIOR_KINDS = ("matrix", "linear_conv", "conv_res")


class ConfigurationError(ValueError):
    """A cost was evaluated without the pieces its mode requires."""


def _param(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class Prior:
    """Base class; subclasses define ``residual`` (``x - Phi(x)``) or ``__call__``."""

    kind = ""

    def __call__(self, x: Tensor) -> Tensor:
        return sub(x, self.residual(x))

    def residual(self, x: Tensor) -> Tensor:
        return sub(x, self(x))

    def parameters(self) -> dict:
        return {}

    def load(self, params: dict) -> None:
        for name, value in params.items():
            setattr(self, name, value)

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.parameters().items()}


@dataclass(eq=False)
class MatrixPrior(Prior):
    """``x - Phi(x) = R (x - mu)`` with a fixed sparse ``R``, ``R^T R = Q``."""

    root: sp.csr_matrix
    mean: np.ndarray | None = None
    kind = "matrix"

    def residual(self, x: Tensor) -> Tensor:
        if self.mean is not None:
            x = sub(x, Tensor._wrap(np.asarray(self.mean, dtype=np.float64)))
        return sparse_apply(x, self.root, ndim=3)

    def arrays(self) -> dict:
        r = self.root.tocsr()
        out = {"indptr": r.indptr, "indices": r.indices, "data": r.data,
               "shape": np.asarray(r.shape)}
        if self.mean is not None:
            out["mean"] = np.asarray(self.mean)
        return out


def make_matrix_prior(q: SparseSym, mean: np.ndarray | None = None) -> MatrixPrior:
    """Prior whose residual norm reproduces the precision: ``||x - Phi x||^2 = x^T Q x``."""
    return MatrixPrior(cholesky(q).sqrt_operator(), mean)


@dataclass(eq=False)
class LinearConvPrior(Prior):
    """``x - Phi(x) = conv(x, kernel)``; linear, with a ``[T, T, k, k]`` kernel."""

    kernel: Tensor
    padding_mode: str = "periodic"
    kind = "linear_conv"

    @classmethod
    def create(cls, channels: int, kernel_size: int = 3, rng=None, scale: float = 0.1,
               padding_mode: str = "periodic") -> "LinearConvPrior":
        rng = np.random.default_rng(0) if rng is None else rng
        k = rng.uniform(-scale, scale, (channels, channels, kernel_size, kernel_size))
        k[:, :, kernel_size // 2, kernel_size // 2] += np.eye(channels)
        return cls(_param(k), padding_mode)

    @classmethod
    def from_precision(cls, q: SparseSym, shape: tuple, radius: int | None = None) -> "LinearConvPrior":
        """Exact square-root kernel of a spatially stationary periodic precision.

        ``shape`` is ``(T, ny, nx)``.  ``radius`` truncates the kernel to
        ``2 * radius + 1`` taps per axis.
        """
        taps = precision_sqrt_taps(q, shape)
        if radius is not None:
            cy, cx = taps.shape[-2] // 2, taps.shape[-1] // 2
            ry, rx = min(radius, cy), min(radius, cx)
            taps = taps[:, :, cy - ry:cy + ry + 1, cx - rx:cx + rx + 1]
        return cls(_param(taps), "periodic")

    def residual(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.padding_mode)

    def parameters(self) -> dict:
        return {"kernel": self.kernel}


@dataclass(eq=False)
class ConvResPrior(Prior):
    """Small residual auto-encoder:

        Phi(x) = conv(x, k_lin) + conv(tanh(conv(x, k1) + b1), k2) + b2
    """

    k_lin: Tensor
    k1: Tensor
    b1: Tensor
    k2: Tensor
    b2: Tensor
    padding_mode: str = "periodic"
    kind = "conv_res"

    @classmethod
    def create(cls, channels: int, hidden: int = 16, kernel_size: int = 3, rng=None,
               scale: float = 1.0, padding_mode: str = "periodic") -> "ConvResPrior":
        rng = np.random.default_rng(0) if rng is None else rng
        k = kernel_size

        def init(shape):
            bound = scale / np.sqrt(shape[1] * k * k)
            return _param(rng.uniform(-bound, bound, shape))

        return cls(
            init((channels, channels, k, k)),
            init((hidden, channels, k, k)),
            _param(np.zeros(hidden)),
            init((channels, hidden, k, k)),
            _param(np.zeros(channels)),
            padding_mode,
        )

    @classmethod
    def zeros(cls, channels: int, hidden: int = 16, kernel_size: int = 3) -> "ConvResPrior":
        k = kernel_size
        return cls(
            _param(np.zeros((channels, channels, k, k))),
            _param(np.zeros((hidden, channels, k, k))),
            _param(np.zeros(hidden)),
            _param(np.zeros((channels, hidden, k, k))),
            _param(np.zeros(channels)),
        )

    def __call__(self, x: Tensor) -> Tensor:
        pm = self.padding_mode
        hidden = tanh(add_bias(conv2d(x, self.k1, pm), self.b1))
        out = add(conv2d(x, self.k_lin, pm), conv2d(hidden, self.k2, pm))
        return add_bias(out, self.b2)

    def parameters(self) -> dict:
        return {"k_lin": self.k_lin, "k1": self.k1, "b1": self.b1, "k2": self.k2, "b2": self.b2}


@dataclass(eq=False)
class ConvNet:
    """Two convolution layers with a tanh in between (``g`` and ``h`` maps)."""

    k1: Tensor
    b1: Tensor
    k2: Tensor
    b2: Tensor
    padding_mode: str = "periodic"

    @classmethod
    def create(cls, in_channels: int, out_channels: int = 8, hidden: int = 8,
               kernel_size: int = 3, rng=None) -> "ConvNet":
        rng = np.random.default_rng(0) if rng is None else rng
        k = kernel_size
        b1 = 1.0 / np.sqrt(in_channels * k * k)
        b2 = 1.0 / np.sqrt(hidden * k * k)
        return cls(
            _param(rng.uniform(-b1, b1, (hidden, in_channels, k, k))),
            _param(np.zeros(hidden)),
            _param(rng.uniform(-b2, b2, (out_channels, hidden, k, k))),
            _param(np.zeros(out_channels)),
        )

    def __call__(self, x: Tensor) -> Tensor:
        hidden = tanh(add_bias(conv2d(x, self.k1, self.padding_mode), self.b1))
        return add_bias(conv2d(hidden, self.k2, self.padding_mode), self.b2)

    def parameters(self) -> dict:
        return {"k1": self.k1, "b1": self.b1, "k2": self.k2, "b2": self.b2}

    def load(self, params: dict) -> None:
        for name, value in params.items():
            setattr(self, name, value)


class IdentityNet:
    def __call__(self, x: Tensor) -> Tensor:
        return x

    def parameters(self) -> dict:
        return {}

    def load(self, params: dict) -> None:
        if params:
            raise ValueError("identity map has no parameters")


@dataclass(eq=False)
class Weight:
    """Non-negative scalar weight, fixed or trained as ``exp(log_value)``."""

    value: float | None = None
    log_value: Tensor | None = None

    @classmethod
    def trainable(cls, value: float) -> "Weight":
        if value <= 0:
            raise ValueError("a trainable weight must start positive")
        return cls(log_value=_param(np.log(value)))

    def tensor(self) -> Tensor | float:
        if self.log_value is not None:
            return exp(self.log_value)
        if self.value is None or self.value < 0:
            raise ConfigurationError("weight is unset or negative")
        return float(self.value)

    def current(self) -> float:
        t = self.tensor()
        return t.item() if isinstance(t, Tensor) else t


@dataclass(eq=False)
class Multimodal:
    """Weights and maps of the cost term coupling the state to a second modality."""

    lam1: Weight = field(default_factory=lambda: Weight(1.0))
    lam2: Weight = field(default_factory=lambda: Weight(1.0))
    lam3: Weight | None = None
    g: object = None
    h: object = None

    def __post_init__(self):
        if self.g is None or self.h is None:
            raise ConfigurationError("multimodal cost needs both g and h maps")


@dataclass(eq=False)
class VarCost:
    """Prior plus weight ``lam``; ``lam`` None means ``sigma2`` of the observations."""

    prior: Prior
    lam: Weight | None = None
    multimodal: Multimodal | None = None

    def weight(self, obs: ObsSet):
        if self.lam is None:
            if obs.sigma2 <= 0:
                raise ConfigurationError("lam defaults to sigma2, which must be positive")
            return float(obs.sigma2)
        w = self.lam.tensor()
        if not isinstance(w, Tensor) and w <= 0:
            raise ConfigurationError("lam must be positive")
        return w

    def parameters(self) -> dict:
        out = {f"prior.{k}": v for k, v in self.prior.parameters().items()}
        if self.lam is not None and self.lam.log_value is not None:
            out["log_lam"] = self.lam.log_value
        mm = self.multimodal
        if mm is not None:
            for name in ("lam1", "lam2", "lam3"):
                w = getattr(mm, name)
                if w is not None and w.log_value is not None:
                    out[f"mm.log_{name}"] = w.log_value
            out.update({f"mm.g.{k}": v for k, v in mm.g.parameters().items()})
            out.update({f"mm.h.{k}": v for k, v in mm.h.parameters().items()})
        return out

    def load(self, params: dict) -> None:
        groups: dict = {}
        for name, value in params.items():
            head, _, rest = name.partition(".")
            groups.setdefault(head, {})[rest] = value
        if "prior" in groups:
            self.prior.load(groups["prior"])
        if "log_lam" in groups:
            self.lam.log_value = groups["log_lam"][""]
        if "mm" in groups:
            mm = self.multimodal
            sub_g = {k[2:]: v for k, v in groups["mm"].items() if k.startswith("g.")}
            sub_h = {k[2:]: v for k, v in groups["mm"].items() if k.startswith("h.")}
            mm.g.load(sub_g)
            mm.h.load(sub_h)
            for name in ("lam1", "lam2", "lam3"):
                key = f"log_{name}"
                if key in groups["mm"]:
                    getattr(mm, name).log_value = groups["mm"][key]


def _check(x: Tensor, obs: ObsSet) -> None:
    if x.shape != obs.shape:
        raise DimensionError(f"state {x.shape} does not match observations {obs.shape}")
    if x.ndim not in (3, 4):
        raise DimensionError("state must be [T, ny, nx] or [batch, T, ny, nx]")


def data_misfit(x: Tensor, obs: ObsSet) -> Tensor:
    """``||y - H x||^2`` with ``H`` as a mask multiply."""
    m = Tensor._wrap(obs.mask.astype(np.float64))
    return sumsq(sub(mul(x, m), Tensor._wrap(np.asarray(obs.values, dtype=np.float64))))


def j_phi(x: Tensor, obs: ObsSet, cost: VarCost) -> Tensor:
    """``||y - H x||^2 + lam * ||x - Phi(x)||^2``."""
    _check(x, obs)
    return add(data_misfit(x, obs), mul(cost.weight(obs), sumsq(cost.prior.residual(x))))


def j_multimodal(x: Tensor, obs: ObsSet, z, cost: VarCost) -> Tensor:
    """``lam1 ||y - H x||^2 + lam2 ||g(z) - h(x)||^2 + lam3 ||x - Phi(x)||^2``.

    ``lam3`` defaults to ``lam1`` times the unimodal weight.
    """
    mm = cost.multimodal
    if mm is None:
        raise ConfigurationError("cost has no multimodal block")
    if z is None:
        raise ConfigurationError("multimodal cost needs the second modality z")
    _check(x, obs)
    z = z if isinstance(z, Tensor) else Tensor._wrap(np.asarray(z, dtype=np.float64))
    if z.shape != x.shape:
        raise DimensionError(f"modality {z.shape} does not match state {x.shape}")
    lam1 = mm.lam1.tensor()
    lam3 = mul(lam1, cost.weight(obs)) if mm.lam3 is None else mm.lam3.tensor()
    terms = add(
        mul(lam1, data_misfit(x, obs)),
        mul(mm.lam2.tensor(), sumsq(sub(mm.g(z), mm.h(x)))),
    )
    return add(terms, mul(lam3, sumsq(cost.prior.residual(x))))


def evaluate_cost(x: Tensor, obs: ObsSet, cost: VarCost, z=None) -> Tensor:
    """Dispatch to the multimodal or unimodal cost."""
    if cost.multimodal is not None:
        return j_multimodal(x, obs, z, cost)
    return j_phi(x, obs, cost)


def prior_from_arrays(kind: str, arrays: dict, meta: dict | None = None) -> Prior:
    meta = meta or {}
    if kind == "matrix":
        r = sp.csr_matrix((arrays["data"], arrays["indices"], arrays["indptr"]),
                          shape=tuple(int(s) for s in arrays["shape"]))
        return MatrixPrior(r, arrays.get("mean"))
    if kind == "linear_conv":
        return LinearConvPrior(_param(arrays["kernel"]), meta.get("padding_mode", "periodic"))
    if kind == "conv_res":
        names = ("k_lin", "k1", "b1", "k2", "b2")
        return ConvResPrior(*(_param(arrays[n]) for n in names),
                            padding_mode=meta.get("padding_mode", "periodic"))
    raise ValueError(f"unknown prior kind {kind!r}; expected one of {PRIOR_KINDS}")

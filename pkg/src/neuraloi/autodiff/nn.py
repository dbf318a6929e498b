"""Convolution, padding, sparse products and the convolutional LSTM cell."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    DimensionError,
    Tensor,
    add,
    make_op,
    mul,
    reshape,
    sigmoid,
    tanh,
)

PADDING_MODES = ("periodic", "reflect", "zero")


# ---------------------------------------------------------------------------
# padding as a two-sided linear map on the spatial axes


def _pad_matrix(n: int, p: int, mode: str) -> np.ndarray:
    """(n + 2p) x n selection matrix realising one-axis padding."""
    if mode == "periodic":
        idx = np.arange(-p, n + p) % n
    elif mode == "reflect":
        if p >= n:
            raise DimensionError(f"reflect padding {p} needs more than {n} cells")
        idx = np.pad(np.arange(n), p, mode="reflect")
    elif mode == "zero":
        idx = np.arange(-p, n + p)
    else:
        raise ValueError(f"unknown padding mode {mode!r}; expected one of {PADDING_MODES}")
    m = np.zeros((n + 2 * p, n))
    ok = (idx >= 0) & (idx < n)
    m[np.nonzero(ok)[0], idx[ok]] = 1.0
    return m


def sandwich(x: Tensor, my: np.ndarray, mx: np.ndarray) -> Tensor:
    """``my @ x @ mx.T`` over the last two axes (constant matrices)."""
    out = np.matmul(np.matmul(my, x.data), mx.T)

    def vjp(g, needs):
        return (sandwich(g, my.T, mx.T),)

    return make_op("sandwich", out, (x,), vjp)


def pad2d(x: Tensor, py: int, px: int, mode: str = "periodic") -> Tensor:
    if py == 0 and px == 0:
        return x
    ny, nx = x.shape[-2:]
    return sandwich(x, _pad_matrix(ny, py, mode), _pad_matrix(nx, px, mode))


# ---------------------------------------------------------------------------
# valid cross-correlation and its two adjoints


def _columns(xp: np.ndarray, kshape: tuple) -> np.ndarray:
    """im2col: ``[b, c * kh * kw, ny * nx]`` patches of a padded input."""
    b, c = xp.shape[:2]
    kh, kw = kshape
    ny, nx = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    win = sliding_window_view(xp, kshape, axis=(-2, -1))
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ny * nx)


def _corr(xp: np.ndarray, k: np.ndarray) -> np.ndarray:
    b = xp.shape[0]
    o, _, kh, kw = k.shape
    ny, nx = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    out = np.matmul(k.reshape(o, -1), _columns(xp, (kh, kw)))
    return out.reshape(b, o, ny, nx)


def _corr_kernel_grad(xp: np.ndarray, g: np.ndarray, kshape: tuple) -> np.ndarray:
    b, o = g.shape[:2]
    cols = _columns(xp, kshape)
    gk = np.matmul(g.reshape(b, o, -1), cols.transpose(0, 2, 1)).sum(axis=0)
    return gk.reshape(o, xp.shape[1], *kshape)


def correlate_valid(xp: Tensor, k: Tensor) -> Tensor:
    """out[b,o,y,x] = sum_{c,i,j} k[o,c,i,j] * xp[b,c,y+i,x+j]  (input is 4-D)."""
    if xp.ndim != 4 or k.ndim != 4:
        raise DimensionError("correlate_valid expects 4-D input and kernel")
    if xp.shape[1] != k.shape[1]:
        raise DimensionError(f"input has {xp.shape[1]} channels, kernel expects {k.shape[1]}")
    kh, kw = k.shape[-2:]

    def vjp(g, needs):
        gx = correlate_input_grad(g, k) if needs[0] else None
        gk = correlate_kernel_grad(xp, g, (kh, kw)) if needs[1] else None
        return gx, gk

    return make_op("correlate", _corr(xp.data, k.data), (xp, k), vjp)


def flip_transpose(k: Tensor) -> Tensor:
    """Swap in/out channels and rotate the spatial taps by 180 degrees."""
    out = np.ascontiguousarray(k.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return make_op("flip_transpose", out, (k,), lambda g, needs: (flip_transpose(g),))


def correlate_input_grad(g: Tensor, k: Tensor) -> Tensor:
    kh, kw = k.shape[-2:]
    return correlate_valid(pad2d(g, kh - 1, kw - 1, "zero"), flip_transpose(k))


def correlate_kernel_grad(xp: Tensor, g: Tensor, kshape: tuple) -> Tensor:
    def vjp(u, needs):
        gx = correlate_input_grad(g, u) if needs[0] else None
        gg = correlate_valid(xp, u) if needs[1] else None
        return gx, gg

    return make_op("correlate_kgrad", _corr_kernel_grad(xp.data, g.data, kshape), (xp, g), vjp)


def conv2d(x: Tensor, kernel: Tensor, padding_mode: str = "periodic") -> Tensor:
    """'Same' 2-D convolution (cross-correlation convention) with channels.

    ``x`` is ``[c_in, ny, nx]`` or batched ``[b, c_in, ny, nx]``; ``kernel`` is
    ``[c_out, c_in, kh, kw]`` with odd ``kh`` and ``kw``.
    """
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be 4-D, got shape {kernel.shape}")
    kh, kw = kernel.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel taps must be odd, got {kh}x{kw}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"input must be [c,ny,nx] or [b,c,ny,nx], got {x.shape}")
    if x.shape[-3] != kernel.shape[1]:
        raise DimensionError(
            f"input has {x.shape[-3]} channels, kernel expects {kernel.shape[1]}"
        )
    batched = x.ndim == 4
    xb = x if batched else reshape(x, (1,) + x.shape)
    out = correlate_valid(pad2d(xb, kh // 2, kw // 2, padding_mode), kernel)
    return out if batched else reshape(out, out.shape[1:])


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias ``[c]`` to ``[..., c, ny, nx]``."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[-3]:
        raise DimensionError(f"bias {bias.shape} does not match channels of {x.shape}")
    return add(x, reshape(bias, (bias.shape[0], 1, 1)))


# ---------------------------------------------------------------------------
# sparse constant operator on flattened trailing axes


def sparse_apply(x: Tensor, mat, ndim: int = 3) -> Tensor:
    """Apply constant sparse matrix ``mat`` to the last ``ndim`` axes of ``x``."""
    lead = x.shape[: x.ndim - ndim]
    n = int(np.prod(x.shape[x.ndim - ndim:]))
    if mat.shape != (n, n):
        raise DimensionError(f"operator {mat.shape} does not act on {n} unknowns")
    flat = x.data.reshape(-1, n)
    out = np.asarray((mat @ flat.T).T).reshape(x.shape)
    mat_t = mat.T.tocsr()

    def vjp(g, needs):
        return (sparse_apply(g, mat_t, ndim),)

    return make_op("sparse_apply", out, (x,), vjp)


# ---------------------------------------------------------------------------
# convolutional LSTM cell


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


@dataclass(eq=False)
class ConvLSTMCell:
    """Convolutional LSTM cell; gate order in the stacked kernels is i, f, o, c.

    The input-to-gate and hidden-to-gate convolutions are kept separate, which
    is equivalent to convolving the channel-stacked ``[input, hidden]``.
    """

    w_input: Tensor
    w_hidden: Tensor
    bias: Tensor
    padding_mode: str = "periodic"

    @classmethod
    def create(
        cls,
        in_channels: int,
        hidden_channels: int,
        kernel_size: int = 3,
        rng: np.random.Generator | None = None,
        scale: float = 1.0,
        padding_mode: str = "periodic",
    ) -> "ConvLSTMCell":
        if kernel_size % 2 == 0:
            raise DimensionError("kernel_size must be odd")
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = (in_channels + hidden_channels) * kernel_size**2
        bound = scale / np.sqrt(fan_in)
        k = kernel_size
        return cls(
            Tensor(_uniform(rng, (4 * hidden_channels, in_channels, k, k), bound), True),
            Tensor(_uniform(rng, (4 * hidden_channels, hidden_channels, k, k), bound), True),
            Tensor(np.zeros(4 * hidden_channels), True),
            padding_mode,
        )

    @classmethod
    def zeros(cls, in_channels: int, hidden_channels: int, kernel_size: int = 3) -> "ConvLSTMCell":
        k = kernel_size
        return cls(
            Tensor(np.zeros((4 * hidden_channels, in_channels, k, k)), True),
            Tensor(np.zeros((4 * hidden_channels, hidden_channels, k, k)), True),
            Tensor(np.zeros(4 * hidden_channels), True),
        )

    @property
    def hidden_channels(self) -> int:
        return self.w_hidden.shape[1]

    @property
    def in_channels(self) -> int:
        return self.w_input.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.w_input.shape[-1]

    def parameters(self) -> dict:
        return {"w_input": self.w_input, "w_hidden": self.w_hidden, "bias": self.bias}

    def load(self, params: dict) -> None:
        for name, value in params.items():
            setattr(self, name, value)

    def zero_state(self, like_shape: tuple) -> tuple:
        shape = like_shape[:-3] + (self.hidden_channels,) + like_shape[-2:]
        return Tensor._wrap(np.zeros(shape)), Tensor._wrap(np.zeros(shape))


def lstm_step(cell: ConvLSTMCell, inp: Tensor, hidden: Tensor, state: Tensor) -> tuple:
    """One ConvLSTM update; returns ``(hidden', state')`` with ``|hidden'| < 1``."""
    if inp.shape[-3] != cell.in_channels:
        raise DimensionError(f"input has {inp.shape[-3]} channels, cell expects {cell.in_channels}")
    if hidden.shape[-3] != cell.hidden_channels or state.shape != hidden.shape:
        raise DimensionError("hidden/cell state channel mismatch")
    gates = add(
        conv2d(inp, cell.w_input, cell.padding_mode),
        conv2d(hidden, cell.w_hidden, cell.padding_mode),
    )
    gates = add_bias(gates, cell.bias)
    ch = cell.hidden_channels
    lead = (slice(None),) * (gates.ndim - 3)
    i = sigmoid(gates[lead + (slice(0, ch),)])
    f = sigmoid(gates[lead + (slice(ch, 2 * ch),)])
    o = sigmoid(gates[lead + (slice(2 * ch, 3 * ch),)])
    c = tanh(gates[lead + (slice(3 * ch, 4 * ch),)])
    new_state = add(mul(f, state), mul(i, c))
    new_hidden = mul(o, tanh(new_state))
    return new_hidden, new_state


__all__ = [
    "ConvLSTMCell",
    "PADDING_MODES",
    "add_bias",
    "conv2d",
    "correlate_valid",
    "lstm_step",
    "pad2d",
    "sparse_apply",
]

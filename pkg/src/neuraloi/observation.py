"""Observation masks, noisy observations and the observation operator."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_SIGMA2 = 1e-3


@dataclass(frozen=True, eq=False)
class ObsSet:
    """Gappy observations: ``values`` is meaningful only where ``mask`` is set.

    Off-mask entries of ``values`` are stored as 0 so the array doubles as the
    zero-filled field ``H^T y``.
    """

    mask: np.ndarray
    values: np.ndarray
    sigma2: float = DEFAULT_SIGMA2

    def __post_init__(self):
        if self.mask.shape != self.values.shape:
            raise ValueError(f"mask {self.mask.shape} and values {self.values.shape} differ")
        if self.mask.dtype != bool:
            raise ValueError("mask must be boolean")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")
        if not np.isfinite(self.values[self.mask]).all():
            raise ValueError("observed values must be finite")
        if np.any(self.values[~self.mask] != 0):
            raise ValueError("off-mask values must be zero")

    @property
    def shape(self) -> tuple:
        return self.mask.shape

    @property
    def n_obs(self) -> int:
        return int(self.mask.sum())

    @property
    def fraction(self) -> float:
        return self.n_obs / self.mask.size

    def vector(self) -> np.ndarray:
        """Observed values in row-major mask order (the vector ``y``)."""
        return self.values[self.mask]

    def window(self, start: int, stop: int) -> "ObsSet":
        return ObsSet(self.mask[start:stop], self.values[start:stop], self.sigma2)


def track_mask(
    shape: tuple,
    spacing: int = 10,
    angle: float = 45.0,
    phase: int = 0,
    phase_step: int = 1,
) -> np.ndarray:
    """One-cell-wide parallel tracks every ``spacing`` cells, drifting in time.

    Cell ``(t, i, j)`` is observed when ``j + round(i tan(angle)) + phase +
    t * phase_step`` is divisible by ``spacing``; ``angle`` is measured from
    the y axis and must lie in (-90, 90) degrees.
    """
    nt, ny, nx = shape
    if spacing < 1:
        raise ValueError("track spacing must be >= 1")
    if not -90.0 < angle < 90.0:
        raise ValueError("angle must lie strictly between -90 and 90 degrees")
    shear = np.rint(np.arange(ny) * np.tan(np.deg2rad(angle))).astype(np.int64)
    coord = np.arange(nx)[None, :] + shear[:, None]
    t = np.arange(nt)[:, None, None]
    mask = (coord[None] + phase + t * phase_step) % spacing == 0
    log.debug("track mask spacing=%d observed fraction %.4f", spacing, mask.mean())
    return mask


def random_mask(shape: tuple, fraction: float, seed: int = 0) -> np.ndarray:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    return np.random.default_rng(seed).random(shape) < fraction


def observe(truth, mask: np.ndarray, sigma2: float = DEFAULT_SIGMA2, seed: int = 0) -> ObsSet:
    """``y = truth + N(0, sigma2)`` on the mask."""
    truth = np.asarray(getattr(truth, "values", truth), dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if truth.shape != mask.shape:
        raise ValueError(f"truth {truth.shape} and mask {mask.shape} differ")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(truth.shape) * np.sqrt(sigma2)
    values = np.where(mask, truth + noise, 0.0)
    return ObsSet(mask, values, float(sigma2))


def apply_H(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    x = np.asarray(getattr(x, "values", x))
    if x.shape != mask.shape:
        raise ValueError(f"state {x.shape} and mask {mask.shape} differ")
    return x[mask]


def apply_H_transpose(v: np.ndarray, mask: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (int(mask.sum()),):
        raise ValueError(f"expected {int(mask.sum())} observations, got shape {v.shape}")
    out = np.zeros(mask.shape)
    out[mask] = v
    return out

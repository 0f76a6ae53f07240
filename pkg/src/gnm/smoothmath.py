"""Smooth kernels used by the navigation model.

Every function accepts scalars or numpy arrays and is pure. Scalar input
gives a Python float back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# mollification exponent of the smooth ramp
RAMP_EXPONENT = 3


@dataclass(frozen=True)
class BumpParams:
    """Support radius ``R`` (m) and height scale ``p`` of the bump kernel."""

    R: float
    p: float

    def __post_init__(self):
        if not (self.R > 0 and math.isfinite(self.R)):
            raise ValueError(f"bump support R must be positive, got {self.R}")
        if not (self.p > 0 and math.isfinite(self.p)):
            raise ValueError(f"bump height p must be positive, got {self.p}")


@dataclass(frozen=True)
class LogisticParams:
    x0: float = 0.3
    R_log: float = 0.03

    def __post_init__(self):
        if not self.R_log > 0:
            raise ValueError(f"logistic steepness R_log must be positive, got {self.R_log}")


def _out(value, like):
    if np.ndim(like) == 0:
        return float(value)
    return value


def _check_finite(r):
    if not np.all(np.isfinite(r)):
        raise ValueError("kernel argument must be finite")


def bump_raw(r, R: float, p: float):
    """``p * exp(1 / ((r/R)^2 - 1))`` inside ``|r| < R``, zero outside."""
    r = np.asarray(r, dtype=float)
    q = (r / R) ** 2
    inside = q < 1.0
    # keep the exponent finite outside the support
    denom = np.where(inside, q - 1.0, -1.0)
    return np.where(inside, p * np.exp(1.0 / denom), 0.0)


def bump(r, params: BumpParams):
    """Compact-support bump with maximum ``p/e`` at ``r = 0``.

    >>> round(bump(0.0, BumpParams(R=1.0, p=1.0)), 6)
    0.367879
    """
    _check_finite(r)
    return _out(bump_raw(r, params.R, params.p), r)


def bump_eps(r, params: BumpParams, eps: float):
    """Bump with the inner core removed: ``h(r; p, R) - h(r; p, eps)``.

    Vanishes at ``r = 0`` and equals the plain bump for ``r >= eps``.
    """
    if not 0.0 < eps < params.R:
        raise ValueError(f"eps must satisfy 0 < eps < R (eps={eps}, R={params.R})")
    _check_finite(r)
    val = bump_raw(r, params.R, params.p) - bump_raw(r, eps, params.p)
    return _out(val, r)


def bump_derivative(r, R: float, p: float):
    """d/dr of :func:`bump_raw` (zero outside the support)."""
    r = np.asarray(r, dtype=float)
    q = (r / R) ** 2
    inside = q < 1.0
    denom = np.where(inside, q - 1.0, -1.0)
    val = p * np.exp(1.0 / denom) * (-2.0 * r / (R * R)) / denom**2
    return np.where(inside, val, 0.0)


def mollifier_weight(x, R: float, p_exp: int = RAMP_EXPONENT):
    """``e * exp(1 / ((|x|/R)^(2p) - 1))`` on ``|x| < R``; 1 at the origin."""
    if not R > 0:
        raise ValueError("R must be positive")
    xa = np.abs(np.asarray(x, dtype=float))
    q = (xa / R) ** (2 * p_exp)
    inside = q < 1.0
    denom = np.where(inside, q - 1.0, -1.0)
    # e * exp(1/d) == exp(1 + 1/d); the latter is exact at the origin
    val = np.where(inside, np.exp(1.0 + 1.0 / denom), 0.0)
    return _out(val, x)


def smooth_ramp(x, p_exp: int = RAMP_EXPONENT):
    """Smoothed clamp of ``x`` to ``[0, 1]``; exact 0 at 0 and 1 for ``x >= 1``.

    Only defined for non-negative arguments.
    """
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0) or not np.all(np.isfinite(xa)):
        raise ValueError("smooth_ramp needs finite, non-negative input")
    m = np.asarray(mollifier_weight(xa, 1.0, p_exp))
    return _out(m * xa + (1.0 - m), x)


def normalize_capped(v, p_exp: int = RAMP_EXPONENT):
    """Rescale vectors (last axis of length 2) to norm ``smooth_ramp(|v|)``.

    Zero vectors map to zero. Works on a single 2-vector or an ``(n, 2)``
    array.
    """
    v = np.asarray(v, dtype=float)
    norm = np.hypot(v[..., 0], v[..., 1])
    scale = np.asarray(smooth_ramp(norm, p_exp))
    safe = np.where(norm > 0.0, norm, 1.0)
    factor = np.where(norm > 0.0, scale / safe, 0.0)
    return v * factor[..., None]


def logistic(x, params: LogisticParams = LogisticParams()):
    """Shifted logistic ``1 / (1 + exp(-(x - x0) / R_log))``."""
    xa = np.asarray(x, dtype=float)
    z = -(xa - params.x0) / params.R_log
    # clamp keeps exp finite; the result is then ~1e-304 instead of 0
    val = 1.0 / (1.0 + np.exp(np.minimum(z, 700.0)))
    return _out(val, x)


def view_scale_angle(angle, kappa: float, params: LogisticParams = LogisticParams()):
    """Viewing-angle factor for an angle in ``[-pi, pi]`` between heading and offset."""
    return logistic(np.cos(kappa * np.asarray(angle, dtype=float)), params)


def view_scale(dir_target, offset, kappa: float, params: LogisticParams = LogisticParams()):
    """Scale in (0, 1) for a neighbour at ``offset`` seen from heading ``dir_target``.

    ``dir_target`` must be a unit vector and ``offset`` non-zero.
    """
    d = np.asarray(dir_target, dtype=float)
    o = np.asarray(offset, dtype=float)
    onorm = np.hypot(o[..., 0], o[..., 1])
    if np.any(onorm == 0.0):
        raise ValueError("view_scale is undefined for a zero offset")
    dot = d[..., 0] * o[..., 0] + d[..., 1] * o[..., 1]
    cross = d[..., 0] * o[..., 1] - d[..., 1] * o[..., 0]
    return _out(view_scale_angle(np.arctan2(cross, dot), kappa, params), dot)

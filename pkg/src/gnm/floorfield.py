"""Eikonal floor fields: wall-slowed speed function, fast marching, and the
mollified gradient sampler that turns the Lipschitz arrival-time grid into a
smooth navigation direction.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from . import geometry
from .scenario import ModelParams, Scenario, Target
from .smoothmath import bump_derivative, bump_raw

QUADRATURE_POINTS = 21


class FloorFieldError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SpeedGrid:
    """Grid nodes ``(xs[i], ys[j])`` with eikonal speed ``G[i, j]``."""

    xs: np.ndarray
    ys: np.ndarray
    G: np.ndarray
    traversable: np.ndarray
    wall_distance: np.ndarray
    desc: dict

    @property
    def h(self) -> float:
        return float(self.xs[1] - self.xs[0])

    def nodes(self) -> np.ndarray:
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])


def inverse_bump_speed(params: ModelParams) -> Callable[[np.ndarray], np.ndarray]:
    """Default wall slowdown ``G = 1 / (1 + h(d_B; p_B, R_B))``."""

    def speed(d):
        return 1.0 / (1.0 + bump_raw(d, params.R_B, params.p_B))

    speed.desc = {"kind": "inverse-bump", "p_B": params.p_B, "R_B": params.R_B}
    return speed


def grid_axes(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    x0, y0, x1, y1 = scenario.domain
    h = scenario.grid_h
    nx = int(round((x1 - x0) / h)) + 1
    ny = int(round((y1 - y0) / h)) + 1
    return x0 + h * np.arange(nx), y0 + h * np.arange(ny)


def build_speed_function(scenario: Scenario, params: ModelParams, speed_fn=None) -> SpeedGrid:
    """Speed ``G`` on the grid, ``G = 1`` beyond ``R_B`` of every obstacle.

    Nodes inside polygon obstacles, or closer than half a cell to any
    obstacle edge, are marked non-traversable so thin walls cannot leak.
    """
    if speed_fn is None:
        speed_fn = inverse_bump_speed(params)
    xs, ys = grid_axes(scenario)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    a, b, _ = scenario.obstacle_edges()
    if len(a):
        dist = np.empty(len(nodes))
        # chunk to bound the (nodes x segments) temporary
        for s in range(0, len(nodes), 20000):
            dist[s:s + 20000] = geometry.distance_to_segments(nodes[s:s + 20000], a, b)
        inside = scenario.inside_obstacle(nodes)
        dist[inside] = 0.0
        blocked = inside | (dist < 0.5 * scenario.grid_h)
    else:
        dist = np.full(len(nodes), np.inf)
        blocked = np.zeros(len(nodes), dtype=bool)
    G = np.asarray(speed_fn(dist), dtype=float)
    shape = (len(xs), len(ys))
    return SpeedGrid(
        xs=xs, ys=ys, G=G.reshape(shape), traversable=~blocked.reshape(shape),
        wall_distance=dist.reshape(shape), desc=dict(getattr(speed_fn, "desc", {"kind": "custom"})),
    )


def target_nodes(scenario: Scenario, target: Target, speed: SpeedGrid) -> np.ndarray:
    """Boolean mask of nodes inside the target or within half a cell of it."""
    nodes = speed.nodes()
    poly = target.points
    inside = geometry.points_in_polygon(nodes, poly)
    a, b = geometry.polygon_edges(poly)
    near = geometry.distance_to_segments(nodes, a, b) <= 0.5 * speed.h + 1e-12
    return (inside | near).reshape(speed.G.shape) & speed.traversable


def fast_march(
    G: np.ndarray,
    traversable: np.ndarray,
    sources: np.ndarray,
    h: float,
    check_monotone: bool = True,
) -> np.ndarray:
    """First-order upwind fast marching for ``G |grad sigma| = 1``.

    ``sources`` marks nodes with ``sigma = 0``. Unreachable or blocked
    nodes keep ``inf``.
    """
    nx, ny = G.shape
    sigma = np.full((nx, ny), np.inf)
    accepted = np.zeros((nx, ny), dtype=bool)
    cost = h / G
    heap: list[tuple[float, int, int]] = []
    for i, j in zip(*np.nonzero(sources)):
        sigma[i, j] = 0.0
        heap.append((0.0, int(i), int(j)))
    heapq.heapify(heap)
    last = -np.inf
    while heap:
        s, i, j = heapq.heappop(heap)
        if accepted[i, j] or s > sigma[i, j]:
            continue
        accepted[i, j] = True
        if check_monotone and s < last:
            raise FloorFieldError(f"fast marching lost monotonicity at node ({i}, {j})")
        last = s
        for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if ni < 0 or nj < 0 or ni >= nx or nj >= ny:
                continue
            if accepted[ni, nj] or not traversable[ni, nj]:
                continue
            a = min(
                sigma[ni - 1, nj] if ni > 0 and accepted[ni - 1, nj] else math.inf,
                sigma[ni + 1, nj] if ni < nx - 1 and accepted[ni + 1, nj] else math.inf,
            )
            b = min(
                sigma[ni, nj - 1] if nj > 0 and accepted[ni, nj - 1] else math.inf,
                sigma[ni, nj + 1] if nj < ny - 1 and accepted[ni, nj + 1] else math.inf,
            )
            f = cost[ni, nj]
            if math.isinf(a) or math.isinf(b) or abs(a - b) >= f:
                new = min(a, b) + f
            else:
                new = 0.5 * (a + b + math.sqrt(2.0 * f * f - (a - b) ** 2))
            if new < sigma[ni, nj]:
                sigma[ni, nj] = new
                heapq.heappush(heap, (new, ni, nj))
    return sigma


@dataclass(frozen=True, eq=False)
class MollifierKernel:
    """Tensor Gauss-Legendre nodes ``offsets`` with gradient weights ``weights``.

    ``grad sigma_tilde(x) = sum_k weights[k] * sigma(x - offsets[k])``.
    """

    radius: float
    offsets: np.ndarray
    weights: np.ndarray
    normalization: float
    mass_quadrature: float

    @classmethod
    def build(cls, radius: float, n: int = QUADRATURE_POINTS) -> "MollifierKernel":
        t, w = np.polynomial.legendre.leggauss(n)
        y1 = radius * t
        w1 = radius * w
        Y1, Y2 = np.meshgrid(y1, y1, indexing="ij")
        W = np.outer(w1, w1).ravel()
        Y = np.column_stack([Y1.ravel(), Y2.ravel()])
        r = np.hypot(Y[:, 0], Y[:, 1])
        dbump = bump_derivative(r, radius, 1.0)
        safe = np.where(r > 0, r, 1.0)
        grad = np.where(r[:, None] > 0, (dbump / safe)[:, None] * Y, 0.0)
        mass = float(np.sum(W * bump_raw(r, radius, 1.0)))
        # Normalise by the discrete first moment of the gradient kernel; in the
        # continuum it equals the mass, and this choice makes linear fields
        # reproduce their gradient to round-off.
        moment = float(-np.sum(W * grad[:, 0] * Y[:, 0]))
        keep = np.any(grad != 0.0, axis=1)
        weights = (W[:, None] * grad / moment)[keep]
        return cls(radius, Y[keep], weights, 1.0 / moment, mass)


class FloorField:
    """Arrival times of one target plus the smooth gradient sampler."""

    def __init__(self, sigma: np.ndarray, speed: SpeedGrid, target_id: int,
                 kernel: MollifierKernel, desc: dict | None = None):
        self.sigma = sigma
        self.speed = speed
        self.target_id = target_id
        self.kernel = kernel
        self.xs, self.ys = speed.xs, speed.ys
        self.h = speed.h
        finite = np.isfinite(sigma)
        self.reachable = finite
        if finite.all():
            self._filled = sigma
        else:
            # substitute the nearest traversable value for blocked/unreachable nodes
            _, idx = ndimage.distance_transform_edt(~finite, return_indices=True)
            self._filled = sigma[idx[0], idx[1]]
        # nodes whose whole mollifier support is blocked
        steps = int(math.ceil(kernel.radius / self.h))
        disc = np.hypot(*np.meshgrid(np.arange(-steps, steps + 1), np.arange(-steps, steps + 1))) * self.h <= kernel.radius
        self._support_blocked = ndimage.binary_erosion(~finite, structure=disc, border_value=1)
        self.desc = {
            **speed.desc,
            "mollifier_radius": kernel.radius,
            "mollifier_normalization": kernel.normalization,
            "mollifier_mass_quadrature": kernel.mass_quadrature,
            "quadrature_points": QUADRATURE_POINTS,
            "unreachable_nodes": int((~finite & speed.traversable).sum()),
            **(desc or {}),
        }
        self._bounds = (self.xs[0], self.ys[0], len(self.xs), len(self.ys))

    def _frac_index(self, pts: np.ndarray):
        x0, y0, nx, ny = self._bounds
        fx = np.clip((pts[..., 0] - x0) / self.h, 0.0, nx - 1)
        fy = np.clip((pts[..., 1] - y0) / self.h, 0.0, ny - 1)
        i0 = np.minimum(fx.astype(np.intp), nx - 2)
        j0 = np.minimum(fy.astype(np.intp), ny - 2)
        return i0, j0, fx - i0, fy - j0

    def interpolate(self, pts) -> np.ndarray:
        """Bilinear interpolation of the (filled) arrival times."""
        pts = np.asarray(pts, dtype=float)
        i0, j0, tx, ty = self._frac_index(pts)
        s = self._filled
        return (
            (1 - tx) * (1 - ty) * s[i0, j0]
            + tx * (1 - ty) * s[i0 + 1, j0]
            + (1 - tx) * ty * s[i0, j0 + 1]
            + tx * ty * s[i0 + 1, j0 + 1]
        )

    def raw_gradient(self, pts) -> np.ndarray:
        """Gradient of the bilinear interpolant (piecewise, not smooth)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        i0, j0, tx, ty = self._frac_index(pts)
        s = self._filled
        gx = ((1 - ty) * (s[i0 + 1, j0] - s[i0, j0]) + ty * (s[i0 + 1, j0 + 1] - s[i0, j0 + 1])) / self.h
        gy = ((1 - tx) * (s[i0, j0 + 1] - s[i0, j0]) + tx * (s[i0 + 1, j0 + 1] - s[i0 + 1, j0])) / self.h
        return np.column_stack([gx, gy])

    def gradient(self, pts) -> np.ndarray:
        """Mollified gradient at each point, shape ``(n, 2)``."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if len(pts) == 0:
            return np.zeros((0, 2))
        samples = self.interpolate(pts[:, None, :] - self.kernel.offsets[None, :, :])
        grad = samples @ self.kernel.weights
        i0, j0, tx, ty = self._frac_index(pts)
        ni = i0 + (tx >= 0.5)
        nj = j0 + (ty >= 0.5)
        blocked = self._support_blocked[ni, nj]
        if np.any(blocked):
            grad[blocked] = self.raw_gradient(pts[blocked])
        return grad

    def target_direction(self, pts) -> np.ndarray:
        return -self.gradient(pts)

    def max_inverse_speed(self) -> float:
        return float(np.max(1.0 / self.speed.G[self.speed.traversable]))


class ConstantField:
    """Uniform walking direction, used for periodic corridors."""

    def __init__(self, direction, target_id: int):
        self.direction = np.asarray(direction, dtype=float)
        self.target_id = target_id
        self.desc = {"kind": "constant-direction", "direction": self.direction.tolist()}

    def target_direction(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.broadcast_to(self.direction, (len(pts), 2)).copy()

    def gradient(self, pts) -> np.ndarray:
        return -self.target_direction(pts)


def build_floor_field(scenario: Scenario, target: Target, params: ModelParams,
                      speed: SpeedGrid | None = None, kernel: MollifierKernel | None = None) -> FloorField:
    if speed is None:
        speed = build_speed_function(scenario, params)
    if kernel is None:
        kernel = MollifierKernel.build(params.moll_radius)
    src = target_nodes(scenario, target, speed)
    if not src.any():
        raise FloorFieldError(f"target {target.id} touches no traversable grid node")
    sigma = fast_march(speed.G, speed.traversable, src, speed.h)
    return FloorField(sigma, speed, target.id, kernel)


def build_fields(scenario: Scenario, params: ModelParams, speed_fn=None) -> dict:
    """One navigation field per target, keyed by target id.

    Targets with a fixed ``direction`` (and every target of a periodic
    corridor) get a :class:`ConstantField`; the others are solved on a
    shared speed grid.
    """
    fields: dict = {}
    speed = None
    kernel = None
    for t in scenario.targets:
        if t.direction is not None:
            fields[t.id] = ConstantField(t.direction, t.id)
            continue
        if speed is None:
            speed = build_speed_function(scenario, params, speed_fn)
            kernel = MollifierKernel.build(params.moll_radius)
        fields[t.id] = build_floor_field(scenario, t, params, speed, kernel)
    return fields

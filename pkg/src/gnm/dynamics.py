"""Right-hand side of the navigation ODE for a whole crowd.

State layout is ``(x_1, y_1, w_1, ..., x_n, y_n, w_n)``. Pairwise repulsion
runs over a directed pair list produced by :class:`NeighborIndex`; pairs are
kept in lexicographic order and accumulated with ``np.bincount`` so the
result does not depend on how the candidate pairs were found.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import nearest_on_segments
from .scenario import ModelParams, Scenario
from .smoothmath import LogisticParams, bump_raw, logistic, normalize_capped


class NumericError(RuntimeError):
    """Non-finite state or derivative."""


def min_image(dx: np.ndarray, length: float | None) -> np.ndarray:
    if length is None:
        return dx
    return dx - length * np.round(dx / length)


class NeighborIndex:
    """Uniform spatial hash (cell list) over agent positions.

    Cell edges are at least ``cell_size`` long, so all agents within
    ``cell_size`` of a point lie in its own or the eight surrounding cells.
    """

    def __init__(self, positions: np.ndarray, cell_size: float, domain, periodic_length: float | None = None):
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 2)
        self.cell_size = float(cell_size)
        self.periodic_length = periodic_length
        x0, y0, x1, y1 = domain
        self.origin = (x0, y0)
        self.nx = max(1, int(math.floor((x1 - x0) / cell_size)))
        self.ny = max(1, int(math.floor((y1 - y0) / cell_size)))
        self.wx = (x1 - x0) / self.nx
        self.wy = (y1 - y0) / self.ny
        cx, cy = self._cells(self.positions)
        cid = cx * self.ny + cy
        self.order = np.argsort(cid, kind="stable")
        sorted_ids = cid[self.order]
        all_cells = np.arange(self.nx * self.ny)
        self.start = np.searchsorted(sorted_ids, all_cells, side="left")
        self.end = np.searchsorted(sorted_ids, all_cells, side="right")
        self._cx, self._cy = cx, cy

    def _cells(self, pts: np.ndarray):
        fx = (pts[:, 0] - self.origin[0]) / self.wx
        fy = (pts[:, 1] - self.origin[1]) / self.wy
        if self.periodic_length is not None:
            cx = np.floor(fx).astype(np.intp) % self.nx
        else:
            cx = np.clip(np.floor(fx), 0, self.nx - 1).astype(np.intp)
        cy = np.clip(np.floor(fy), 0, self.ny - 1).astype(np.intp)
        return cx, cy

    def _neighbour_cells(self, cx: int, cy: int):
        out = set()
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                nx, ny = cx + dx, cy + dy
                if self.periodic_length is not None:
                    nx %= self.nx
                elif not 0 <= nx < self.nx:
                    continue
                if 0 <= ny < self.ny:
                    out.add(nx * self.ny + ny)
        return sorted(out)

    def query(self, x, radius: float | None = None) -> np.ndarray:
        """Indices of agents possibly within ``radius`` (<= cell size) of ``x``."""
        if radius is not None and radius > self.cell_size:
            raise ValueError("query radius exceeds the cell size")
        cx, cy = self._cells(np.atleast_2d(np.asarray(x, dtype=float)))
        parts = [self.order[self.start[c]:self.end[c]] for c in self._neighbour_cells(int(cx[0]), int(cy[0]))]
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.intp)

    def candidate_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All directed pairs ``(i, j)``, ``i != j``, in neighbouring cells."""
        n = len(self.positions)
        if n < 2:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
        idx = np.arange(n)
        keys = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                ncx = self._cx + dx
                ncy = self._cy + dy
                if self.periodic_length is not None:
                    ok = (ncy >= 0) & (ncy < self.ny)
                    ncx = ncx % self.nx
                else:
                    ok = (ncx >= 0) & (ncx < self.nx) & (ncy >= 0) & (ncy < self.ny)
                src = idx[ok]
                c = ncx[ok] * self.ny + ncy[ok]
                lo, hi = self.start[c], self.end[c]
                counts = hi - lo
                if counts.sum() == 0:
                    continue
                rep_i = np.repeat(src, counts)
                offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
                rep_j = self.order[np.repeat(lo, counts) + offs]
                keys.append(rep_i * n + rep_j)
        if not keys:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
        k = np.unique(np.concatenate(keys))
        i, j = np.divmod(k, n)
        keep = i != j
        return i[keep], j[keep]

    def pairs_within(self, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
        """Directed pairs closer than ``cutoff`` (minimum image), sorted."""
        if cutoff > self.cell_size:
            raise ValueError("cutoff exceeds the cell size")
        i, j = self.candidate_pairs()
        d = self.positions[j] - self.positions[i]
        d[:, 0] = min_image(d[:, 0], self.periodic_length)
        keep = np.hypot(d[:, 0], d[:, 1]) < cutoff
        return i[keep], j[keep]


def brute_force_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.divmod(np.arange(n * n), n)
    keep = i != j
    return i[keep], j[keep]


# ---------------------------------------------------------------------------
# single-pair kernels (reference forms of the vectorised code below)

def _logistic_params(params: ModelParams) -> LogisticParams:
    return LogisticParams(params.logistic_x0, params.logistic_R)


def grad_pedestrian(x_i, x_j, dir_target_i, params: ModelParams) -> np.ndarray:
    """Gradient of the pedestrian potential of ``j`` acting on ``i`` (points at ``j``)."""
    off = np.asarray(x_j, dtype=float) - np.asarray(x_i, dtype=float)
    d = float(np.hypot(*off))
    if d == 0.0 or d >= params.R_p:
        return np.zeros(2)
    h = float(bump_raw(d, params.R_p, params.p_p) - bump_raw(d, params.eps, params.p_p))
    dt = np.asarray(dir_target_i, dtype=float)
    if not dt.any():
        # no heading: no viewing-angle attenuation
        return h * off / d
    angle = math.atan2(dt[0] * off[1] - dt[1] * off[0], dt[0] * off[0] + dt[1] * off[1])
    s = float(logistic(math.cos(params.kappa * angle), _logistic_params(params)))
    return h * s * off / d


def nearest_point(x, obstacle, periodic_length: float | None = None) -> np.ndarray:
    """Closest point of an obstacle's edges to ``x`` (minimum image in x)."""
    x = np.asarray(x, dtype=float)
    a, b = obstacle.edges()
    shifts = [0.0] if periodic_length is None else [0.0, -periodic_length, periodic_length]
    best, best_d = None, math.inf
    for s in shifts:
        d, near = nearest_on_segments(x[None, :] + [s, 0.0], a, b)
        k = int(np.argmin(d[0]))
        if d[0, k] < best_d:
            best_d = float(d[0, k])
            best = near[0, k] - [s, 0.0]
    return best


def grad_obstacle(x_i, obstacle, params: ModelParams, periodic_length: float | None = None) -> np.ndarray:
    """Gradient of the obstacle potential (points from ``x_i`` to the obstacle)."""
    x_i = np.asarray(x_i, dtype=float)
    xb = nearest_point(x_i, obstacle, periodic_length)
    off = xb - x_i
    d = float(np.hypot(*off))
    if d == 0.0 or d >= params.R_B:
        return np.zeros(2)
    h = float(bump_raw(d, params.R_B, params.p_B) - bump_raw(d, params.eps, params.p_B))
    return h * off / d


def nav_combined(x_i, dir_target, neighbors, obstacles, params: ModelParams,
                 periodic_length: float | None = None) -> np.ndarray:
    """Navigation vector ``g(g(N_T) + g(N_P))`` for a single agent."""
    n_t = np.asarray(dir_target, dtype=float)
    norm = float(np.hypot(*n_t))
    unit = n_t / norm if norm > 0 else np.zeros(2)
    x_i = np.asarray(x_i, dtype=float)
    total = np.zeros(2)
    for x_j in neighbors:
        x_j = np.asarray(x_j, dtype=float).copy()
        if periodic_length is not None:
            x_j[0] = x_i[0] + min_image(x_j[0] - x_i[0], periodic_length)
        total += grad_pedestrian(x_i, x_j, unit, params)
    for ob in obstacles:
        total += grad_obstacle(x_i, ob, params, periodic_length)
    n_p = -total
    return normalize_capped(normalize_capped(n_t) + normalize_capped(n_p))


# ---------------------------------------------------------------------------
# vectorised crowd evaluation

@dataclass
class Crowd:
    """Per-agent constants of the currently alive agents."""

    ids: np.ndarray
    v_des: np.ndarray
    target_ids: np.ndarray

    def __len__(self):
        return len(self.ids)


class CrowdDynamics:
    """Evaluates ``(x', w')`` for all alive agents.

    Call :meth:`prepare` once per step attempt; it builds the pair list with
    a slack radius that covers the stage displacements of the step. With
    ``exact_rebuild`` the index is rebuilt on every evaluation instead.
    """

    def __init__(self, scenario: Scenario, params: ModelParams, fields: dict, crowd: Crowd,
                 exact_rebuild: bool = False):
        self.scenario = scenario
        self.params = params
        self.fields = fields
        self.crowd = crowd
        self.exact_rebuild = exact_rebuild
        self.periodic_length = scenario.length_x if scenario.periodic else None
        self.logistic = _logistic_params(params)
        self.v_max = float(np.max(crowd.v_des)) if len(crowd) else 0.0
        self._pairs = None
        a, b, owner = scenario.obstacle_edges()
        self._edges = (a, b, owner)
        self._n_obstacles = len(scenario.obstacles)
        self._target_groups = [(tid, np.nonzero(crowd.target_ids == tid)[0]) for tid in np.unique(crowd.target_ids)]
        self.evaluations = 0

    # -- neighbours --------------------------------------------------------
    def prepare(self, y: np.ndarray, h: float = 0.0) -> None:
        pos = y.reshape(-1, 3)[:, :2]
        w = y.reshape(-1, 3)[:, 2]
        wmax = max(self.v_max, float(np.max(np.abs(w))) if len(w) else 0.0)
        slack = 2.0 * abs(h) * wmax * 1.5 + 1e-3
        cutoff = self.params.R_p + slack
        index = NeighborIndex(pos, cutoff, self.scenario.domain, self.periodic_length)
        self._pairs = index.pairs_within(cutoff)

    def pairs(self, pos: np.ndarray):
        if self.exact_rebuild or self._pairs is None:
            index = NeighborIndex(pos, self.params.R_p, self.scenario.domain, self.periodic_length)
            return index.pairs_within(self.params.R_p)
        return self._pairs

    # -- pieces ------------------------------------------------------------
    def target_directions(self, pos: np.ndarray) -> np.ndarray:
        out = np.zeros_like(pos)
        for tid, idx in self._target_groups:
            if len(idx):
                out[idx] = self.fields[tid].target_direction(pos[idx])
        return out

    def pedestrian_gradient_sum(self, pos: np.ndarray, heading: np.ndarray, pairs) -> np.ndarray:
        """``sum_j grad P_ij`` for every agent over the given directed pairs."""
        n = len(pos)
        i, j = pairs
        out = np.zeros((n, 2))
        if len(i) == 0:
            return out
        p = self.params
        off = pos[j] - pos[i]
        off[:, 0] = min_image(off[:, 0], self.periodic_length)
        d = np.hypot(off[:, 0], off[:, 1])
        act = (d > 0.0) & (d < p.R_p)
        dd = np.where(act, d, 1.0)
        h = np.where(act, bump_raw(d, p.R_p, p.p_p) - bump_raw(d, p.eps, p.p_p), 0.0)
        hd = heading[i]
        angle = np.arctan2(hd[:, 0] * off[:, 1] - hd[:, 1] * off[:, 0], hd[:, 0] * off[:, 0] + hd[:, 1] * off[:, 1])
        s = np.asarray(logistic(np.cos(p.kappa * angle), self.logistic))
        # agents without a heading see all around
        s = np.where((hd[:, 0] == 0.0) & (hd[:, 1] == 0.0), 1.0, s)
        coef = h * s / dd
        out[:, 0] = np.bincount(i, weights=coef * off[:, 0], minlength=n)
        out[:, 1] = np.bincount(i, weights=coef * off[:, 1], minlength=n)
        return out

    def obstacle_gradient_sum(self, pos: np.ndarray) -> np.ndarray:
        n = len(pos)
        out = np.zeros((n, 2))
        a, b, owner = self._edges
        if len(a) == 0 or n == 0:
            return out
        p = self.params
        shifts = [0.0] if self.periodic_length is None else [0.0, -self.periodic_length, self.periodic_length]
        best_d = np.full((n, self._n_obstacles), np.inf)
        best_off = np.zeros((n, self._n_obstacles, 2))
        for s in shifts:
            q = pos + np.array([s, 0.0])
            d, near = nearest_on_segments(q, a, b)
            for k in range(self._n_obstacles):
                cols = np.nonzero(owner == k)[0]
                dk = d[:, cols]
                arg = np.argmin(dk, axis=1)
                dmin = dk[np.arange(n), arg]
                better = dmin < best_d[:, k]
                best_d[better, k] = dmin[better]
                best_off[better, k] = near[better, cols[arg[better]]] - q[better]
        act = (best_d > 0.0) & (best_d < p.R_B)
        if not act.any():
            return out
        dd = np.where(act, best_d, 1.0)
        h = np.where(act, bump_raw(best_d, p.R_B, p.p_B) - bump_raw(best_d, p.eps, p.p_B), 0.0)
        out = np.sum((h / dd)[..., None] * best_off, axis=1)
        return out

    def navigation(self, pos: np.ndarray, pairs=None):
        """Return ``(N, N_T, N_P)`` for every agent."""
        n_t = self.target_directions(pos)
        norm = np.hypot(n_t[:, 0], n_t[:, 1])
        heading = np.where(norm[:, None] > 0, n_t / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
        if pairs is None:
            pairs = self.pairs(pos)
        n_p = -(self.pedestrian_gradient_sum(pos, heading, pairs) + self.obstacle_gradient_sum(pos))
        nav = normalize_capped(normalize_capped(n_t) + normalize_capped(n_p))
        return nav, n_t, n_p

    def __call__(self, t: float, y: np.ndarray) -> np.ndarray:
        return self.rhs(y, t)

    def rhs(self, y: np.ndarray, t: float = 0.0) -> np.ndarray:
        self.evaluations += 1
        s = y.reshape(-1, 3)
        if not np.all(np.isfinite(s)):
            bad = int(np.nonzero(~np.all(np.isfinite(s), axis=1))[0][0])
            raise NumericError(f"non-finite state for agent {int(self.crowd.ids[bad])} at t={t}")
        pos = s[:, :2]
        w = s[:, 2]
        nav, _, _ = self.navigation(pos)
        out = np.empty_like(s)
        out[:, :2] = w[:, None] * nav
        out[:, 2] = (self.crowd.v_des * np.hypot(nav[:, 0], nav[:, 1]) - w) / self.params.tau
        return out.ravel()


def rhs(state: np.ndarray, t: float, context: CrowdDynamics) -> np.ndarray:
    """Functional form: ``d state / dt`` given a prepared :class:`CrowdDynamics`."""
    return context.rhs(state, t)

"""Fix the repulsion heights ``(p_p, p_B)`` from the standoff condition.

A walker enclosed by stationary neighbours on one side and a wall on the
other, who wants to walk parallel to the wall, must not move. With the
target drive ``N_T = (1, 0)`` that means ``g(N_T) = -g(N_P)``. Taking
``|N_P| = 1`` pins the root, and since ``N_P`` is linear in the two heights
this leaves two equations in two unknowns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scenario import ModelParams
from .smoothmath import LogisticParams, bump_raw, logistic, normalize_capped


class CalibrationError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def lattice_spacing(rho_max: float) -> float:
    """Nearest-neighbour distance of a hexagonal lattice with density ``rho_max``."""
    if not rho_max > 0:
        raise ValueError("rho_max must be positive")
    return math.sqrt(2.0 / (math.sqrt(3.0) * rho_max))


@dataclass(frozen=True)
class StandoffScenario:
    gray: tuple[float, float]
    neighbors: tuple[tuple[float, float], ...]
    wall_distance: float  # horizontal wall this far below ``gray``
    target_direction: tuple[float, float] = (1.0, 0.0)
    spacing: float = 0.0

    @property
    def wall_point(self) -> np.ndarray:
        return np.array([self.gray[0], self.gray[1] - self.wall_distance])

    def describe(self) -> dict:
        return {
            "gray": list(self.gray),
            "neighbors": [list(map(float, p)) for p in self.neighbors],
            "wall_distance": self.wall_distance,
            "target_direction": list(self.target_direction),
            "lattice_spacing": self.spacing,
        }


def default_standoff(rho_max: float = 7.0, wall_distance: float = 0.2) -> StandoffScenario:
    """Four hexagonal neighbours: ahead, behind, and the two above."""
    r = lattice_spacing(rho_max)
    up = math.sqrt(3.0) * r / 2.0
    nb = ((r, 0.0), (-r, 0.0), (r / 2.0, up), (-r / 2.0, up))
    return StandoffScenario((0.0, 0.0), nb, wall_distance, spacing=r)


def second_layer_standoff(R_p: float = 1.0, rho_max: float = 7.0, wall_distance: float = 0.2) -> StandoffScenario:
    """Every lattice site on the far side of the wall within ``R_p`` of the walker."""
    r = lattice_spacing(rho_max)
    up = math.sqrt(3.0) * r / 2.0
    nb = []
    rows = int(math.ceil(R_p / up)) + 1
    cols = int(math.ceil(R_p / r)) + 2
    for row in range(rows + 1):
        for k in range(-cols, cols + 1):
            x = (k + 0.5 * (row % 2)) * r
            y = row * up
            d = math.hypot(x, y)
            if 0.0 < d < R_p:
                nb.append((x, y))
    return StandoffScenario((0.0, 0.0), tuple(nb), wall_distance, spacing=r)


def _repulsion_basis(sc: StandoffScenario, R_p: float, R_B: float, params: ModelParams):
    """``N_P = p_p * a + p_B * b`` (repulsion without the core correction)."""
    gray = np.asarray(sc.gray, float)
    tdir = np.asarray(sc.target_direction, float)
    tdir = tdir / np.hypot(*tdir)
    lp = LogisticParams(params.logistic_x0, params.logistic_R)
    a = np.zeros(2)
    for q in sc.neighbors:
        off = np.asarray(q, float) - gray
        d = float(np.hypot(*off))
        if d == 0.0:
            continue
        angle = math.atan2(tdir[0] * off[1] - tdir[1] * off[0], tdir @ off)
        s = float(logistic(math.cos(params.kappa * angle), lp))
        a -= float(bump_raw(d, R_p, 1.0)) * s * off / d
    off_b = sc.wall_point - gray
    db = float(np.hypot(*off_b))
    b = np.zeros(2)
    if db > 0:
        b = -float(bump_raw(db, R_B, 1.0)) * off_b / db
    return a, b


def repulsion(p_p: float, p_B: float, sc: StandoffScenario, R_p: float, R_B: float, params: ModelParams) -> np.ndarray:
    a, b = _repulsion_basis(sc, R_p, R_B, params)
    return p_p * a + p_B * b


def standoff_residual(p_p: float, p_B: float, sc: StandoffScenario, R_p: float, R_B: float,
                      params: ModelParams = ModelParams()) -> np.ndarray:
    """``g(N_T) + g(N_P)`` for the enclosed walker; zero when it cannot move."""
    n_p = repulsion(p_p, p_B, sc, R_p, R_B, params)
    n_t = np.asarray(sc.target_direction, float)
    return normalize_capped(n_t) + normalize_capped(n_p)


def closure_residual(p_p: float, p_B: float, sc: StandoffScenario, R_p: float, R_B: float,
                     params: ModelParams = ModelParams()) -> np.ndarray:
    """``N_P + N_T / |N_T|``; its root has ``g(N_P) = -g(N_T)`` with ``|N_P| = 1``."""
    n_t = np.asarray(sc.target_direction, float)
    return repulsion(p_p, p_B, sc, R_p, R_B, params) + n_t / np.hypot(*n_t)


@dataclass
class CalibrationResult:
    p_p: float
    p_B: float
    residual: float  # |g(N_T) + g(N_P)|
    closure: float  # |N_P + N_T|
    iterations: int
    geometry: dict = field(default_factory=dict)
    R_p: float = 0.0
    R_B: float = 0.0


def calibrate(sc: StandoffScenario, R_p: float, R_B: float, params: ModelParams = ModelParams(),
              scan: int = 50, p_max: float = 50.0, tol: float = 1e-10, max_iter: int = 50) -> CalibrationResult:
    """Solve the standoff condition for ``(p_p, p_B)`` on ``(0, p_max]^2``.

    A coarse grid scan looks for a cell on whose corners both residual
    components change sign; damped Newton with a finite-difference Jacobian
    then starts from that cell's centre.
    """

    def F(p):
        return closure_residual(p[0], p[1], sc, R_p, R_B, params)

    grid = np.linspace(0.0, p_max, scan + 1)[1:]
    vals = np.array([[F((u, v)) for v in grid] for u in grid])  # (scan, scan, 2)
    start = None
    best = math.inf
    for i in range(scan - 1):
        for j in range(scan - 1):
            corners = vals[i:i + 2, j:j + 2].reshape(4, 2)
            lo, hi = corners.min(axis=0), corners.max(axis=0)
            if np.all(lo <= 0.0) and np.all(hi >= 0.0):
                centre = np.array([0.5 * (grid[i] + grid[i + 1]), 0.5 * (grid[j] + grid[j + 1])])
                score = float(np.linalg.norm(F(centre)))
                if score < best:
                    best, start = score, centre
    if start is None:
        raise CalibrationError(
            "no bracketing cell found for the standoff condition",
            {"grid": grid, "residual_x": vals[..., 0], "residual_y": vals[..., 1]},
        )

    p = start
    f = F(p)
    it = 0
    for it in range(1, max_iter + 1):
        J = np.empty((2, 2))
        for k in range(2):
            step = 1e-6 * max(1.0, abs(p[k]))
            e = np.zeros(2)
            e[k] = step
            J[:, k] = (F(p + e) - F(p - e)) / (2 * step)
        try:
            dp = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            raise CalibrationError("singular Jacobian in the standoff solve", {"p": p, "J": J}) from None
        lam = 1.0
        while True:
            trial = p + lam * dp
            ft = F(trial)
            if np.linalg.norm(ft) < np.linalg.norm(f) or lam < 1e-6:
                break
            lam *= 0.5
        p, f_prev, f = trial, f, ft
        if np.linalg.norm(f) <= 0.01 * tol or np.linalg.norm(f) >= np.linalg.norm(f_prev):
            break
    res = float(np.linalg.norm(standoff_residual(p[0], p[1], sc, R_p, R_B, params)))
    return CalibrationResult(
        float(p[0]), float(p[1]), res, float(np.linalg.norm(f)), it, sc.describe(), R_p, R_B,
    )


def solve_wall_height(wall_distance: float, R_B: float) -> float:
    """Height with ``h(wall_distance; p_B, R_B) = 1`` (closed-form inversion)."""
    return 1.0 / float(bump_raw(wall_distance, R_B, 1.0))


def best_wall_distance(target_p_B: float, R_p: float, R_B: float, params: ModelParams = ModelParams(),
                       rho_max: float = 7.0, lo: float = 0.05, hi: float | None = None) -> float:
    """Wall distance of the default geometry whose calibrated ``p_B`` hits ``target_p_B``."""
    from scipy.optimize import brentq

    hi = hi if hi is not None else 0.999 * R_B

    def gap(dw):
        sc = default_standoff(rho_max, dw)
        a, b = _repulsion_basis(sc, R_p, R_B, params)
        p = np.linalg.solve(np.column_stack([a, b]), -np.asarray(sc.target_direction, float))
        return p[1] - target_p_B

    return float(brentq(gap, lo, hi, xtol=1e-12))

"""Dormand-Prince 4(5) integration and the simulation loop around it."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import geometry
from .dynamics import Crowd, CrowdDynamics, NumericError, min_image
from .floorfield import ConstantField, build_fields
from .scenario import Agent, Config, build_agents

log = logging.getLogger(__name__)

# Dormand-Prince 5(4) tableau
C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
E = B5 - B4
# continuous extension (Shampine), y(t + th) = y + h * K^T P [th, th^2, th^3, th^4]
P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


class StepSizeError(RuntimeError):
    """Step size fell below ``h_min``."""


@dataclass(frozen=True)
class IntegratorConfig:
    tol_abs: float = 1e-5
    tol_rel: float = 1e-4
    h_init: float = 0.01
    h_min: float = 1e-8
    h_max: float = 0.1
    safety: float = 0.9
    output_dt: float = 0.1
    exact_neighbor_rebuild: bool = False

    def __post_init__(self):
        if not (0 < self.h_min <= self.h_init <= self.h_max):
            raise ValueError("need 0 < h_min <= h_init <= h_max")
        if not (self.tol_abs > 0 and self.tol_rel > 0):
            raise ValueError("tolerances must be positive")
        if not self.output_dt > 0:
            raise ValueError("output_dt must be positive")

    @classmethod
    def from_dict(cls, d: dict | None) -> "IntegratorConfig":
        return cls(**(d or {}))


@dataclass
class StepResult:
    y: np.ndarray
    error: float
    accepted: bool
    h_next: float
    k: np.ndarray  # stage derivatives, shape (7, n)


def dp45_stages(f: Callable, t: float, y: np.ndarray, h: float, k1: np.ndarray | None = None):
    """Evaluate the seven stages; returns ``(y5, err_vector, K)``."""
    K = np.empty((7, len(y)))
    K[0] = f(t, y) if k1 is None else k1
    for s in range(1, 6):
        K[s] = f(t + C[s] * h, y + h * (np.asarray(A[s]) @ K[:s]))
    y5 = y + h * (B5[:6] @ K[:6])
    K[6] = f(t + h, y5)
    err = h * (E @ K)
    return y5, err, K


def error_norm(err: np.ndarray, y: np.ndarray, y_new: np.ndarray, cfg: IntegratorConfig) -> float:
    if len(err) == 0:
        return 0.0
    scale = cfg.tol_abs + cfg.tol_rel * np.maximum(np.abs(y), np.abs(y_new))
    return float(np.max(np.abs(err) / scale))


def step(f: Callable, y: np.ndarray, t: float, h: float, cfg: IntegratorConfig,
         k1: np.ndarray | None = None) -> StepResult:
    """One attempted adaptive step with the embedded error estimate."""
    y5, err, K = dp45_stages(f, t, y, h, k1)
    E_ = error_norm(err, y, y5, cfg)
    if E_ == 0.0:
        factor = 5.0
    else:
        factor = min(5.0, max(0.2, cfg.safety * E_ ** -0.2))
    accepted = E_ <= 1.0
    if not accepted:
        factor = min(factor, 1.0)
    h_next = min(cfg.h_max, max(cfg.h_min, h * factor))
    return StepResult(y5, E_, accepted, h_next, K)


def dense_output(y: np.ndarray, h: float, K: np.ndarray, theta) -> np.ndarray:
    """Fourth-order interpolant at fractions ``theta`` of an accepted step."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    powers = np.vstack([theta, theta**2, theta**3, theta**4])
    Q = K.T @ P  # (n, 4)
    return y[None, :] + h * (Q @ powers).T


def integrate(f: Callable, y0, t0: float, t1: float, cfg: IntegratorConfig = IntegratorConfig(),
              fixed_step: float | None = None):
    """Integrate ``y' = f(t, y)`` from ``t0`` to ``t1``; returns ``(t, y, stats)``.

    With ``fixed_step`` every step has that length and is accepted.
    """
    y = np.asarray(y0, dtype=float).copy()
    t = t0
    stats = {"accepted": 0, "rejected": 0, "h_last": 0.0}
    if fixed_step is not None:
        n = int(round((t1 - t0) / fixed_step))
        k1 = None
        for _ in range(n):
            y5, _, K = dp45_stages(f, t, y, fixed_step, k1)
            y, t, k1 = y5, t + fixed_step, K[6]
            stats["accepted"] += 1
        stats["h_last"] = fixed_step
        return t, y, stats
    h = cfg.h_init
    k1 = None
    while t < t1 - 1e-14 * max(1.0, abs(t1)):
        h_try = min(h, t1 - t)
        res = step(f, y, t, h_try, cfg, k1)
        if res.accepted:
            t += h_try
            y = res.y
            k1 = res.k[6]
            stats["accepted"] += 1
            stats["h_last"] = h_try
        else:
            stats["rejected"] += 1
            k1 = res.k[0]
            if h_try <= cfg.h_min:
                worst = int(np.argmax(np.abs(res.k[-1])))
                raise StepSizeError(f"step size below h_min at t={t}, worst component {worst}")
        h = res.h_next
    return t, y, stats


# ---------------------------------------------------------------------------
# simulation loop

@dataclass
class Snapshot:
    t: float
    ids: np.ndarray
    pos: np.ndarray
    w: np.ndarray
    v_des: np.ndarray
    target_ids: np.ndarray
    _dyn: CrowdDynamics | None = None
    _vel: np.ndarray | None = None

    @property
    def velocity(self) -> np.ndarray:
        """Velocities ``w * N`` at the snapshot (computed on first access)."""
        if self._vel is None:
            if self._dyn is None or len(self.ids) == 0:
                self._vel = np.zeros((len(self.ids), 2))
            else:
                nav, _, _ = self._dyn.navigation(self.pos, pairs=None)
                self._vel = self.w[:, None] * nav
        return self._vel


class Sink(Protocol):
    def sample(self, snap: Snapshot) -> None: ...


@dataclass(frozen=True)
class FlowLine:
    """Measurement segment; crossings are counted in the +normal direction."""

    a: tuple[float, float]
    b: tuple[float, float]
    name: str = "line"


@dataclass
class SimulationResult:
    t_end: float
    agents: list[Agent]
    crossings: list[tuple[float, int, str]] = field(default_factory=list)
    absorbed: list[tuple[float, int]] = field(default_factory=list)
    min_distance: float = math.inf
    collisions: list[tuple[float, int, int, float]] = field(default_factory=list)
    steps_accepted: int = 0
    steps_rejected: int = 0
    evaluations: int = 0
    wall_clock: float = 0.0
    invariant_violations: int = 0
    n_initial: int = 0


class TrajectoryRecorder:
    """Collects every snapshot; ``write_csv`` emits ``t,id,x,y,w,vdes``."""

    def __init__(self):
        self.rows: list[np.ndarray] = []

    def sample(self, snap: Snapshot) -> None:
        n = len(snap.ids)
        block = np.column_stack([np.full(n, snap.t), snap.ids, snap.pos, snap.w, snap.v_des])
        self.rows.append(block)

    def array(self) -> np.ndarray:
        return np.vstack(self.rows) if self.rows else np.zeros((0, 6))

    def write_csv(self, path) -> None:
        arr = self.array()
        with open(path, "w") as fh:
            fh.write("t,id,x,y,w,vdes\n")
            for r in arr:
                fh.write(f"{r[0]:.4f},{int(r[1])},{r[2]:.6f},{r[3]:.6f},{r[4]:.6f},{r[5]:.6f}\n")


def _crossings(old: np.ndarray, new: np.ndarray, line: FlowLine):
    """Fractions ``s`` in (0, 1] where the path old->new crosses the line forward."""
    a = np.asarray(line.a, float)
    b = np.asarray(line.b, float)
    d = b - a
    normal = np.array([d[1], -d[0]])
    s0 = (old - a) @ normal
    s1 = (new - a) @ normal
    hit = (s0 < 0) & (s1 >= 0)
    frac = np.where(hit, s0 / np.where(hit, s0 - s1, 1.0), 0.0)
    cross_pt = old + frac[:, None] * (new - old)
    along = ((cross_pt - a) @ d) / (d @ d)
    hit &= (along >= 0) & (along <= 1)
    return hit, frac


class Simulation:
    """Stateful driver; :func:`run_simulation` is the one-call wrapper."""

    def __init__(self, cfg: Config, icfg: IntegratorConfig | None = None, agents: list[Agent] | None = None,
                 fields: dict | None = None, flow_lines: list[FlowLine] | None = None):
        self.cfg = cfg
        self.scenario = cfg.scenario
        self.params = cfg.model
        self.icfg = icfg or IntegratorConfig.from_dict(cfg.integrator)
        self.fields = fields if fields is not None else build_fields(self.scenario, self.params)
        if agents is None:
            agents = build_agents(self.scenario, cfg.population)
        self.agents = {a.id: a for a in agents}
        alive = [a for a in agents if a.alive]
        self.ids = np.array([a.id for a in alive], dtype=int)
        self.v_des = np.array([a.v_des for a in alive], dtype=float)
        self.target_ids = np.array([a.target_id for a in alive], dtype=int)
        self.y = np.array([[a.x[0], a.x[1], a.w] for a in alive], dtype=float).reshape(-1)
        self.t = 0.0
        self.h = self.icfg.h_init
        self.flow_lines = flow_lines or []
        self.result = SimulationResult(t_end=0.0, agents=agents, n_initial=len(alive))
        self.w_cap = float(self.v_des.max()) if len(self.v_des) else 0.0
        self._absorbers = {
            t.id: t.points for t in self.scenario.targets
            if t.points is not None and not isinstance(self.fields.get(t.id), ConstantField)
        }
        self.dyn = None
        self._evals_before = 0
        self._rebuild()

    def _rebuild(self):
        if getattr(self, "dyn", None) is not None:
            self._evals_before += self.dyn.evaluations
        crowd = Crowd(self.ids, self.v_des, self.target_ids)
        self.dyn = CrowdDynamics(self.scenario, self.params, self.fields, crowd, self.icfg.exact_neighbor_rebuild)
        self._k1 = None

    def snapshot(self, t: float, y: np.ndarray) -> Snapshot:
        s = y.reshape(-1, 3)
        pos = s[:, :2].copy()
        if self.scenario.periodic:
            pos[:, 0] = self._wrap(pos[:, 0])
        return Snapshot(t, self.ids.copy(), pos, s[:, 2].copy(), self.v_des.copy(), self.target_ids.copy(), self.dyn)

    def _wrap(self, x):
        x0 = self.scenario.domain[0]
        return x0 + np.mod(x - x0, self.scenario.length_x)

    def _monitor_distance(self):
        i, j = self.dyn._pairs if self.dyn._pairs is not None else (np.zeros(0, int), np.zeros(0, int))
        if len(i) == 0:
            return
        pos = self.y.reshape(-1, 3)[:, :2]
        off = pos[j] - pos[i]
        off[:, 0] = min_image(off[:, 0], self.dyn.periodic_length)
        d = np.hypot(off[:, 0], off[:, 1])
        k = int(np.argmin(d))
        if d[k] < self.result.min_distance:
            self.result.min_distance = float(d[k])
        thr = self.params.collision_threshold
        bad = np.nonzero((d < thr) & (i < j))[0]
        for b in bad[:10]:
            self.result.collisions.append((self.t, int(self.ids[i[b]]), int(self.ids[j[b]]), float(d[b])))

    def run(self, duration: float, sinks: list | None = None, stop_when_empty: bool = True) -> SimulationResult:
        sinks = sinks or []
        t_start = time.perf_counter()
        dt_out = self.icfg.output_dt
        t_final = self.t + duration
        next_out = self.t
        if next_out <= self.t + 1e-12:
            snap = self.snapshot(self.t, self.y)
            for s in sinks:
                s.sample(snap)
            next_out = self.t + dt_out
        while self.t < t_final - 1e-12:
            if len(self.ids) == 0:
                if stop_when_empty:
                    break
                self.t = t_final
                break
            h = min(self.h, t_final - self.t)
            self.dyn.prepare(self.y, h)
            self._monitor_distance()
            res = step(self.dyn, self.y, self.t, h, self.icfg, self._k1)
            self.result.evaluations = self._evals_before + self.dyn.evaluations
            if not res.accepted:
                self.result.steps_rejected += 1
                self._k1 = res.k[0]
                if h <= self.icfg.h_min:
                    worst = int(np.argmax(np.abs(res.k[-1]))) // 3
                    raise StepSizeError(
                        f"step size collapsed at t={self.t:.4f}; worst agent {int(self.ids[worst])}"
                    )
                self.h = res.h_next
                continue
            self.result.steps_accepted += 1
            y_old, t_old = self.y, self.t
            self.t = t_old + h
            self.y = res.y
            self.h = res.h_next
            self._k1 = res.k[6]
            # fixed-cadence samples from the continuous extension
            while next_out <= self.t + 1e-9:
                theta = (next_out - t_old) / h
                ys = dense_output(y_old, h, res.k, theta)[0]
                snap = self.snapshot(next_out, ys)
                for s in sinks:
                    s.sample(snap)
                next_out += dt_out
            self._after_step(y_old, t_old, h)
        self.result.t_end = self.t
        self.result.wall_clock += time.perf_counter() - t_start
        self._sync_agents()
        return self.result

    def _after_step(self, y_old: np.ndarray, t_old: float, h: float):
        s = self.y.reshape(-1, 3)
        w = s[:, 2]
        tol = 1e-3
        bad = (w < -tol) | (w > self.w_cap + tol)
        if np.any(bad):
            self.result.invariant_violations += int(bad.sum())
            log.warning("relaxed speed left [0, v_max] for %d agents at t=%.3f", int(bad.sum()), self.t)
        old = y_old.reshape(-1, 3)[:, :2]
        new = s[:, :2]
        for line in self.flow_lines:
            hit, frac = _crossings(old, new, line)
            for k in np.nonzero(hit)[0]:
                self.result.crossings.append((t_old + frac[k] * h, int(self.ids[k]), line.name))
        if self.scenario.periodic:
            s[:, 0] = self._wrap(s[:, 0])
        if self._absorbers:
            dead = np.zeros(len(self.ids), dtype=bool)
            for tid, poly in self._absorbers.items():
                mine = self.target_ids == tid
                if mine.any():
                    dead[mine] = geometry.points_in_polygon(new[mine], poly)
            if dead.any():
                for k in np.nonzero(dead)[0]:
                    agent = self.agents[int(self.ids[k])]
                    agent.alive = False
                    agent.x = new[k].copy()
                    agent.w = float(s[k, 2])
                    self.result.absorbed.append((self.t, int(self.ids[k])))
                keep = ~dead
                self.ids = self.ids[keep]
                self.v_des = self.v_des[keep]
                self.target_ids = self.target_ids[keep]
                self.y = s[keep].reshape(-1)
                self._rebuild()

    def _sync_agents(self):
        s = self.y.reshape(-1, 3)
        for k, aid in enumerate(self.ids):
            a = self.agents[int(aid)]
            a.x = s[k, :2].copy()
            a.w = float(s[k, 2])


def run_simulation(cfg: Config, duration: float, sinks: list | None = None, icfg: IntegratorConfig | None = None,
                   agents: list[Agent] | None = None, flow_lines: list[FlowLine] | None = None,
                   fields: dict | None = None) -> SimulationResult:
    sim = Simulation(cfg, icfg, agents=agents, fields=fields, flow_lines=flow_lines)
    return sim.run(duration, sinks)

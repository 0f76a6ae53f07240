"""Runners for the validation scenarios; each returns a summary dict."""

from __future__ import annotations

import time

import numpy as np

from . import presets
from .integrator import FlowLine, IntegratorConfig, Simulation, TrajectoryRecorder
from .measurement import (
    DensitySpeedSink,
    SpeedSink,
    flow_rate,
    lane_counts,
    speed_statistics,
)
from .scenario import config_from_dict


def flow_lines_from(measurement: dict) -> list[FlowLine]:
    return [FlowLine(tuple(f["a"]), tuple(f["b"]), f.get("name", "line")) for f in measurement.get("flow_lines", [])]


class SnapshotAt:
    """Keeps the positions of the first snapshot at or after each requested time."""

    def __init__(self, times):
        self.pending = sorted(times)
        self.snaps = {}

    def sample(self, snap) -> None:
        while self.pending and snap.t + 1e-9 >= self.pending[0]:
            self.snaps[self.pending.pop(0)] = (snap.t, snap.pos.copy(), snap.target_ids.copy(), snap.ids.copy())


def cone_metrics(pos: np.ndarray, entry_x: float, band: float = 1.0) -> dict:
    """Depth of the waiting crowd versus its spread along the entry line."""
    waiting = pos[pos[:, 0] < entry_x]
    if len(waiting) < 2:
        return {"depth": 0.0, "entry_spread": 0.0, "n_waiting": len(waiting)}
    depth = float(entry_x - waiting[:, 0].min())
    near = waiting[waiting[:, 0] >= entry_x - band]
    spread = float(np.ptp(near[:, 1])) if len(near) >= 2 else 0.0
    return {"depth": depth, "entry_spread": spread, "n_waiting": len(waiting)}


def run_bottleneck(width: float = 1.0, seed: int = 0, count: int = 180, duration: float = 180.0,
                   icfg: IntegratorConfig | None = None, model: dict | None = None, cone_time: float = 30.0,
                   sinks: list | None = None) -> dict:
    d = presets.bottleneck(width, count=count, seed=seed)
    if model:
        d["model"] = dict(model)
    cfg = config_from_dict(d)
    snaps = SnapshotAt([cone_time])
    sim = Simulation(cfg, icfg, flow_lines=flow_lines_from(d["measurement"]))
    res = sim.run(duration, [snaps] + list(sinks or []))
    times = sorted(c[0] for c in res.crossings)
    out = {
        "width": width,
        "seed": seed,
        "crossings": len(times),
        "crossing_times": times,
        "crossing_ids": [c[1] for c in sorted(res.crossings)],
        "J": flow_rate(times),
        "min_distance": res.min_distance,
        "collisions": res.collisions,
        "t_end": res.t_end,
        "wall_clock": res.wall_clock,
        "invariant_violations": res.invariant_violations,
    }
    out["J_specific"] = out["J"] / width
    if cone_time in snaps.snaps:
        out["cone"] = cone_metrics(snaps.snaps[cone_time][1], d["measurement"]["bottleneck_entry"])
    return out


def run_corridor(d: dict, icfg: IntegratorConfig | None = None, density_every: float | None = None,
                 speed_every: float = 0.5) -> dict:
    """Run a corridor preset; collects speeds after the warm-up."""
    cfg = config_from_dict(d)
    m = d["measurement"]
    speeds = SpeedSink(warmup=m.get("warmup", 30.0), every=speed_every)
    sinks = [speeds]
    dens = None
    if density_every:
        dens = DensitySpeedSink(cfg.scenario.domain, cfg.scenario.length_x, every=density_every,
                                warmup=m.get("warmup", 30.0))
        sinks.append(dens)
    sim = Simulation(cfg, icfg)
    res = sim.run(m.get("duration", 180.0), sinks)
    v = speeds.all()
    return {
        "rho": m.get("rho_global"),
        "n": res.n_initial,
        "speeds": v,
        "mean_speed": float(v.mean()) if len(v) else float("nan"),
        "std_speed": float(v.std()) if len(v) else float("nan"),
        "density_rows": dens.rows if dens else [],
        "min_distance": res.min_distance,
        "collisions": res.collisions,
        "wall_clock": res.wall_clock,
        "t_end": res.t_end,
        "invariant_violations": res.invariant_violations,
    }


def density_sweep(builder, rhos, seed: int = 0, icfg: IntegratorConfig | None = None, **kw):
    """Run ``builder(rho=..)`` over the ladder and filter the normalised moments."""
    runs = [run_corridor(builder(rho=r, seed=seed, **kw), icfg) for r in rhos]
    stats = speed_statistics({r: run["speeds"] for r, run in zip(rhos, runs)})
    return runs, stats


def run_lanes(seed: int = 0, rho: float = 0.3, duration: float = 120.0,
              icfg: IntegratorConfig | None = None) -> dict:
    d = presets.lanes(rho=rho, seed=seed, duration=duration)
    cfg = config_from_dict(d)
    snaps = SnapshotAt([duration])
    sim = Simulation(cfg, icfg)
    res = sim.run(duration, [snaps])
    t, pos, tids, _ = snaps.snaps.get(duration, (res.t_end, None, None, None))
    if pos is None:
        s = sim.y.reshape(-1, 3)
        pos, tids = s[:, :2], sim.target_ids
    L = d["domain"]["xmax"] - d["domain"]["xmin"]
    W = d["domain"]["ymax"] - d["domain"]["ymin"]
    per_section = lane_counts(pos, tids, L, W, d["measurement"]["section"])
    median = {k: (int(np.median(v)) if v else 0) for k, v in per_section.items()}
    return {
        "seed": seed,
        "t": t,
        "sections": per_section,
        "lanes": median,
        "min_distance": res.min_distance,
        "wall_clock": res.wall_clock,
        "positions": pos,
        "target_ids": tids,
    }


def run_standoff(duration: float = 10.0, icfg: IntegratorConfig | None = None, **kw) -> dict:
    d = presets.standoff(**kw)
    cfg = config_from_dict(d)
    rec = TrajectoryRecorder()
    sim = Simulation(cfg, icfg)
    sim.run(duration, [rec])
    arr = rec.array()
    gray = arr[arr[:, 1] == d["measurement"]["gray_id"]]
    drift = np.hypot(gray[:, 2] - gray[0, 2], gray[:, 3] - gray[0, 3])
    return {"max_displacement": float(drift.max()), "p_p": d["model"]["p_p"], "p_B": d["model"]["p_B"]}


def performance(n: int = 1000, duration: float = 60.0, rho: float = 2.0, width: float = 5.0) -> dict:
    """Wall-clock of a periodic corridor with ``n`` agents at density ``rho``."""
    length = n / (rho * width)
    d = presets.corridor(length, width, rho, name="performance", duration=duration)
    cfg = config_from_dict(d)
    sim = Simulation(cfg)
    t0 = time.perf_counter()
    res = sim.run(duration)
    wall = time.perf_counter() - t0
    return {"n": res.n_initial, "simulated": res.t_end, "wall_clock": wall,
            "realtime_ratio": res.t_end / wall if wall > 0 else float("inf"),
            "steps": res.steps_accepted, "rejected": res.steps_rejected}

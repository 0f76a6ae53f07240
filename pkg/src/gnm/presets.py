"""Built-in experiment geometries as plain config dictionaries.

Each builder returns a JSON-ready dict accepted by
:func:`gnm.scenario.config_from_dict`. Default instances are also shipped
as files under ``gnm/data``.
"""

from __future__ import annotations

import json
import math
from importlib import resources

from .scenario import ConfigError, config_from_dict

PRESETS = ("bottleneck", "fundamental-diagram", "stop-and-go", "lanes", "standoff")

# second parameter set, calibrated with an extra layer of neighbours
TWO_LAYER_PARAMS = {"R_p": 1.0, "p_p": 1.79, "R_B": 0.25, "p_B": 11.3}

BOTTLENECK_LENGTH = 4.0
BOTTLENECK_WIDTHS = (0.8, 1.0, 1.2, 1.4, 1.6, 2.0)


def _walls(x0: float, x1: float, ys) -> list[dict]:
    return [{"type": "segment", "points": [[x0, y], [x1, y]]} for y in ys]


def _rect(x0, y0, x1, y1) -> list[list[float]]:
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]


def bottleneck(width: float = 1.0, count: int = 180, seed: int = 0) -> dict:
    """Waiting room 12 x 10 m, a 4 m long bottleneck, then the exit target.

    The flow line sits at the bottleneck exit (x = 16).
    """
    if not (0.0 < width < 8.0):
        raise ConfigError("width", f"bottleneck width must lie in (0, 8) m, got {width}")
    if count < 0:
        raise ConfigError("count", "must be non-negative")
    H, room, L, xmax = 10.0, 12.0, BOTTLENECK_LENGTH, 18.0
    lo, hi = 0.5 * (H - width), 0.5 * (H + width)
    x_end = room + L
    obstacles = [
        {"type": "polygon", "points": _rect(room, 0.0, x_end, lo)},
        {"type": "polygon", "points": _rect(room, hi, x_end, H)},
        {"type": "segment", "points": [[0.0, 0.0], [room, 0.0]]},
        {"type": "segment", "points": [[0.0, H], [room, H]]},
        {"type": "segment", "points": [[0.0, 0.0], [0.0, H]]},
        {"type": "segment", "points": [[x_end, 0.0], [xmax, 0.0]]},
        {"type": "segment", "points": [[x_end, H], [xmax, H]]},
    ]
    return {
        "name": f"bottleneck-w{width:g}",
        "domain": {"xmin": 0.0, "ymin": 0.0, "xmax": xmax, "ymax": H},
        "boundary": "closed",
        "grid_h": 0.1,
        "obstacles": obstacles,
        "targets": [{"id": 1, "points": _rect(xmax - 1.0, 0.0, xmax, H)}],
        "sources": [{"region": [0.5, 0.5, room - 0.5, H - 0.5], "count": count, "target_id": 1,
                     "policy": "random", "min_spacing": 0.5}],
        "population": {"seed": seed},
        "integrator": {"output_dt": 0.1},
        "measurement": {
            "flow_lines": [{"a": [x_end, 0.0], "b": [x_end, H], "name": "exit"}],
            "duration": 180.0,
            "bottleneck_entry": room,
            "width": width,
        },
    }


def corridor(length: float = 40.0, width: float = 4.0, rho: float = 1.0, seed: int = 0,
             model: dict | None = None, name: str = "corridor", duration: float = 180.0,
             warmup: float = 30.0) -> dict:
    """Periodic unidirectional corridor at global density ``rho`` (P/m^2)."""
    if not rho >= 0:
        raise ConfigError("rho", f"density must be non-negative, got {rho}")
    count = int(round(rho * length * width))
    d = {
        "name": f"{name}-rho{rho:g}",
        "domain": {"xmin": 0.0, "ymin": 0.0, "xmax": length, "ymax": width},
        "boundary": "periodic-x",
        "grid_h": 0.1,
        "obstacles": _walls(0.0, length, (0.0, width)),
        "targets": [{"id": 1, "direction": [1.0, 0.0]}],
        "sources": [{"region": [0.0, 0.0, length, width], "count": count, "target_id": 1,
                     "policy": "lattice", "min_spacing": 0.3}],
        "population": {"seed": seed},
        "integrator": {"output_dt": 0.1},
        "measurement": {"duration": duration, "warmup": warmup, "rho_global": rho},
    }
    if model:
        d["model"] = dict(model)
    return d


def fundamental_diagram(rho: float = 1.0, seed: int = 0, two_layer: bool = True, **kw) -> dict:
    """40 x 4 m periodic corridor; uses the two-layer parameter set by default."""
    model = dict(TWO_LAYER_PARAMS) if two_layer else None
    return corridor(40.0, 4.0, rho, seed, model=model, name="fundamental-diagram", **kw)


def stop_and_go(rho: float = 4.0, seed: int = 0, **kw) -> dict:
    """50 x 4 m periodic corridor with the default parameters."""
    return corridor(50.0, 4.0, rho, seed, name="stop-and-go", **kw)


def lanes(rho: float = 0.3, seed: int = 0, length: float = 150.0, width: float = 10.0,
          duration: float = 120.0) -> dict:
    """Bidirectional walkway: left half walks right, right half walks left.

    The walkway is periodic along x so the crowd is still on it when the
    snapshot is taken.
    """
    if not rho > 0:
        raise ConfigError("rho", f"density must be positive, got {rho}")
    half = int(round(rho * length * width / 2.0))
    mid = 0.5 * length
    return {
        "name": f"lanes-rho{rho:g}",
        "domain": {"xmin": 0.0, "ymin": 0.0, "xmax": length, "ymax": width},
        "boundary": "periodic-x",
        "grid_h": 0.1,
        "obstacles": _walls(0.0, length, (0.0, width)),
        "targets": [{"id": 1, "direction": [1.0, 0.0]}, {"id": 2, "direction": [-1.0, 0.0]}],
        "sources": [
            {"region": [0.0, 0.3, mid, width - 0.3], "count": half, "target_id": 1, "policy": "random"},
            {"region": [mid, 0.3, length, width - 0.3], "count": half, "target_id": 2, "policy": "random"},
        ],
        "population": {"seed": seed},
        "integrator": {"output_dt": 0.5},
        "measurement": {"duration": duration, "section": 25.0, "rho_global": rho},
    }


def standoff(p_p: float | None = None, p_B: float | None = None, rho_max: float = 7.0,
             wall_distance: float = 0.2, corridor_length: float = 10.0) -> dict:
    """The calibration configuration as a live simulation.

    The walker sits ``wall_distance`` above a wall with four frozen lattice
    neighbours (``v_des = 0``) and wants to walk along the wall. Heights
    default to the values the standoff solve returns for this geometry.
    """
    from .calibration import calibrate, default_standoff

    sc = default_standoff(rho_max, wall_distance)
    model = {}
    if p_p is None or p_B is None:
        res = calibrate(sc, 0.70, 0.25)
        p_p = res.p_p if p_p is None else p_p
        p_B = res.p_B if p_B is None else p_B
    model.update({"p_p": p_p, "p_B": p_B, "rho_max": rho_max})
    gx, gy = 0.5 * corridor_length, wall_distance
    agents = [{"x": gx, "y": gy, "target_id": 1, "v_des": 1.34, "w": 0.0}]
    for qx, qy in sc.neighbors:
        agents.append({"x": gx + qx, "y": gy + qy, "target_id": 1, "v_des": 0.0, "w": 0.0})
    top = gy + 2.0
    return {
        "name": "standoff",
        "domain": {"xmin": 0.0, "ymin": 0.0, "xmax": corridor_length, "ymax": top},
        "boundary": "periodic-x",
        "grid_h": 0.1,
        "obstacles": _walls(0.0, corridor_length, (0.0,)),
        "targets": [{"id": 1, "direction": [1.0, 0.0]}],
        "agents": agents,
        "model": model,
        "measurement": {"duration": 10.0, "gray_id": 0},
    }


def build(name: str, **kw) -> dict:
    """Preset dictionary by name; keyword arguments go to the builder."""
    builders = {
        "bottleneck": bottleneck,
        "fundamental-diagram": fundamental_diagram,
        "stop-and-go": stop_and_go,
        "lanes": lanes,
        "standoff": standoff,
    }
    if name not in builders:
        raise ConfigError("preset", f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return builders[name](**kw)


def shipped(name: str) -> dict:
    """Default preset as stored in the package data directory."""
    path = resources.files("gnm") / "data" / f"{name}.json"
    if not path.is_file():
        raise ConfigError("preset", f"no shipped preset {name!r}")
    return json.loads(path.read_text())


def write_shipped(directory) -> list:
    """Regenerate the shipped default preset files into ``directory``."""
    from pathlib import Path

    out = []
    for name in PRESETS:
        p = Path(directory) / f"{name}.json"
        p.write_text(json.dumps(build(name), indent=2) + "\n")
        out.append(p)
    return out


def load(name: str, **kw):
    return config_from_dict(build(name, **kw))


def rho_ladder(start: float, stop: float, step: float) -> list[float]:
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 10) for k in range(n)]

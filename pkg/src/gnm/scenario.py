"""Scenario description, model/population parameters and JSON config I/O.

A config file is a JSON object with the sections ``domain``, ``boundary``,
``grid_h``, ``obstacles``, ``targets``, ``sources``, ``agents``, ``model``,
``population``, ``integrator`` and ``measurement``. Lengths are in metres,
speeds in m/s, densities in P/m^2. Absent ``model``/``population`` entries
take the calibrated defaults.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import geometry


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ModelParams:
    kappa: float = 0.6
    tau: float = 0.5
    p_p: float = 3.59
    R_p: float = 0.70
    p_B: float = 9.96
    R_B: float = 0.25
    eps: float = 0.1
    rho_max: float = 7.0
    moll_radius: float = 0.5
    logistic_x0: float = 0.3
    logistic_R: float = 0.03
    collision_threshold: float = 0.3

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"model.{f.name}", f"must be a finite positive number, got {v!r}")
        if self.eps >= self.R_p:
            raise ConfigError("model.eps", "must be smaller than R_p")
        if self.eps >= self.R_B:
            raise ConfigError("model.eps", "must be smaller than R_B")

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class PopulationParams:
    v_mean: float = 1.34
    v_std: float = 0.26
    v_min: float = 0.3
    v_max: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.v_min < self.v_max:
            raise ConfigError("population.v_min", "need 0 < v_min < v_max")
        if self.v_std < 0:
            raise ConfigError("population.v_std", "must be non-negative")


@dataclass(frozen=True, eq=False)
class Obstacle:
    kind: str  # "polygon" or "segment"
    points: np.ndarray

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return geometry.polygon_edges(self.points, closed=self.kind == "polygon")


@dataclass(frozen=True, eq=False)
class Target:
    id: int
    points: np.ndarray | None = None
    # constant walking direction, used instead of a floor field in periodic corridors
    direction: tuple[float, float] | None = None


@dataclass(frozen=True)
class Source:
    region: tuple[float, float, float, float]
    count: int
    target_id: int
    policy: str = "random"  # "random" (rejection sampling) or "lattice"
    min_spacing: float = 0.5


@dataclass(frozen=True)
class AgentSpec:
    """An explicitly placed agent; ``v_des=None`` draws from the population."""

    x: float
    y: float
    target_id: int
    v_des: float | None = None
    w: float = 0.0


@dataclass
class Agent:
    id: int
    x: np.ndarray
    w: float
    v_des: float
    target_id: int
    alive: bool = True


@dataclass(frozen=True, eq=False)
class Scenario:
    domain: tuple[float, float, float, float]
    targets: tuple[Target, ...]
    obstacles: tuple[Obstacle, ...] = ()
    sources: tuple[Source, ...] = ()
    agents: tuple[AgentSpec, ...] = ()
    boundary: str = "closed"
    grid_h: float = 0.1
    name: str = "scenario"

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic-x"

    @property
    def length_x(self) -> float:
        return self.domain[2] - self.domain[0]

    def target(self, target_id: int) -> Target:
        for t in self.targets:
            if t.id == target_id:
                return t
        ids = [t.id for t in self.targets]
        raise KeyError(f"unknown target id {target_id}; available: {ids}")

    def obstacle_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All obstacle segments plus the owning obstacle index of each."""
        starts, ends, owner = [], [], []
        for k, ob in enumerate(self.obstacles):
            a, b = ob.edges()
            starts.append(a)
            ends.append(b)
            owner.append(np.full(len(a), k))
        if not starts:
            return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=int)
        return np.concatenate(starts), np.concatenate(ends), np.concatenate(owner)

    def inside_domain(self, x: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        x = np.atleast_2d(x)
        x0, y0, x1, y1 = self.domain
        return (
            (x[:, 0] >= x0 - tol) & (x[:, 0] <= x1 + tol)
            & (x[:, 1] >= y0 - tol) & (x[:, 1] <= y1 + tol)
        )

    def inside_obstacle(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.zeros(len(x), dtype=bool)
        for ob in self.obstacles:
            if ob.kind == "polygon":
                out |= geometry.points_in_polygon(x, ob.points)
        return out


@dataclass
class Config:
    scenario: Scenario
    model: ModelParams = field(default_factory=ModelParams)
    population: PopulationParams = field(default_factory=PopulationParams)
    integrator: dict[str, Any] = field(default_factory=dict)
    measurement: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# parsing / validation

def _points(raw, field_name: str, min_len: int) -> np.ndarray:
    try:
        pts = np.asarray(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(field_name, f"not a list of points ({exc})") from None
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < min_len:
        raise ConfigError(field_name, f"need at least {min_len} [x, y] points")
    if not np.all(np.isfinite(pts)):
        raise ConfigError(field_name, "non-finite coordinate")
    return pts


def _params(cls, raw: dict | None, section: str):
    raw = dict(raw or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(section, f"unknown keys {sorted(unknown)}")
    return cls(**raw)


def scenario_from_dict(d: dict) -> Scenario:
    try:
        dom = d["domain"]
        domain = (float(dom["xmin"]), float(dom["ymin"]), float(dom["xmax"]), float(dom["ymax"]))
    except (KeyError, TypeError, ValueError):
        raise ConfigError("domain", "need xmin, ymin, xmax, ymax") from None
    if not (domain[2] > domain[0] and domain[3] > domain[1]):
        raise ConfigError("domain", "empty rectangle")

    boundary = d.get("boundary", "closed")
    if boundary not in ("closed", "periodic-x"):
        raise ConfigError("boundary", f"must be 'closed' or 'periodic-x', got {boundary!r}")
    grid_h = float(d.get("grid_h", 0.1))
    if not grid_h > 0:
        raise ConfigError("grid_h", "must be positive")

    obstacles = []
    for k, ob in enumerate(d.get("obstacles", [])):
        kind = ob.get("type", "polygon")
        if kind not in ("polygon", "segment"):
            raise ConfigError(f"obstacles[{k}].type", f"unknown obstacle type {kind!r}")
        pts = _points(ob.get("points"), f"obstacles[{k}].points", 3 if kind == "polygon" else 2)
        obstacles.append(Obstacle(kind, pts))

    targets = []
    for k, t in enumerate(d.get("targets", [])):
        if "id" not in t:
            raise ConfigError(f"targets[{k}].id", "missing")
        pts = _points(t["points"], f"targets[{k}].points", 3) if t.get("points") is not None else None
        direction = t.get("direction")
        if direction is not None:
            dv = np.asarray(direction, dtype=float)
            n = float(np.hypot(*dv))
            if dv.shape != (2,) or not n > 0:
                raise ConfigError(f"targets[{k}].direction", "need a non-zero 2-vector")
            direction = (float(dv[0] / n), float(dv[1] / n))
        if pts is None and direction is None:
            raise ConfigError(f"targets[{k}]", "need points or direction")
        targets.append(Target(int(t["id"]), pts, direction))
    if not targets:
        raise ConfigError("targets", "at least one target is required")
    if len({t.id for t in targets}) != len(targets):
        raise ConfigError("targets", "duplicate target ids")
    target_ids = {t.id for t in targets}

    sources = []
    for k, s in enumerate(d.get("sources", [])):
        try:
            region = tuple(float(v) for v in s["region"])
            src = Source(
                region=region,
                count=int(s["count"]),
                target_id=int(s["target_id"]),
                policy=s.get("policy", "random"),
                min_spacing=float(s.get("min_spacing", 0.5)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"sources[{k}]", f"malformed source ({exc})") from None
        if len(region) != 4 or not (region[2] > region[0] and region[3] > region[1]):
            raise ConfigError(f"sources[{k}].region", "need [xmin, ymin, xmax, ymax]")
        if src.count < 0:
            raise ConfigError(f"sources[{k}].count", "must be non-negative")
        if src.policy not in ("random", "lattice"):
            raise ConfigError(f"sources[{k}].policy", f"unknown policy {src.policy!r}")
        if src.target_id not in target_ids:
            raise ConfigError(f"sources[{k}].target_id", f"unknown target {src.target_id}")
        sources.append(src)

    agents = []
    for k, a in enumerate(d.get("agents", [])):
        try:
            spec = AgentSpec(
                x=float(a["x"]), y=float(a["y"]), target_id=int(a["target_id"]),
                v_des=None if a.get("v_des") is None else float(a["v_des"]),
                w=float(a.get("w", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"agents[{k}]", f"malformed agent ({exc})") from None
        if spec.target_id not in target_ids:
            raise ConfigError(f"agents[{k}].target_id", f"unknown target {spec.target_id}")
        agents.append(spec)

    sc = Scenario(
        domain=domain,
        targets=tuple(targets),
        obstacles=tuple(obstacles),
        sources=tuple(sources),
        agents=tuple(agents),
        boundary=boundary,
        grid_h=grid_h,
        name=str(d.get("name", "scenario")),
    )
    validate_scenario(sc)
    return sc


def validate_scenario(sc: Scenario) -> None:
    x0, y0, x1, y1 = sc.domain
    tol = 1e-9
    for k, ob in enumerate(sc.obstacles):
        if not np.all(sc.inside_domain(ob.points, tol=max(tol, 2.0 * sc.grid_h))):
            raise ConfigError(f"obstacles[{k}]", "lies outside the domain")
    for k, t in enumerate(sc.targets):
        if t.points is not None and not np.all(sc.inside_domain(t.points, tol)):
            raise ConfigError("targets", f"target {t.id} (targets[{k}]) lies outside the domain")
        if sc.periodic and t.direction is None:
            raise ConfigError("targets", f"target {t.id} needs a direction in a periodic-x domain")
    for k, s in enumerate(sc.sources):
        if not np.all(sc.inside_domain(geometry.rectangle(*s.region), tol)):
            raise ConfigError(f"sources[{k}].region", "lies outside the domain")
    for k, a in enumerate(sc.agents):
        if not sc.inside_domain(np.array([a.x, a.y]), tol)[0]:
            raise ConfigError(f"agents[{k}]", "lies outside the domain")
    if sc.periodic and any(ob.kind == "polygon" for ob in sc.obstacles):
        raise ConfigError("boundary", "periodic-x only supports straight corridor walls (segments)")


def scenario_to_dict(sc: Scenario) -> dict:
    x0, y0, x1, y1 = sc.domain
    out: dict[str, Any] = {
        "name": sc.name,
        "domain": {"xmin": x0, "ymin": y0, "xmax": x1, "ymax": y1},
        "boundary": sc.boundary,
        "grid_h": sc.grid_h,
        "obstacles": [{"type": o.kind, "points": o.points.tolist()} for o in sc.obstacles],
        "targets": [],
        "sources": [dataclasses.asdict(s) for s in sc.sources],
        "agents": [dataclasses.asdict(a) for a in sc.agents],
    }
    for t in sc.targets:
        td: dict[str, Any] = {"id": t.id}
        if t.points is not None:
            td["points"] = t.points.tolist()
        if t.direction is not None:
            td["direction"] = list(t.direction)
        out["targets"].append(td)
    for s in out["sources"]:
        s["region"] = list(s["region"])
    return out


def config_from_dict(d: dict) -> Config:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    return Config(
        scenario=scenario_from_dict(d),
        model=_params(ModelParams, d.get("model"), "model"),
        population=_params(PopulationParams, d.get("population"), "population"),
        integrator=dict(d.get("integrator", {})),
        measurement=dict(d.get("measurement", {})),
    )


def config_to_dict(cfg: Config) -> dict:
    d = scenario_to_dict(cfg.scenario)
    d["model"] = dataclasses.asdict(cfg.model)
    d["population"] = dataclasses.asdict(cfg.population)
    d["integrator"] = dict(cfg.integrator)
    d["measurement"] = dict(cfg.measurement)
    return d


def load_config(path: str | Path) -> Config:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: parse error: {exc}") from None
    return config_from_dict(raw)


def load_scenario(path: str | Path) -> tuple[Scenario, ModelParams, PopulationParams]:
    cfg = load_config(path)
    return cfg.scenario, cfg.model, cfg.population


def save_config(cfg: Config, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)


# ---------------------------------------------------------------------------
# population

def draw_desired_speeds(n: int, population: PopulationParams, rng: np.random.Generator) -> np.ndarray:
    """Normal desired speeds, redrawn until they fall inside ``[v_min, v_max]``."""
    out = rng.normal(population.v_mean, population.v_std, size=n)
    bad = (out < population.v_min) | (out > population.v_max)
    while np.any(bad):
        out[bad] = rng.normal(population.v_mean, population.v_std, size=int(bad.sum()))
        bad = (out < population.v_min) | (out > population.v_max)
    return out


class SpawnError(RuntimeError):
    pass


def _placement_ok(p: np.ndarray, scenario: Scenario | None, clearance: float) -> bool:
    if scenario is None or not scenario.obstacles:
        return True
    if scenario.inside_obstacle(p)[0]:
        return False
    a, b, _ = scenario.obstacle_edges()
    return geometry.distance_to_segments(p, a, b)[0] >= clearance


def spawn_agents(
    source: Source,
    population: PopulationParams,
    rng: np.random.Generator,
    scenario: Scenario | None = None,
    existing: np.ndarray | None = None,
    first_id: int = 0,
    max_tries: int = 200_000,
) -> list[Agent]:
    """Place ``source.count`` agents in the source rectangle.

    ``random`` uses rejection sampling with ``min_spacing`` between agents
    (also against ``existing`` positions) and half that clearance to
    obstacles. ``lattice`` fills the rectangle with a regular grid of the
    requested count, which reaches densities rejection sampling cannot.
    Every agent starts at rest.
    """
    n = source.count
    if n == 0:
        return []
    xmin, ymin, xmax, ymax = source.region
    placed = np.zeros((0, 2)) if existing is None else np.asarray(existing, dtype=float).reshape(-1, 2)
    n_prior = len(placed)
    clearance = 0.5 * source.min_spacing

    if source.policy == "lattice":
        width, height = xmax - xmin, ymax - ymin
        spacing = math.sqrt(width * height / n)
        ny = max(1, int(round(height / spacing)))
        nx = int(math.ceil(n / ny))
        gx = xmin + (np.arange(nx) + 0.5) * width / nx
        gy = ymin + (np.arange(ny) + 0.5) * height / ny
        grid = np.array([(x, y) for x in gx for y in gy])
        keep = np.sort(rng.choice(len(grid), size=n, replace=False))
        pos = grid[keep]
        # small jitter breaks the exact symmetry of the lattice
        jitter = 0.05 * min(width / nx, height / ny)
        pos = pos + rng.uniform(-jitter, jitter, size=pos.shape)
        placed = np.vstack([placed, pos])
    else:
        s2 = source.min_spacing**2
        tries = 0
        while len(placed) - n_prior < n:
            tries += 1
            if tries > max_tries:
                raise SpawnError(
                    f"could only place {len(placed) - n_prior} of {n} agents in region "
                    f"{source.region} with spacing {source.min_spacing}; use a larger region"
                )
            p = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)])
            if len(placed):
                d2 = np.sum((placed - p) ** 2, axis=1)
                if np.any(d2 < s2):
                    continue
            if not _placement_ok(p, scenario, clearance):
                continue
            placed = np.vstack([placed, p])

    speeds = draw_desired_speeds(n, population, rng)
    new = placed[n_prior:]
    return [
        Agent(id=first_id + k, x=new[k].copy(), w=0.0, v_des=float(speeds[k]), target_id=source.target_id)
        for k in range(n)
    ]


def build_agents(scenario: Scenario, population: PopulationParams, rng: np.random.Generator | None = None) -> list[Agent]:
    """Explicit agents first, then every source in order."""
    if rng is None:
        rng = np.random.default_rng(population.seed)
    agents: list[Agent] = []
    explicit_speeds = draw_desired_speeds(len(scenario.agents), population, rng)
    for k, spec in enumerate(scenario.agents):
        v = spec.v_des if spec.v_des is not None else float(explicit_speeds[k])
        agents.append(Agent(id=k, x=np.array([spec.x, spec.y]), w=spec.w, v_des=v, target_id=spec.target_id))
    for src in scenario.sources:
        existing = np.array([a.x for a in agents]) if agents else None
        agents.extend(spawn_agents(src, population, rng, scenario, existing, first_id=len(agents)))
    return agents

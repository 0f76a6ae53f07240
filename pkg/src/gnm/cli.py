"""Command-line front end: ``gnm run | sweep | calibrate | field``."""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import logging
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, calibration, presets
from .dynamics import NumericError
from .experiments import flow_lines_from
from .floorfield import ConstantField, FloorFieldError, build_floor_field
from .integrator import IntegratorConfig, Simulation, StepSizeError, TrajectoryRecorder
from .measurement import (
    DensitySpeedSink,
    LaneSink,
    SpeedSink,
    flow_rate,
    speed_moments,
    speed_statistics,
)
from .scenario import ConfigError, ModelParams, SpawnError, config_from_dict, config_to_dict

log = logging.getLogger("gnm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

GNUPLOT = {
    "flow.gp": """set datafile separator ','
set xlabel 't (s)'; set ylabel 'crossings'
plot 'flow.csv' using 1:0 skip 1 with steps title 'cumulative crossings'
""",
    "density_speed.gp": """set datafile separator ','
set xlabel 'local density (P/m^2)'; set ylabel 'speed (m/s)'
plot 'density_speed.csv' using 3:4 skip 1 with points pt 7 ps 0.3 title 'samples'
""",
    "speed_stats.gp": """set datafile separator ','
set xlabel 'global density (P/m^2)'
plot 'speed_stats.csv' using 1:2 skip 1 with points title 'mu/1.34', \\
     '' using 1:4 skip 1 with lines dt 2 title 'mu filtered', \\
     '' using 1:3 skip 1 with points title 'sigma/0.26', \\
     '' using 1:5 skip 1 with lines title 'sigma filtered'
""",
    "sweep.gp": """set datafile separator ','
set xlabel 'width (m)'; set ylabel 'J (1/s)'
plot 'sweep.csv' using 1:3 skip 1 with points pt 7 title 'flow'
""",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers

def _parse_overrides(items: list[str] | None) -> dict:
    names = {f.name: f for f in dataclasses.fields(ModelParams)}
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--param expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in names:
            raise UsageError(f"unknown model parameter {key!r}; known: {', '.join(sorted(names))}")
        try:
            out[key] = float(value)
        except ValueError:
            raise UsageError(f"--param {key}: not a number: {value!r}") from None
    return out


def _float_list(text: str) -> list[float]:
    """``a,b,c`` or ``start:stop:step``."""
    text = text.strip()
    if not text:
        return []
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise UsageError(f"range must be start:stop:step, got {text!r}")
        a, b, s = (float(p) for p in parts)
        if not s > 0:
            raise UsageError("range step must be positive")
        return presets.rho_ladder(a, b, s)
    return [float(p) for p in text.split(",") if p.strip()]


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def _preset_kwargs(args) -> dict:
    kw = {}
    if getattr(args, "width", None) is not None:
        if args.preset != "bottleneck":
            raise UsageError("--width only applies to the bottleneck preset")
        kw["width"] = args.width
    if getattr(args, "rho", None) is not None:
        if args.preset not in ("fundamental-diagram", "stop-and-go", "lanes"):
            raise UsageError("--rho only applies to corridor presets")
        kw["rho"] = args.rho
    if getattr(args, "seed", None) is not None and args.preset != "standoff":
        kw["seed"] = args.seed
    return kw


def resolve_config(args) -> dict:
    """Config dictionary from ``--preset`` or ``--scenario`` plus overrides."""
    if bool(args.preset) == bool(args.scenario):
        raise UsageError("give exactly one of --preset or --scenario")
    if args.preset:
        d = presets.build(args.preset, **_preset_kwargs(args))
    else:
        path = Path(args.scenario)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path}: parse error: {exc}") from None
        # a run manifest carries the resolved config under "config"
        d = raw["config"] if isinstance(raw, dict) and "config" in raw and "manifest_version" in raw else raw
        if args.seed is not None:
            d.setdefault("population", {})["seed"] = args.seed
    model = dict(d.get("model", {}))
    model.update(_parse_overrides(args.param))
    if model:
        d["model"] = model
    integ = dict(d.get("integrator", {}))
    if args.tol_abs is not None:
        integ["tol_abs"] = args.tol_abs
    if args.tol_rel is not None:
        integ["tol_rel"] = args.tol_rel
    d["integrator"] = integ
    if args.duration is not None:
        d.setdefault("measurement", {})["duration"] = args.duration
    if getattr(args, "warmup", None) is not None:
        d.setdefault("measurement", {})["warmup"] = args.warmup
    return d


def out_dir(args, name: str) -> Path:
    if args.out:
        p = Path(args.out)
    else:
        root = os.environ.get("GNM_OUT_DIR", "gnm-out")
        p = Path(root) / name
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in r])


def _versions() -> dict:
    import scipy

    return {"gnm": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


# ---------------------------------------------------------------------------
# commands

def execute_run(d: dict, directory: Path, trajectories: bool = False) -> dict:
    """Run one resolved config and write all metric files into ``directory``."""
    cfg = config_from_dict(d)
    m = dict(d.get("measurement", {}))
    duration = float(m.get("duration", 180.0))
    warmup = float(m.get("warmup", 0.0))
    icfg = IntegratorConfig.from_dict(cfg.integrator)
    sc = cfg.scenario
    period = sc.length_x if sc.periodic else None

    dens = DensitySpeedSink(sc.domain, period, every=float(m.get("density_every", 1.0)), warmup=warmup)
    speeds = SpeedSink(warmup=warmup, every=float(m.get("speed_every", 0.5)))
    lanes = LaneSink(sc.domain, section=float(m.get("section", 25.0)), every=float(m.get("lanes_every", 10.0)))
    sinks = [dens, speeds]
    if len(sc.targets) > 1:
        sinks.append(lanes)
    rec = TrajectoryRecorder() if trajectories else None
    if rec:
        sinks.append(rec)

    sim = Simulation(cfg, icfg, flow_lines=flow_lines_from(m))
    t0 = time.perf_counter()
    res = sim.run(duration, sinks)
    wall = time.perf_counter() - t0

    crossings = sorted((c[0], c[1]) for c in res.crossings)
    _write_csv(directory / "flow.csv", ["t_cross", "id"], crossings)
    _write_csv(directory / "collisions.csv", ["t", "id_a", "id_b", "dist"], res.collisions)
    _write_csv(directory / "density_speed.csv", ["t", "id", "rho", "v"], dens.rows)
    _write_csv(directory / "lanes.csv", ["t", "direction", "count"], lanes.rows)
    v = speeds.all()
    stats_rows = []
    if len(v):
        mu, sd = speed_moments(v)
        stats_rows.append((float(m.get("rho_global", float("nan"))), mu, sd, mu, sd))
    _write_csv(directory / "speed_stats.csv", ["rho_global", "mu_norm", "sigma_norm", "mu_filt", "sigma_filt"],
               stats_rows)
    if rec:
        rec.write_csv(directory / "trajectories.csv")
    for name, text in GNUPLOT.items():
        if name != "sweep.gp":
            (directory / name).write_text(text)

    summary = {
        "t_end": res.t_end,
        "agents": res.n_initial,
        "crossings": len(crossings),
        "J": flow_rate([c[0] for c in crossings]),
        "min_distance": res.min_distance,
        "collisions": len(res.collisions),
        "steps_accepted": res.steps_accepted,
        "steps_rejected": res.steps_rejected,
        "rhs_evaluations": res.evaluations,
        "invariant_violations": res.invariant_violations,
    }
    manifest = {
        "manifest_version": 1,
        "config": config_to_dict(cfg) | {"integrator": dataclasses.asdict(icfg), "measurement": m},
        "seed": cfg.population.seed,
        "duration": duration,
        "versions": _versions(),
        "wall_clock": wall,
        "summary": summary,
    }
    (directory / "run.json").write_text(json.dumps(manifest, indent=2, default=float) + "\n")
    return summary


def cmd_run(args) -> int:
    d = resolve_config(args)
    directory = out_dir(args, d.get("name", "run"))
    summary = execute_run(d, directory, trajectories=args.trajectories)
    print(json.dumps(summary, default=float))
    return EXIT_OK


def _sweep_job(job):
    kind, d = job
    if kind == "flow":
        cfg = config_from_dict(d)
        sim = Simulation(cfg, flow_lines=flow_lines_from(d["measurement"]))
        res = sim.run(float(d["measurement"].get("duration", 180.0)))
        times = sorted(c[0] for c in res.crossings)
        return {"J": flow_rate(times), "crossings": len(times), "min_distance": res.min_distance}
    cfg = config_from_dict(d)
    m = d["measurement"]
    sink = SpeedSink(warmup=float(m.get("warmup", 30.0)))
    Simulation(cfg).run(float(m.get("duration", 180.0)), [sink])
    return {"speeds": sink.all()}


def cmd_sweep(args) -> int:
    if args.preset not in ("bottleneck", "fundamental-diagram", "stop-and-go"):
        raise UsageError("sweep supports the bottleneck, fundamental-diagram and stop-and-go presets")
    seeds = _int_list(args.seeds)
    overrides = _parse_overrides(args.param)
    jobs, keys = [], []
    if args.preset == "bottleneck":
        grid = _float_list(args.widths)
        for w in grid:
            for s in seeds:
                d = presets.bottleneck(w, seed=s)
                keys.append((w, s))
                jobs.append(("flow", d))
    else:
        grid = _float_list(args.rhos)
        builder = presets.fundamental_diagram if args.preset == "fundamental-diagram" else presets.stop_and_go
        for r in grid:
            for s in seeds:
                keys.append((r, s))
                jobs.append(("speed", builder(rho=r, seed=s)))
    if not grid or not seeds:
        raise UsageError("empty sweep grid")
    for _, d in jobs:
        if overrides:
            d["model"] = dict(d.get("model", {})) | overrides
        if args.duration is not None:
            d["measurement"]["duration"] = args.duration
        if args.warmup is not None:
            d["measurement"]["warmup"] = args.warmup
        config_from_dict(d)  # validate everything before starting
    directory = out_dir(args, f"sweep-{args.preset}")
    if args.parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel) as ex:
            results = list(ex.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]

    if args.preset == "bottleneck":
        rows = [(k[0], k[1], r["J"], r["crossings"], r["min_distance"]) for k, r in zip(keys, results)]
        _write_csv(directory / "sweep.csv", ["width", "seed", "J", "crossings", "min_distance"], rows)
        (directory / "sweep.gp").write_text(GNUPLOT["sweep.gp"])
    else:
        by_rho: dict = {}
        for (r, _), res in zip(keys, results):
            by_rho.setdefault(r, []).append(res["speeds"])
        stats = speed_statistics({r: np.concatenate(v) for r, v in by_rho.items()}, min_samples=1)
        rows = list(stats.rows())
        _write_csv(directory / "speed_stats.csv", ["rho_global", "mu_norm", "sigma_norm", "mu_filt", "sigma_filt"], rows)
        (directory / "speed_stats.gp").write_text(GNUPLOT["speed_stats.gp"])
    manifest = {"preset": args.preset, "seeds": seeds, "grid": grid, "overrides": overrides,
                "duration": args.duration, "warmup": args.warmup, "versions": _versions(), "rows": len(rows)}
    (directory / "sweep.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"{len(rows)} rows -> {directory}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    params = ModelParams().replace(**_parse_overrides(args.param)) if args.param else ModelParams()
    if args.geometry == "second-layer":
        sc = calibration.second_layer_standoff(args.R_p, args.rho_max, args.wall_distance)
    else:
        sc = calibration.default_standoff(args.rho_max, args.wall_distance)
    res = calibration.calibrate(sc, args.R_p, args.R_B, params)
    out = dataclasses.asdict(res)
    print(json.dumps(out, indent=2))
    if args.out:
        p = Path(args.out)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(out, indent=2) + "\n")
    return EXIT_OK


def cmd_field(args) -> int:
    d = resolve_config(args)
    cfg = config_from_dict(d)
    sc = cfg.scenario
    target = sc.target(args.target)  # KeyError lists available ids
    if sc.periodic:
        field = ConstantField(target.direction, target.id)
        xs = np.arange(sc.domain[0], sc.domain[2] + 1e-9, sc.grid_h)
        ys = np.arange(sc.domain[1], sc.domain[3] + 1e-9, sc.grid_h)
        sigma = np.full((len(xs), len(ys)), math.nan)
    else:
        field = build_floor_field(sc, target, cfg.model)
        xs, ys, sigma = field.speed.xs, field.speed.ys, field.sigma
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    grad = field.gradient(pts)
    path = Path(args.out) if args.out else out_dir(args, d.get("name", "field")) / f"field_{target.id}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    sig = sigma.ravel()
    with open(path, "w") as fh:
        fh.write("x,y,sigma,gx,gy\n")
        for k in range(len(pts)):
            s = "inf" if math.isinf(sig[k]) else ("nan" if math.isnan(sig[k]) else f"{sig[k]:.6f}")
            fh.write(f"{pts[k, 0]:.4f},{pts[k, 1]:.4f},{s},{grad[k, 0]:.6f},{grad[k, 1]:.6f}\n")
    print(str(path))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gnm", description="Pedestrian dynamics simulator (floor-field gradient navigation)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_preset=True):
        if with_preset:
            sp.add_argument("--preset", choices=presets.PRESETS)
            sp.add_argument("--scenario", help="scenario JSON or a run.json manifest")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (default $GNM_OUT_DIR/<name>)")
        sp.add_argument("--duration", type=float)
        sp.add_argument("--warmup", type=float, help="seconds discarded before speed statistics")
        sp.add_argument("--tol-abs", type=float)
        sp.add_argument("--tol-rel", type=float)
        sp.add_argument("--param", action="append", metavar="KEY=VALUE", help="override a model parameter")

    r = sub.add_parser("run", help="run one scenario")
    common(r)
    r.add_argument("--width", type=float, help="bottleneck width (m)")
    r.add_argument("--rho", type=float, help="global density for corridor presets (P/m^2)")
    r.add_argument("--trajectories", action="store_true", help="also write trajectories.csv")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="parameter sweep over independent runs")
    s.add_argument("--preset", required=True, choices=presets.PRESETS)
    s.add_argument("--widths", default=",".join(str(w) for w in presets.BOTTLENECK_WIDTHS))
    s.add_argument("--rhos", default="0.5:6.0:0.5", help="list a,b,c or range start:stop:step")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--out")
    s.add_argument("--duration", type=float)
    s.add_argument("--warmup", type=float)
    s.add_argument("--param", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("calibrate", help="solve the standoff condition for p_p and p_B")
    c.add_argument("--R-p", dest="R_p", type=float, default=0.70)
    c.add_argument("--R-B", dest="R_B", type=float, default=0.25)
    c.add_argument("--rho-max", type=float, default=7.0)
    c.add_argument("--wall-distance", type=float, default=0.2)
    c.add_argument("--geometry", choices=("default", "second-layer"), default="default")
    c.add_argument("--param", action="append", metavar="KEY=VALUE")
    c.add_argument("--out", help="write the result as JSON")
    c.set_defaults(func=cmd_calibrate)

    f = sub.add_parser("field", help="dump sigma and its mollified gradient as CSV")
    common(f)
    f.add_argument("--target", type=int, default=1)
    f.add_argument("--width", type=float)
    f.add_argument("--rho", type=float)
    f.set_defaults(func=cmd_field)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gnm: usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, SpawnError, FloorFieldError, calibration.CalibrationError) as exc:
        print(f"gnm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError as exc:
        print(f"gnm: configuration error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, StepSizeError, FloatingPointError) as exc:
        print(f"gnm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"gnm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

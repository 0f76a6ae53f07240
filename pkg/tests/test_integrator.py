import math

import numpy as np
import pytest

from gnm import presets
from gnm.integrator import (
    FlowLine,
    IntegratorConfig,
    Simulation,
    StepSizeError,
    TrajectoryRecorder,
    dense_output,
    dp45_stages,
    integrate,
    step,
)
from gnm.scenario import Agent, config_from_dict

TAU = 0.5


def decay(t, y):
    return -y


def test_exponential_decay_within_tolerance():
    t, y, _ = integrate(decay, [1.0], 0.0, 1.0, IntegratorConfig(tol_abs=1e-6, tol_rel=1e-6))
    assert t == pytest.approx(1.0, abs=1e-12)
    assert abs(y[0] - math.exp(-1.0)) <= 1e-5


def test_constant_rhs_grows_step_to_h_max():
    cfg = IntegratorConfig()
    _, y, stats = integrate(lambda t, y: np.zeros_like(y), [3.0], 0.0, 2.0, cfg)
    assert y[0] == 3.0
    # 0.01, 0.05, then h_max until the end
    assert stats["accepted"] <= 2 + math.ceil(2.0 / cfg.h_max)
    assert stats["rejected"] == 0


def test_fixed_step_order():
    errs = []
    for h in (0.1, 0.05):
        _, y, _ = integrate(decay, [1.0], 0.0, 1.0, fixed_step=h)
        errs.append(abs(y[0] - math.exp(-1.0)))
    assert math.log2(errs[0] / errs[1]) >= 4.5


def test_rejected_step_shrinks_and_nan_raises():
    cfg = IntegratorConfig()
    res = step(lambda t, y: 50.0 * np.sin(40 * t) * np.ones_like(y), np.zeros(1), 0.0, 0.1, cfg)
    assert not res.accepted and res.h_next < 0.1
    with pytest.raises(StepSizeError):
        integrate(lambda t, y: np.full_like(y, np.nan), [1.0], 0.0, 1.0, cfg)


def test_dense_output_end_points():
    y = np.array([1.0, 2.0])
    y5, _, K = dp45_stages(decay, 0.0, y, 0.1)
    assert np.array_equal(dense_output(y, 0.1, K, 0.0)[0], y)
    assert np.allclose(dense_output(y, 0.1, K, 1.0)[0], y5, rtol=0, atol=1e-14)
    mid = dense_output(y, 0.1, K, 0.5)[0]
    assert np.allclose(mid, y * math.exp(-0.05), rtol=0, atol=1e-7)


# ---------------------------------------------------------------------------
# simulation driver

def corridor_cfg(n_spawn=1, length=40.0, seed=0):
    d = presets.corridor(length, 4.0, n_spawn / (length * 4.0), seed=seed)
    return config_from_dict(d)


def test_free_agent_matches_closed_form():
    cfg = corridor_cfg()
    v = 1.34
    agent = Agent(0, np.array([1.0, 2.0]), 0.0, v, 1)
    rec = TrajectoryRecorder()
    sim = Simulation(cfg, agents=[agent])
    T = 10.0 / v + TAU  # about ten metres travelled
    sim.run(T, [rec])
    x_end = sim.y[0]
    tr = rec.array()
    t = tr[:, 0]
    closed = 1.0 + v * (t - TAU * (1 - np.exp(-t / TAU)))
    assert np.max(np.abs(tr[:, 2] - closed)) <= 1e-3
    assert np.max(np.abs(tr[:, 3] - 2.0)) == 0.0
    assert x_end - 1.0 >= 10.0 - 1e-3
    assert abs(x_end - 1.0 - v * (T - TAU * (1 - math.exp(-T / TAU)))) <= 1e-3


def test_zero_agents_runs():
    cfg = corridor_cfg()
    sim = Simulation(cfg, agents=[])
    res = sim.run(5.0, stop_when_empty=False)
    assert res.t_end == 5.0 and res.n_initial == 0 and res.crossings == []


def small_bottleneck(seed=0, count=40):
    return config_from_dict(presets.bottleneck(1.2, count=count, seed=seed))


def test_runs_are_bit_identical():
    out = []
    for _ in range(2):
        sim = Simulation(small_bottleneck(3))
        sim.run(4.0)
        out.append((sim.y.copy(), sim.result.steps_accepted, sim.result.evaluations))
    assert np.array_equal(out[0][0], out[1][0])
    assert out[0][1:] == out[1][1:]


def test_error_shrinks_with_tolerance():
    cfg = small_bottleneck(1, count=25)
    ref = Simulation(cfg, IntegratorConfig(tol_abs=1e-10, tol_rel=1e-9))
    ref.run(3.0)
    errs = []
    # looser tolerances are capped by h_max and all give the same steps
    for tol in (1e-6, 1e-7, 1e-8):
        sim = Simulation(cfg, IntegratorConfig(tol_abs=tol, tol_rel=10 * tol))
        sim.run(3.0)
        errs.append(np.max(np.abs(sim.y - ref.y)))
    assert errs[0] > errs[1] > errs[2]


class AliveCounter:
    def __init__(self):
        self.counts = []

    def sample(self, snap):
        self.counts.append(len(snap.ids))


def test_absorption_monotone_and_counted():
    counter = AliveCounter()
    sim = Simulation(small_bottleneck(2, count=30), flow_lines=[FlowLine((16, 0), (16, 10), "exit")])
    res = sim.run(40.0, [counter])
    assert all(b <= a for a, b in zip(counter.counts, counter.counts[1:]))
    assert counter.counts[0] == 30
    gone = {aid for _, aid in res.absorbed}
    assert len(gone) == len(res.absorbed)
    assert all(not res.agents[k].alive for k in range(30) if k in gone)
    assert res.evaluations >= 6 * res.steps_accepted


def test_flow_line_crossing_time():
    cfg = corridor_cfg()
    v = 1.34
    sim = Simulation(cfg, agents=[Agent(0, np.array([1.0, 2.0]), v, v, 1)],
                     flow_lines=[FlowLine((5.0, 0.0), (5.0, 4.0), "x5")])
    res = sim.run(5.0)
    assert len(res.crossings) == 1
    t_cross, aid, name = res.crossings[0]
    assert aid == 0 and name == "x5"
    assert t_cross == pytest.approx(4.0 / v, abs=1e-3)


def test_trajectory_csv_header(tmp_path):
    rec = TrajectoryRecorder()
    Simulation(small_bottleneck(0, count=5)).run(0.3, [rec])
    path = tmp_path / "traj.csv"
    rec.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,id,x,y,w,vdes"
    assert len(lines) == 1 + 5 * 4  # t = 0, 0.1, 0.2, 0.3

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gnm import presets
from gnm.calibration import calibrate, default_standoff
from gnm.dynamics import (
    Crowd,
    CrowdDynamics,
    NeighborIndex,
    NumericError,
    brute_force_pairs,
    grad_obstacle,
    grad_pedestrian,
    nav_combined,
    rhs,
)
from gnm.floorfield import build_fields
from gnm.integrator import IntegratorConfig, integrate
from gnm.scenario import ModelParams, Obstacle, config_from_dict, scenario_from_dict

P = ModelParams()


def corridor_dynamics(n, length=20.0, width=4.0, seed=0, params=P, v=1.34):
    d = presets.corridor(length, width, 1.0)
    sc = config_from_dict(d).scenario
    fields = build_fields(sc, params)
    crowd = Crowd(np.arange(n), np.full(n, v), np.ones(n, dtype=int))
    return CrowdDynamics(sc, params, fields, crowd)


def random_state(n, length, width, rng, wmax=1.5):
    pos = np.column_stack([rng.uniform(0, length, n), rng.uniform(0.2, width - 0.2, n)])
    w = rng.uniform(0, wmax, n)
    return np.column_stack([pos, w]).ravel()


# ---------------------------------------------------------------------------
# navigation towards the target

def test_nav_target_periodic_exact():
    dyn = corridor_dynamics(3)
    d = dyn.target_directions(np.array([[1.0, 1.0], [5.0, 2.0], [19.0, 3.5]]))
    assert np.array_equal(d, np.tile([1.0, 0.0], (3, 1)))


def test_nav_target_points_at_point_target():
    sc = scenario_from_dict({
        "domain": {"xmin": -5, "ymin": -5, "xmax": 5, "ymax": 5},
        "targets": [{"id": 1, "points": [[3.95, -0.05], [4.05, -0.05], [4.05, 0.05], [3.95, 0.05]]}],
    })
    f = build_fields(sc, P)[1]
    d = f.target_direction(np.array([[0.0, 0.0], [-3.0, 0.0]]))
    ang = np.arctan2(d[:, 1], d[:, 0])
    assert np.all(np.abs(ang) <= 0.05)


def test_nav_target_goes_around_obstacle():
    sc = scenario_from_dict({
        "domain": {"xmin": 0, "ymin": 0, "xmax": 10, "ymax": 10},
        "obstacles": [{"type": "polygon", "points": [[4, 2], [5, 2], [5, 8], [4, 8]]}],
        "targets": [{"id": 1, "points": [[9, 4.5], [9.5, 4.5], [9.5, 5.5], [9, 5.5]]}],
    })
    f = build_fields(sc, P)[1]
    x = np.array([3.5, 6.5])  # behind the block, target on the far side
    d = f.target_direction(x[None])[0]
    d = d / np.hypot(*d)
    ray = x + np.linspace(0, 0.1, 11)[:, None] * d
    assert not sc.inside_obstacle(ray).any()
    assert d[1] > 0.1  # heads for the nearer (upper) end of the block


# ---------------------------------------------------------------------------
# repulsion gradients

def test_grad_pedestrian_examples():
    assert np.array_equal(grad_pedestrian([1, 1], [1, 1], [1, 0], P), [0, 0])
    assert np.array_equal(grad_pedestrian([0, 0], [P.R_p + 0.01, 0], [1, 0], P), [0, 0])
    g = grad_pedestrian([0, 0], [0.35, 0], [1, 0], P)
    expect = oracles.bump_eps(0.35, 0.70, 3.59, 0.1) * oracles.view_scale(0, 0.6)
    assert g[1] == 0.0 and g[0] > 0
    assert float(oracles.rel(g[0], expect)) <= 1e-12


def test_grad_obstacle_examples():
    wall = Obstacle("segment", np.array([[-5.0, 0.0], [5.0, 0.0]]))
    assert np.array_equal(grad_obstacle([0, 0.5], wall, P), [0, 0])
    g = grad_obstacle([0, 0.1], wall, P)
    assert g[0] == 0.0
    assert float(oracles.rel(-g[1], oracles.bump_eps(0.1, 0.25, 9.96, 0.1))) <= 1e-12
    block = Obstacle("polygon", np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))
    g = grad_obstacle([1.1, 1.1], block, P)
    assert g[0] == pytest.approx(g[1], rel=1e-12) and g[0] < 0


def test_nav_combined_free_agent():
    n = nav_combined([0, 0], [3.0, 4.0], [], [], P)
    assert n == pytest.approx([0.6, 0.8], abs=1e-15)


def test_nav_combined_standoff_is_zero():
    sc = default_standoff()
    res = calibrate(sc, 0.70, 0.25)
    params = P.replace(p_p=res.p_p, p_B=res.p_B)
    wall = Obstacle("segment", np.array([[-5.0, -sc.wall_distance], [5.0, -sc.wall_distance]]))
    n = nav_combined([0, 0], [1, 0], sc.neighbors, [wall], params)
    assert np.hypot(*n) <= 1e-10


def test_nav_combined_neighbor_ahead_deflects():
    n = nav_combined([0, 0], [1, 0], [[0.4, 0.1]], [], P)
    assert np.hypot(*n) < 1.0
    assert n[1] < 0  # steers away from the neighbour


# ---------------------------------------------------------------------------
# right-hand side

def test_rhs_stopped_agent_relaxes():
    dyn = corridor_dynamics(1, v=1.3)
    # a frozen target direction of zero length gives N = 0
    dyn.fields = {1: type("Z", (), {"target_direction": lambda self, p: np.zeros((len(p), 2))})()}
    y = np.array([5.0, 2.0, 0.8])
    dy = rhs(y, 0.0, dyn)
    assert dy[0] == 0.0 and dy[1] == 0.0
    assert dy[2] == pytest.approx(-0.8 / P.tau, rel=1e-15)


def test_rhs_free_cruising_equilibrium():
    dyn = corridor_dynamics(1, v=1.3)
    dy = dyn.rhs(np.array([5.0, 2.0, 1.3]))
    assert dy[0] == pytest.approx(1.3, rel=1e-15) and dy[1] == 0.0 and dy[2] == 0.0


def test_rhs_free_agent_from_rest_matches_closed_form():
    dyn = corridor_dynamics(1, v=1.34)
    y0 = np.array([5.0, 2.0, 0.0])
    cfg = IntegratorConfig()
    for T in (0.5, 1.0, 3.0):
        _, y, _ = integrate(lambda t, y: dyn.rhs(y, t), y0, 0.0, T, cfg)
        assert abs(y[2] - 1.34 * (1 - math.exp(-T / P.tau))) <= 1e-5


def test_rhs_rejects_non_finite():
    dyn = corridor_dynamics(2)
    crowd = Crowd(np.array([10, 11]), np.array([1.0, 1.0]), np.array([1, 1]))
    dyn.crowd = crowd
    with pytest.raises(NumericError, match="agent 11"):
        dyn.rhs(np.array([1.0, 1.0, 0.0, np.nan, 1.0, 0.0]))


# ---------------------------------------------------------------------------
# invariants

def test_nav_norm_at_most_one_and_speed_bound():
    rng = np.random.default_rng(0)
    dyn = corridor_dynamics(150)
    for _ in range(10):
        y = random_state(150, 20.0, 4.0, rng)
        nav, _, _ = dyn.navigation(y.reshape(-1, 3)[:, :2])
        assert np.all(np.hypot(nav[:, 0], nav[:, 1]) <= 1.0 + 1e-15)
        dy = dyn.rhs(y).reshape(-1, 3)
        assert np.all(np.hypot(dy[:, 0], dy[:, 1]) <= y.reshape(-1, 3)[:, 2] + 1e-15)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.34), st.floats(0.0, 1.0))
def test_relaxed_speed_stays_in_band(w, nav_norm):
    # w' = (v |N| - w) / tau points back into [0, v] at both ends
    v = 1.34
    dw = (v * nav_norm - w) / P.tau
    if w == 0.0:
        assert dw >= 0
    if w == v:
        assert dw <= 0


def test_rhs_smooth_under_small_perturbation():
    rng = np.random.default_rng(1)
    dyn = corridor_dynamics(120)
    worst = 0.0
    for _ in range(20):
        y = random_state(120, 20.0, 4.0, rng)
        k = rng.integers(len(y))
        y2 = y.copy()
        y2[k] += 1e-6
        worst = max(worst, np.max(np.abs(dyn.rhs(y2) - dyn.rhs(y))))
    assert worst <= 1e-3


def test_neighbor_index_no_false_negatives():
    rng = np.random.default_rng(2)
    pos = rng.uniform([0, 0], [20, 4], size=(300, 2))
    idx = NeighborIndex(pos, 0.7, (0, 0, 20, 4), periodic_length=20.0)
    for k in range(0, 300, 7):
        cand = set(idx.query(pos[k], 0.7).tolist())
        dx = pos[:, 0] - pos[k, 0]
        dx -= 20.0 * np.round(dx / 20.0)
        close = np.nonzero(np.hypot(dx, pos[:, 1] - pos[k, 1]) < 0.7)[0]
        assert set(close.tolist()) <= cand


@pytest.mark.parametrize("periodic", [False, True])
def test_indexed_equals_brute_force(periodic):
    rng = np.random.default_rng(3)
    if periodic:
        dyn = corridor_dynamics(200)
    else:
        cfg = config_from_dict(presets.bottleneck(1.0))
        sc = cfg.scenario
        dyn = CrowdDynamics(sc, cfg.model, build_fields(sc, cfg.model),
                            Crowd(np.arange(200), np.full(200, 1.3), np.ones(200, dtype=int)))
    for _ in range(5):
        n = int(rng.integers(2, 201))
        hi = [20, 4] if periodic else [12, 10]
        pos = rng.uniform([0, 0.2], hi, size=(n, 2))
        heading = rng.normal(size=(n, 2))
        heading /= np.hypot(heading[:, 0], heading[:, 1])[:, None]
        idx = NeighborIndex(pos, P.R_p, dyn.scenario.domain, dyn.periodic_length).pairs_within(P.R_p)
        a = dyn.pedestrian_gradient_sum(pos, heading, idx)
        b = dyn.pedestrian_gradient_sum(pos, heading, brute_force_pairs(n))
        assert np.array_equal(a, b)


def test_translation_equivariance_periodic():
    rng = np.random.default_rng(4)
    dyn = corridor_dynamics(80)
    y = random_state(80, 20.0, 4.0, rng)
    shifted = y.reshape(-1, 3).copy()
    shifted[:, 0] = (shifted[:, 0] + 3.7) % 20.0
    d1 = dyn.rhs(y)
    d2 = dyn.rhs(shifted.ravel())
    assert np.allclose(d1, d2, atol=1e-12, rtol=0)

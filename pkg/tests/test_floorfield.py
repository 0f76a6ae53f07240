import math

import numpy as np
import pytest

from gnm import presets
from gnm.floorfield import (
    FloorField,
    FloorFieldError,
    MollifierKernel,
    build_fields,
    build_floor_field,
    build_speed_function,
    fast_march,
)
from gnm.geometry import distance_to_segments
from gnm.scenario import ModelParams, config_from_dict, scenario_from_dict

PARAMS = ModelParams()


def open_square(half=5.0, target=None, obstacles=()):
    d = {
        "domain": {"xmin": -half, "ymin": -half, "xmax": half, "ymax": half},
        "targets": [target or {"id": 1, "points": [[-0.05, -0.05], [0.05, -0.05], [0.05, 0.05], [-0.05, 0.05]]}],
        "obstacles": list(obstacles),
    }
    return scenario_from_dict(d)


@pytest.fixture(scope="module")
def radial():
    sc = open_square()
    return build_floor_field(sc, sc.targets[0], PARAMS)


def test_speed_function_examples():
    sc = open_square(obstacles=[{"type": "segment", "points": [[-2, 1], [2, 1]]}])
    g = build_speed_function(sc, PARAMS)
    far = g.wall_distance >= PARAMS.R_B
    assert np.all(g.G[far] == 1.0)
    assert g.G.min() > 0 and g.G.max() <= 1.0
    # on the wall line itself
    i = np.argmin(np.abs(g.xs - 0.0))
    j = np.argmin(np.abs(g.ys - 1.0))
    assert g.wall_distance[i, j] == pytest.approx(0.0, abs=1e-12)
    assert g.G[i, j] == pytest.approx(1 / (1 + 9.96 / math.e), rel=1e-12)
    assert g.G[i, j] == pytest.approx(0.2145, abs=1e-4)
    assert not g.traversable[i, j]


def test_speed_function_obstacle_free():
    g = build_speed_function(open_square(), PARAMS)
    assert np.all(g.G == 1.0) and g.traversable.all()


def test_point_source_vs_euclidean(radial):
    g = radial.speed
    X, Y = np.meshgrid(g.xs, g.ys, indexing="ij")
    r = np.hypot(X, Y)
    src = r < 1e-9
    assert src.sum() == 1
    sigma = fast_march(g.G, g.traversable, src, g.h)
    assert sigma[src][0] == 0.0
    assert np.all(np.abs(sigma - r) <= 0.05 + 0.05 * r)


def test_boundary_target_gives_distance_to_boundary():
    d = {
        "domain": {"xmin": 0, "ymin": 0, "xmax": 6, "ymax": 4},
        "targets": [{"id": 1, "points": [[0, 0], [6, 0], [6, 4], [0, 4]]}],
    }
    sc = scenario_from_dict(d)
    g = build_speed_function(sc, PARAMS)
    src = np.zeros_like(g.traversable)
    src[0, :] = src[-1, :] = src[:, 0] = src[:, -1] = True
    sigma = fast_march(g.G, g.traversable, src, g.h)
    X, Y = np.meshgrid(g.xs, g.ys, indexing="ij")
    exact = np.minimum.reduce([X, 6 - X, Y, 4 - Y])
    # axis-aligned fronts are solved exactly away from corners' diagonals
    assert np.max(np.abs(sigma - exact)) <= 0.05 + 0.05 * exact.max()
    mid = (np.abs(Y - 2) < 1e-9) & (X <= 1.5)
    assert np.allclose(sigma[mid], exact[mid], atol=1e-12)


def test_half_speed_doubles_sigma_exactly(radial):
    g = radial.speed
    src = radial.sigma == 0
    s1 = fast_march(g.G, g.traversable, src, g.h)
    s2 = fast_march(0.5 * g.G, g.traversable, src, g.h)
    assert np.array_equal(s2, 2.0 * s1)


def test_monotone_acceptance_asserted():
    # a negative speed makes the upwind update non-monotone
    G = np.ones((5, 5))
    G[2, 3] = -1.0
    src = np.zeros((5, 5), dtype=bool)
    src[2, 2] = True
    with pytest.raises(FloorFieldError):
        fast_march(G, np.ones((5, 5), dtype=bool), src, 0.1)


def test_no_traversable_target_raises():
    sc = open_square(obstacles=[{"type": "polygon", "points": [[-1, -1], [1, -1], [1, 1], [-1, 1]]}])
    with pytest.raises(FloorFieldError):
        build_floor_field(sc, sc.targets[0], PARAMS)


def test_unreachable_region_stays_infinite():
    box = [[1, 1], [3, 1], [3, 3], [1, 3]]
    obstacles = [{"type": "segment", "points": [box[k], box[(k + 1) % 4]]} for k in range(4)]
    sc = open_square(obstacles=obstacles)
    f = build_floor_field(sc, sc.targets[0], PARAMS)
    i = np.argmin(np.abs(f.xs - 2.0))
    j = np.argmin(np.abs(f.ys - 2.0))
    assert math.isinf(f.sigma[i, j])
    assert f.desc["unreachable_nodes"] > 0


def test_mollifier_kernel_normalised():
    k = MollifierKernel.build(0.5)
    assert len(k.offsets) <= 21 * 21
    assert np.all(np.hypot(k.offsets[:, 0], k.offsets[:, 1]) < 0.5)
    # samples are taken at x - y, so a linear field a.(x - y) must return a
    a = np.array([0.7, -1.3])
    assert (-(k.offsets @ a)) @ k.weights == pytest.approx(a, abs=1e-12)
    assert k.weights.sum(axis=0) == pytest.approx([0.0, 0.0], abs=1e-12)


def linear_field(ax=1.0, ay=0.0):
    sc = open_square()
    speed = build_speed_function(sc, PARAMS)
    X, Y = np.meshgrid(speed.xs, speed.ys, indexing="ij")
    return FloorField(ax * X + ay * Y, speed, 1, MollifierKernel.build(0.5))


def test_mollified_gradient_of_linear_ramp():
    f = linear_field()
    rng = np.random.default_rng(0)
    pts = rng.uniform(-4, 4, size=(200, 2))
    g = f.gradient(pts)
    assert np.max(np.abs(g - [1.0, 0.0])) <= 1e-3


def test_mollified_gradient_radial_centre(radial):
    g = radial.gradient(np.array([[0.0, 0.0]]))
    assert np.hypot(*g[0]) <= 1e-6


def test_mollified_gradient_smooth(radial):
    rng = np.random.default_rng(1)
    p = rng.uniform(-4, 4, size=(200, 2))
    p = p[np.hypot(p[:, 0], p[:, 1]) > 0.6]
    g1 = radial.gradient(p)
    g2 = radial.gradient(p + 1e-4 * rng.normal(size=p.shape) / math.sqrt(2))
    assert np.max(np.hypot(*(g1 - g2).T)) <= 1e-2


def test_gradient_norm_bounded():
    cfg = config_from_dict(presets.bottleneck(1.0))
    f = build_fields(cfg.scenario, cfg.model)[1]
    rng = np.random.default_rng(2)
    pts = rng.uniform([0, 0], [18, 10], size=(5000, 2))
    a, b, _ = cfg.scenario.obstacle_edges()
    walkable = ~cfg.scenario.inside_obstacle(pts) & (distance_to_segments(pts, a, b) >= 0.5 * f.h)
    g = np.hypot(*f.gradient(pts[walkable]).T)
    assert g.max() <= f.max_inverse_speed() + 0.05


def test_downwind_descent_in_bottleneck():
    cfg = config_from_dict(presets.bottleneck(1.0))
    f = build_fields(cfg.scenario, cfg.model)[1]
    rng = np.random.default_rng(3)
    starts = rng.uniform([0.5, 0.5], [11.5, 9.5], size=(15, 2))
    for x in starts:
        s_prev = float(f.interpolate(x[None])[0])
        for _ in range(800):
            if s_prev <= 2 * f.h:
                break
            d = f.target_direction(x[None])[0]
            x = x + 0.02 * d / np.hypot(*d)
            s = float(f.interpolate(x[None])[0])
            assert s < s_prev
            s_prev = s
        assert not cfg.scenario.inside_obstacle(x[None])[0]


def test_periodic_targets_use_constant_direction():
    cfg = config_from_dict(presets.stop_and_go(rho=1.0))
    f = build_fields(cfg.scenario, cfg.model)[1]
    d = f.target_direction(np.array([[3.0, 1.0], [7.0, 2.0]]))
    assert np.array_equal(d, [[1.0, 0.0], [1.0, 0.0]])


def test_fields_are_deterministic(radial):
    sc = open_square()
    again = build_floor_field(sc, sc.targets[0], PARAMS)
    assert np.array_equal(again.sigma, radial.sigma)

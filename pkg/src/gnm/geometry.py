"""Planar geometry helpers: segment distances and polygon tests (vectorised)."""

from __future__ import annotations

import numpy as np


def polygon_edges(points: np.ndarray, closed: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Return segment start/end arrays for a polyline or closed polygon."""
    pts = np.asarray(points, dtype=float)
    if closed and len(pts) > 2:
        return pts, np.roll(pts, -1, axis=0)
    return pts[:-1], pts[1:]


def nearest_on_segments(x: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Nearest points on segments ``a[k]-b[k]`` for every query point.

    Returns ``(dist, nearest)`` with shapes ``(n, m)`` and ``(n, m, 2)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    ab = b - a
    len2 = np.einsum("ij,ij->i", ab, ab)
    rel = x[:, None, :] - a[None, :, :]
    t = np.einsum("nmk,mk->nm", rel, ab) / np.where(len2 > 0, len2, 1.0)
    t = np.clip(t, 0.0, 1.0)
    nearest = a[None, :, :] + t[..., None] * ab[None, :, :]
    diff = x[:, None, :] - nearest
    return np.hypot(diff[..., 0], diff[..., 1]), nearest


def distance_to_segments(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimum distance from each point to a set of segments, shape ``(n,)``."""
    if len(a) == 0:
        return np.full(len(np.atleast_2d(x)), np.inf)
    d, _ = nearest_on_segments(x, a, b)
    return d.min(axis=1)


def points_in_polygon(x: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    poly = np.asarray(poly, dtype=float)
    px, py = x[:, 0:1], x[:, 1:2]
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    crosses = (y0 > py) != (y1 > py)
    dy = np.where(y1 != y0, y1 - y0, 1.0)
    xint = x0 + (py - y0) * (x1 - x0) / dy
    hits = crosses & (px < xint)
    return (hits.sum(axis=1) % 2) == 1


def polygon_area(poly: np.ndarray) -> float:
    p = np.asarray(poly, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def rectangle(xmin: float, ymin: float, xmax: float, ymax: float) -> np.ndarray:
    return np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]], dtype=float)

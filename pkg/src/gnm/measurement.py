"""Crowd observables: local density, flow, speed statistics, lanes, spacing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import NeighborIndex, min_image

MEAN_SPEED = 1.34
SPEED_STD = 0.26
DENSITY_CAP_RADIUS = 2.0


# ---------------------------------------------------------------------------
# local density

def _clip_halfplane(poly: list[tuple[float, float]], n: np.ndarray, c: float):
    """Sutherland-Hodgman clip of ``poly`` to ``{x : n.x <= c}``."""
    out = []
    m = len(poly)
    for k in range(m):
        p = poly[k]
        q = poly[(k + 1) % m]
        fp = n[0] * p[0] + n[1] * p[1] - c
        fq = n[0] * q[0] + n[1] * q[1] - c
        if fp <= 0:
            out.append(p)
        if (fp < 0 < fq) or (fq < 0 < fp):
            s = fp / (fp - fq)
            out.append((p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])))
    return out


def _segment_disc_area(a: np.ndarray, b: np.ndarray, R: float) -> float:
    """Signed area of (triangle origin-a-b) intersected with the disc of radius R."""

    def sector(u, v):
        ang = math.atan2(u[0] * v[1] - u[1] * v[0], u[0] * v[0] + u[1] * v[1])
        return 0.5 * R * R * ang

    def tri(u, v):
        return 0.5 * (u[0] * v[1] - u[1] * v[0])

    d = b - a
    A = d @ d
    if A == 0.0:
        return 0.0
    B = a @ d
    Cc = a @ a - R * R
    disc = B * B - A * Cc
    ina = a @ a <= R * R
    inb = b @ b <= R * R
    if ina and inb:
        return tri(a, b)
    if disc <= 0:
        return sector(a, b)
    sq = math.sqrt(disc)
    t1 = (-B - sq) / A
    t2 = (-B + sq) / A
    if ina:  # leaving the disc at t2
        p = a + t2 * d
        return tri(a, p) + sector(p, b)
    if inb:  # entering at t1
        p = a + t1 * d
        return sector(a, p) + tri(p, b)
    if 0.0 < t1 < 1.0 and 0.0 < t2 < 1.0:
        p1 = a + t1 * d
        p2 = a + t2 * d
        return sector(a, p1) + tri(p1, p2) + sector(p2, b)
    return sector(a, b)


def polygon_disc_area(poly, center, R: float) -> float:
    """Exact area of a polygon intersected with a disc."""
    pts = np.asarray(poly, dtype=float) - np.asarray(center, dtype=float)
    total = 0.0
    for k in range(len(pts)):
        total += _segment_disc_area(pts[k], pts[(k + 1) % len(pts)], R)
    return abs(total)


def voronoi_cell(i: int, positions: np.ndarray, domain, periodic_length: float | None = None,
                 cap_radius: float = DENSITY_CAP_RADIUS, candidates: np.ndarray | None = None):
    """Voronoi cell of agent ``i`` clipped to the domain and the cap square.

    Returns the polygon vertices in absolute coordinates, or ``None`` when
    a neighbour sits exactly on top of the agent.
    """
    p = positions[i]
    x0, y0, x1, y1 = domain
    lo_x, hi_x = p[0] - cap_radius, p[0] + cap_radius
    if periodic_length is None:
        lo_x, hi_x = max(lo_x, x0), min(hi_x, x1)
    lo_y, hi_y = max(p[1] - cap_radius, y0), min(p[1] + cap_radius, y1)
    poly = [(lo_x, lo_y), (hi_x, lo_y), (hi_x, hi_y), (lo_x, hi_y)]
    idx = np.arange(len(positions)) if candidates is None else candidates
    idx = idx[idx != i]
    off = positions[idx] - p
    off[:, 0] = min_image(off[:, 0], periodic_length)
    dist = np.hypot(off[:, 0], off[:, 1])
    if np.any(dist == 0.0):
        return None
    order = np.argsort(dist, kind="stable")
    reach = 2.0 * math.sqrt(2.0) * cap_radius
    for k in order:
        if dist[k] > reach:
            break
        o = off[k]
        # bisector: (x - p).o <= |o|^2 / 2
        c = 0.5 * dist[k] ** 2 + o @ p
        poly = _clip_halfplane(poly, o, c)
        if len(poly) < 3:
            return None
        reach = 2.0 * max(math.hypot(v[0] - p[0], v[1] - p[1]) for v in poly)
    return np.array(poly)


def local_density(i: int, positions: np.ndarray, domain, periodic_length: float | None = None,
                  cap_radius: float = DENSITY_CAP_RADIUS, candidates: np.ndarray | None = None) -> float:
    """Inverse area of the capped Voronoi cell of agent ``i`` (P/m^2).

    The cell is clipped to the domain rectangle and to a disc of
    ``cap_radius`` around the agent. Degenerate cells (a neighbour on the
    same spot) fall back to :func:`disc_density`.
    """
    positions = np.asarray(positions, dtype=float)
    cell = voronoi_cell(i, positions, domain, periodic_length, cap_radius, candidates)
    if cell is None:
        return disc_density(i, positions, 1.0, periodic_length)
    area = polygon_disc_area(cell, positions[i], cap_radius)
    if area <= 0.0:
        return disc_density(i, positions, 1.0, periodic_length)
    return 1.0 / area


def local_densities(positions: np.ndarray, domain, periodic_length: float | None = None,
                    cap_radius: float = DENSITY_CAP_RADIUS) -> np.ndarray:
    """Voronoi density of every agent, using a spatial index for candidates."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    n = len(positions)
    if n == 0:
        return np.zeros(0)
    reach = 2.0 * math.sqrt(2.0) * cap_radius
    x0, y0, x1, y1 = domain
    cell = min(reach, (x1 - x0), (y1 - y0))
    # agents further than ``reach`` never clip the capped cell
    index = NeighborIndex(positions, cell, domain, periodic_length)
    i, j = index.candidate_pairs() if cell >= reach else (None, None)
    out = np.empty(n)
    if i is None:
        for k in range(n):
            out[k] = local_density(k, positions, domain, periodic_length, cap_radius)
        return out
    starts = np.searchsorted(i, np.arange(n + 1))
    for k in range(n):
        cand = np.concatenate([[k], j[starts[k]:starts[k + 1]]])
        out[k] = local_density(k, positions, domain, periodic_length, cap_radius, candidates=cand)
    return out


def disc_density(i: int, positions: np.ndarray, radius: float = 1.0, periodic_length: float | None = None) -> float:
    """Agents (including ``i``) within ``radius`` divided by the disc area."""
    positions = np.asarray(positions, dtype=float)
    off = positions - positions[i]
    off[:, 0] = min_image(off[:, 0], periodic_length)
    count = int(np.sum(np.hypot(off[:, 0], off[:, 1]) <= radius))
    return count / (math.pi * radius * radius)


# ---------------------------------------------------------------------------
# flow

def flow_rate(crossing_times, window: tuple[float, float] | None = None) -> float:
    """Crossings per second.

    With an explicit half-open ``window`` this counts crossings inside it
    over its length. By default the window spans first to last crossing
    and the rate is ``(n - 1) / (t_last - t_first)``.
    """
    t = np.sort(np.asarray(crossing_times, dtype=float))
    if window is not None:
        a, b = window
        if not b > a:
            raise ValueError("window must have positive length")
        return float(np.sum((t >= a) & (t < b))) / (b - a)
    if len(t) < 2 or t[-1] == t[0]:
        return 0.0
    return (len(t) - 1) / float(t[-1] - t[0])


# ---------------------------------------------------------------------------
# filtering and statistics

def zero_phase_filter(series, width: int = 5) -> np.ndarray:
    """Forward moving average followed by the same average run backwards.

    The two passes combine to a symmetric triangular kernel of ``2*width-1``
    points, evaluated here in mirrored pairs so reversing the input reverses
    the output bit for bit. Edges use reflection padding.
    """
    x = np.asarray(series, dtype=float)
    if width < 1:
        raise ValueError("width must be positive")
    if len(x) < width:
        raise ValueError(f"series length {len(x)} shorter than filter width {width}")
    if width == 1:
        return x.copy()
    m = width - 1
    if len(x) > m:
        padded = np.pad(x, m, mode="reflect")
    else:
        padded = np.pad(x, m, mode="symmetric")
    n = len(x)
    centre = padded[m:m + n]
    out = (width / width**2) * centre
    for k in range(1, width):
        out = out + ((width - k) / width**2) * (padded[m - k:m - k + n] + padded[m + k:m + k + n])
    return out


@dataclass
class SpeedStats:
    rho: np.ndarray
    mu_norm: np.ndarray
    sigma_norm: np.ndarray
    mu_filt: np.ndarray
    sigma_filt: np.ndarray
    counts: np.ndarray

    def rows(self):
        for k in range(len(self.rho)):
            yield (float(self.rho[k]), float(self.mu_norm[k]), float(self.sigma_norm[k]),
                   float(self.mu_filt[k]), float(self.sigma_filt[k]))


def speed_moments(speeds) -> tuple[float, float]:
    """Normalised mean and (population) standard deviation of speeds."""
    v = np.asarray(speeds, dtype=float)
    return float(v.mean() / MEAN_SPEED), float(v.std() / SPEED_STD)


def speed_statistics(samples: dict, width: int = 5, min_samples: int = 30) -> SpeedStats:
    """Per-density normalised moments plus their zero-phase filtered curves.

    ``samples`` maps global density to the instantaneous speeds gathered in
    the stationary phase. Curves shorter than ``width`` are left unfiltered.
    """
    rho = np.array(sorted(samples))
    mu, sd, cnt = [], [], []
    for r in rho:
        v = np.asarray(samples[r], dtype=float)
        if len(v) < min_samples:
            raise ValueError(f"only {len(v)} speed samples at density {r}; need {min_samples}")
        m, s = speed_moments(v)
        mu.append(m)
        sd.append(s)
        cnt.append(len(v))
    mu, sd = np.array(mu), np.array(sd)
    if len(rho) >= width:
        mf, sf = zero_phase_filter(mu, width), zero_phase_filter(sd, width)
    else:
        mf, sf = mu.copy(), sd.copy()
    return SpeedStats(rho, mu, sd, mf, sf, np.array(cnt))


# ---------------------------------------------------------------------------
# lanes

@dataclass
class LaneResult:
    count: int
    no_lanes: bool
    histogram: np.ndarray
    smoothed: np.ndarray
    peaks: list = field(default_factory=list)


def detect_lanes(y, y_range: tuple[float, float], bin_width: float = 0.5, width: int = 3,
                 peak_fraction: float = 0.5, lane_contrast: float = 1.5) -> LaneResult:
    """Count lanes from cross-corridor positions of one walking direction.

    Histogram with ``bin_width`` bins, smoothed by :func:`zero_phase_filter`;
    a lane is a local maximum above ``peak_fraction`` of the global maximum.
    The default ``width`` of 3 (a 2 m triangle on 0.5 m bins) keeps about
    half the amplitude of lanes 3.3 m apart; a width of 5 spans 4.5 m and
    flattens such a pattern to a tenth.
    When no bin exceeds ``lane_contrast`` times the mean, the crowd has no
    lane structure and the count is 0.
    """
    lo, hi = y_range
    nbins = max(1, int(round((hi - lo) / bin_width)))
    hist, _ = np.histogram(np.asarray(y, dtype=float), bins=nbins, range=(lo, hi))
    hist = hist.astype(float)
    # nobody stands beyond the walls: pad with empty bins so the reflected
    # edge padding of the filter does not mirror wall-side crowds into peaks
    pad = width - 1
    smooth = zero_phase_filter(np.pad(hist, pad), width)[pad:pad + nbins]
    top = smooth.max() if len(smooth) else 0.0
    mean = smooth.mean() if len(smooth) else 0.0
    if top <= 0 or top <= lane_contrast * mean:
        return LaneResult(0, True, hist, smooth, [])
    ext = np.concatenate([[-np.inf], smooth, [-np.inf]])
    peaks = [
        k for k in range(len(smooth))
        if ext[k + 1] > ext[k] and ext[k + 1] >= ext[k + 2] and smooth[k] >= peak_fraction * top
    ]
    return LaneResult(len(peaks), False, hist, smooth, peaks)


def lane_counts(pos: np.ndarray, target_ids: np.ndarray, length: float, width: float,
                section: float = 25.0, x0: float = 0.0, y0: float = 0.0, min_agents: int = 20) -> dict:
    """Lanes per walking direction in each ``section``-long slice of a walkway.

    Slices with fewer than ``min_agents`` walkers of a direction are skipped.
    Returns ``{target_id: [count per slice]}``.
    """
    out = {}
    edges = x0 + np.arange(0.0, length + 1e-9, section)
    for tid in np.unique(target_ids):
        counts = []
        for a, b in zip(edges[:-1], edges[1:]):
            sel = (target_ids == tid) & (pos[:, 0] >= a) & (pos[:, 0] < b)
            if sel.sum() < min_agents:
                continue
            counts.append(detect_lanes(pos[sel, 1], (y0, y0 + width)).count)
        out[int(tid)] = counts
    return out


# ---------------------------------------------------------------------------
# spacing

def min_pairwise_distance(positions, periodic_length: float | None = None, domain=None,
                          cutoff: float | None = None):
    """Smallest centre distance ``(d, i, j)`` over all pairs.

    With ``domain`` and ``cutoff`` the search uses the spatial index and
    only looks at pairs closer than ``cutoff``; ``(inf, -1, -1)`` if none.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    n = len(pos)
    if n < 2:
        raise ValueError("need at least two agents")
    if domain is not None and cutoff is not None:
        i, j = NeighborIndex(pos, cutoff, domain, periodic_length).pairs_within(cutoff)
    else:
        i, j = np.triu_indices(n, k=1)
    keep = i < j
    i, j = i[keep], j[keep]
    if len(i) == 0:
        return math.inf, -1, -1
    off = pos[j] - pos[i]
    off[:, 0] = min_image(off[:, 0], periodic_length)
    d = np.hypot(off[:, 0], off[:, 1])
    k = int(np.argmin(d))
    return float(d[k]), int(i[k]), int(j[k])


# ---------------------------------------------------------------------------
# simulation sinks

class DensitySpeedSink:
    """Local density and speed per agent at a fixed cadence after warm-up."""

    def __init__(self, domain, periodic_length: float | None = None, every: float = 1.0, warmup: float = 0.0,
                 estimator: str = "voronoi"):
        self.domain = domain
        self.periodic_length = periodic_length
        self.every = every
        self.warmup = warmup
        self.estimator = estimator
        self.rows: list[tuple[float, int, float, float]] = []
        self._next = warmup

    def sample(self, snap) -> None:
        if snap.t + 1e-9 < self._next or len(snap.ids) == 0:
            return
        self._next = snap.t + self.every
        if self.estimator == "disc":
            rho = [disc_density(k, snap.pos, 1.0, self.periodic_length) for k in range(len(snap.ids))]
        else:
            rho = local_densities(snap.pos, self.domain, self.periodic_length)
        speed = np.hypot(snap.velocity[:, 0], snap.velocity[:, 1])
        for k in range(len(snap.ids)):
            self.rows.append((snap.t, int(snap.ids[k]), float(rho[k]), float(speed[k])))


class SpeedSink:
    """Instantaneous speeds of all agents after warm-up."""

    def __init__(self, warmup: float = 30.0, every: float = 0.5):
        self.warmup = warmup
        self.every = every
        self.speeds: list[np.ndarray] = []
        self._next = warmup

    def sample(self, snap) -> None:
        if snap.t + 1e-9 < self._next:
            return
        self._next = snap.t + self.every
        self.speeds.append(np.hypot(snap.velocity[:, 0], snap.velocity[:, 1]))

    def all(self) -> np.ndarray:
        return np.concatenate(self.speeds) if self.speeds else np.zeros(0)


class LaneSink:
    """Median per-slice lane count of each walking direction at a fixed cadence."""

    def __init__(self, domain, section: float = 25.0, every: float = 10.0, start: float = 0.0):
        self.domain = domain
        self.section = section
        self.every = every
        self.rows: list[tuple[float, int, int]] = []
        self._next = start

    def sample(self, snap) -> None:
        if snap.t + 1e-9 < self._next or len(snap.ids) == 0:
            return
        self._next = snap.t + self.every
        x0, y0, x1, y1 = self.domain
        counts = lane_counts(snap.pos, snap.target_ids, x1 - x0, y1 - y0, self.section, x0, y0)
        for tid, c in sorted(counts.items()):
            self.rows.append((snap.t, tid, int(np.median(c)) if c else 0))

"""Backward extension of the local manifold and its projection to x-space."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .exceptions import UsageError
from .integrators import COMPLETED, HAMILTONIAN_CHECK, IntegratorConfig, integrate_many
from .linear import SeparatedSystem
from .picard import GridConfig, LocalManifold, picard_sweep
from .problems import HjProblem

DEFAULT_T_MIN = -3.8
BLOWUP_H = 1.0


@dataclass
class ManifoldCurve:
    """One curve of the extended manifold, samples in increasing time.

    ``t <= 0`` is the backward-extended part, ``t >= 0`` the local part; the
    sample at ``t = 0`` is the boundary point of the local manifold.
    """

    xi: np.ndarray
    t: np.ndarray
    x: np.ndarray
    p: np.ndarray
    H: np.ndarray
    stop_reason: str = COMPLETED
    stop_time: Optional[float] = None

    @property
    def t_min(self) -> float:
        return float(self.t[0])

    @property
    def junction(self) -> int:
        return int(np.flatnonzero(self.t == 0.0)[0])

    @property
    def states(self) -> np.ndarray:
        return np.concatenate([self.x, self.p], axis=1)

    def backward(self) -> "ManifoldCurve":
        j = self.junction
        return ManifoldCurve(self.xi, self.t[: j + 1], self.x[: j + 1], self.p[: j + 1], self.H[: j + 1],
                             self.stop_reason, self.stop_time)


@dataclass
class GlobalManifold:
    curves: list
    delta: float
    method: str
    h: Optional[float] = None
    info: dict = field(default_factory=dict)
    problem: Optional[HjProblem] = field(default=None, repr=False)

    def samples(self, delta: Optional[float] = None):
        """All stored ``(x, p, H)`` with ``|H| <= delta`` (default: own delta)."""
        delta = self.delta if delta is None else delta
        x = np.concatenate([c.x for c in self.curves])
        p = np.concatenate([c.p for c in self.curves])
        H = np.concatenate([c.H for c in self.curves])
        keep = np.abs(H) <= delta
        return x[keep], p[keep], H[keep]


def _local_segment(curve):
    i0 = int(np.searchsorted(curve.t, 0.0))
    return curve.t[i0:], curve.x[i0:], curve.p[i0:], curve.H[i0:]


def _join(xi, traj, local_curve):
    """Concatenate a backward trajectory (starting at the junction) with the
    local segment; the junction sample comes from the local curve."""
    t_loc, x_loc, p_loc, H_loc = _local_segment(local_curve)
    d = x_loc.shape[1]
    back = traj.states[1:][::-1]
    t = np.concatenate([traj.times[1:][::-1], t_loc])
    x = np.concatenate([back[:, :d], x_loc])
    p = np.concatenate([back[:, d:], p_loc])
    H = np.concatenate([traj.H_values[1:][::-1], H_loc])
    return ManifoldCurve(np.asarray(xi).copy(), t, x, p, H, traj.stop_reason, traj.stop_time)


def extend_manifold(prob: HjProblem, local: LocalManifold, config: Optional[IntegratorConfig] = None,
                    t_min_target: float = DEFAULT_T_MIN, method: str = "sv_control", threads: int = 1,
                    chunk_size: int = 25) -> GlobalManifold:
    """Integrate every boundary point of ``local`` backward in time.

    Each curve stops at ``t_min_target`` or at the first sample with
    ``|H| > delta`` (Hamiltonian check, per curve). ``method`` is one of the
    integrator names; ``rk45`` gives the general-purpose comparator.
    """
    config = config or IntegratorConfig(h=-0.005)
    if config.h >= 0:
        raise UsageError("backward extension needs a negative step size")
    if t_min_target > 0:
        raise UsageError("t_min_target must be <= 0")
    n_steps = int(round(t_min_target / config.h))
    Z0 = np.array([np.concatenate([c.x[int(np.searchsorted(c.t, 0.0))], c.p[int(np.searchsorted(c.t, 0.0))]])
                   for c in local.curves])
    chunks = [slice(i, i + chunk_size) for i in range(0, len(Z0), chunk_size)]

    def run(sl):
        return integrate_many(prob, Z0[sl], config, n_steps, method, reference=0.0)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    trajs = [tr for part in parts for tr in part]
    curves = [_join(c.xi, tr, c) for c, tr in zip(local.curves, trajs)]
    return GlobalManifold(curves, config.ham_check_delta, method, config.h,
                          {"t_min_target": t_min_target, "k": local.k}, prob)


# -- negative-time iteration baseline -----------------------------------------


@dataclass
class IterationCurve:
    """Curve from running the successive approximation on ``[t_neg, T]``."""

    xi: np.ndarray
    t: np.ndarray
    x: np.ndarray
    p: np.ndarray
    H: np.ndarray
    k: int
    diverged_at: Optional[int]
    blowup_time: Optional[float]

    @property
    def blew_up(self) -> bool:
        return self.blowup_time is not None


def _blowup_time(t, H, threshold=BLOWUP_H):
    with np.errstate(invalid="ignore"):
        bad = ~(np.abs(H) <= threshold)
    bad &= t <= 0
    return float(t[bad].max()) if np.any(bad) else None


def negative_time_iteration(sep: SeparatedSystem, xis, k: int, t_neg: float,
                            grid: GridConfig = GridConfig(), blowup: float = 1e4,
                            settle_tol: Optional[float] = 1e-10) -> list:
    """Baseline extension: the successive approximation evaluated for
    negative times, on ``[t_neg, T]``, for a batch of ``xi``.

    A curve whose iterate exceeds ``blowup`` in magnitude is frozen as
    diverged; one whose increments drop below ``settle_tol`` (the linear
    solver tolerance, which is also the noise floor of the increments on the
    unstable negative-time segment) is frozen as converged.
    """
    if t_neg > 0:
        raise UsageError("t_neg must be <= 0")
    xis = np.atleast_2d(np.asarray(xis, float))
    t, X, Pb, _, diverged_at = picard_sweep(sep, xis, k, grid, t_lo=t_neg, blowup=blowup,
                                                    settle_tol=settle_tol)
    out = []
    for j in range(xis.shape[0]):
        x, p = sep.transform.from_bar(X[:, j], Pb[:, j])
        with np.errstate(over="ignore", invalid="ignore"):
            H = sep.base.H(x, p)
        div = int(diverged_at[j])
        out.append(IterationCurve(xis[j].copy(), t, x, p, H, k, None if div < 0 else div, _blowup_time(t, H)))
    return out


def negative_time_extension(sep: SeparatedSystem, xi, k: int, t_neg: float,
                            grid: GridConfig = GridConfig()) -> IterationCurve:
    """Single-curve version of :func:`negative_time_iteration`.

    ``blowup_time`` is the latest ``t <= 0`` with ``|H| > 1`` (or a non-finite
    value), None when the curve stays bounded.
    """
    return negative_time_iteration(sep, np.asarray(xi, float)[None, :], k, t_neg, grid)[0]


def truncate_curve(curve, delta: float) -> ManifoldCurve:
    """Keep the samples from ``t = 0`` backward until the first ``|H| > delta``,
    plus the whole forward part."""
    t = curve.t
    j = int(np.flatnonzero(t == 0.0)[0]) if np.any(t == 0.0) else int(np.searchsorted(t, 0.0))
    with np.errstate(invalid="ignore"):
        ok = np.abs(curve.H) <= delta
    first = j
    while first > 0 and ok[first - 1]:
        first -= 1
    reason = HAMILTONIAN_CHECK if first > 0 else COMPLETED
    stop = float(t[first - 1]) if first > 0 else None
    return ManifoldCurve(np.asarray(curve.xi).copy(), t[first:], curve.x[first:], curve.p[first:],
                         curve.H[first:], reason, stop)


def iteration_manifold(sep: SeparatedSystem, xis, k: int, t_neg: float, delta: float,
                       grid: GridConfig = GridConfig(), chunk_size: int = 50, threads: int = 1) -> GlobalManifold:
    """The baseline curves for every ``xi``, truncated by the Hamiltonian check."""
    xis = np.atleast_2d(np.asarray(xis, float))
    chunks = [xis[i:i + chunk_size] for i in range(0, len(xis), chunk_size)]

    def run(chunk):
        return negative_time_iteration(sep, chunk, k, t_neg, grid)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    raw = [c for part in parts for c in part]
    curves = [truncate_curve(c, delta) for c in raw]
    blowups = [c.blowup_time for c in raw]
    return GlobalManifold(curves, delta, "iteration", None,
                          {"t_min_target": t_neg, "k": k, "blowup_times": blowups}, sep.base)


# -- projection domain --------------------------------------------------------


@dataclass
class ProjectionDomain:
    """Projection of manifold samples to x-space.

    For d = 2: the alpha shape of the points (kept Delaunay triangles), its
    boundary loops (largest first, vertices in order) and enclosed area. For
    d > 2 only the bounding box is recorded.
    """

    area: float
    alpha: Optional[float]
    n_points: int
    lower: np.ndarray
    upper: np.ndarray
    boundary: list = field(default_factory=list)
    _tri: Optional[Delaunay] = field(default=None, repr=False)
    _keep: Optional[np.ndarray] = field(default=None, repr=False)

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        if self._tri is None:
            return np.all((x >= self.lower) & (x <= self.upper), axis=1)
        s = self._tri.find_simplex(x)
        return (s >= 0) & self._keep[np.maximum(s, 0)]


def _circumradius(P):
    a = np.linalg.norm(P[:, 1] - P[:, 2], axis=1)
    b = np.linalg.norm(P[:, 0] - P[:, 2], axis=1)
    c = np.linalg.norm(P[:, 0] - P[:, 1], axis=1)
    area = 0.5 * np.abs((P[:, 1, 0] - P[:, 0, 0]) * (P[:, 2, 1] - P[:, 0, 1])
                        - (P[:, 2, 0] - P[:, 0, 0]) * (P[:, 1, 1] - P[:, 0, 1]))
    with np.errstate(divide="ignore", invalid="ignore"):
        R = a * b * c / (4.0 * area)
    return np.where(area > 0, R, np.inf), area


def _boundary_loops(simplices):
    edges = np.sort(np.concatenate([simplices[:, [0, 1]], simplices[:, [1, 2]], simplices[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    border = uniq[counts == 1]
    adj = {}
    for e, (i, j) in enumerate(border):
        adj.setdefault(int(i), []).append((int(j), e))
        adj.setdefault(int(j), []).append((int(i), e))
    used = np.zeros(len(border), dtype=bool)
    loops = []
    for e0 in range(len(border)):
        if used[e0]:
            continue
        used[e0] = True
        start, cur = int(border[e0][0]), int(border[e0][1])
        loop = [start, cur]
        while cur != start:
            nxt = next(((v, e) for v, e in adj[cur] if not used[e]), None)
            if nxt is None:
                break
            used[nxt[1]] = True
            cur = nxt[0]
            loop.append(cur)
        loops.append(loop[:-1] if loop[-1] == start else loop)
    return loops


def _polygon_area(V):
    x, y = V[:, 0], V[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _spacing(pts, tri, labels, mask=None):
    """Median nearest-neighbour distance over the points selected by ``mask``;
    with ``labels``, the nearest neighbour is taken among Delaunay neighbours
    carrying a different label."""
    mask = np.ones(len(pts), dtype=bool) if mask is None else mask
    if labels is None:
        dist, _ = cKDTree(pts).query(pts[mask], k=2)
        return float(np.median(dist[:, 1]))
    e = np.concatenate([tri.simplices[:, [0, 1]], tri.simplices[:, [1, 2]], tri.simplices[:, [2, 0]]])
    e = e[labels[e[:, 0]] != labels[e[:, 1]]]
    if e.size == 0:
        raise UsageError("all points carry the same label")
    length = np.linalg.norm(pts[e[:, 0]] - pts[e[:, 1]], axis=1)
    best = np.full(len(pts), np.inf)
    np.minimum.at(best, e[:, 0], length)
    np.minimum.at(best, e[:, 1], length)
    best = best[mask]
    return float(np.median(best[np.isfinite(best)]))


def alpha_shape(points, alpha: Optional[float] = None, alpha_factor: float = 3.0,
                labels=None, spacing_mask=None) -> ProjectionDomain:
    """Alpha shape of 2-D points: Delaunay triangles with circumradius below
    ``alpha``.

    ``alpha`` defaults to ``alpha_factor`` times the median nearest-neighbour
    spacing. For points sampled densely along curves pass the curve index as
    ``labels``; the spacing is then measured between different curves, since
    the along-curve spacing would shrink the shape onto the curves themselves.
    ``spacing_mask`` restricts the points over which the median is taken.
    """
    pts = np.asarray(points, float)
    pts, first = np.unique(pts, axis=0, return_index=True)
    if labels is not None:
        labels = np.asarray(labels)[first]
    if spacing_mask is not None:
        spacing_mask = np.asarray(spacing_mask, bool)[first]
        if not spacing_mask.any():
            spacing_mask = None
    if pts.shape[0] < 3:
        raise UsageError("need at least 3 distinct points for a projection domain")
    lower, upper = pts.min(axis=0), pts.max(axis=0)
    tri = Delaunay(pts)
    if alpha is None:
        alpha = alpha_factor * _spacing(pts, tri, labels, spacing_mask)
    R, areas = _circumradius(pts[tri.simplices])
    keep = R < alpha
    loops = [pts[loop] for loop in _boundary_loops(tri.simplices[keep])] if np.any(keep) else []
    loops.sort(key=_polygon_area, reverse=True)
    return ProjectionDomain(float(areas[keep].sum()), alpha, len(pts), lower, upper, loops, tri, keep)


def project_domain(manifold: GlobalManifold, delta: Optional[float] = None, alpha: Optional[float] = None,
                   alpha_factor: float = 3.0, spacing: str = "between_curves", stride: int = 1) -> ProjectionDomain:
    """x-plane projection of all samples with ``|H| <= delta``.

    ``spacing`` selects how the default alpha is measured: ``between_curves``
    (default) or ``all`` (plain nearest neighbour over all samples). With
    ``between_curves`` the median is taken over the extended samples
    (``t <= 0``), which is where the domain grows; near the origin all curves
    crowd together and would dominate the statistic. ``stride`` keeps every
    stride-th stored sample per curve (for curves from very small steps).
    """
    if spacing not in ("between_curves", "all"):
        raise UsageError(f"unknown spacing rule {spacing!r}")
    if stride < 1:
        raise UsageError("stride must be at least 1")
    delta = manifold.delta if delta is None else delta
    xs, labels, back = [], [], []
    for i, c in enumerate(manifold.curves):
        keep = np.abs(c.H) <= delta
        keep[np.arange(len(keep)) % stride != 0] = False
        xs.append(c.x[keep])
        labels.append(np.full(int(keep.sum()), i))
        back.append(c.t[keep] <= 0)
    x = np.concatenate(xs)
    if x.shape[0] < 3:
        raise UsageError("fewer than 3 samples pass the Hamiltonian tolerance")
    if x.shape[1] != 2:
        return ProjectionDomain(float(np.prod(x.max(0) - x.min(0))), None, len(x), x.min(0), x.max(0))
    if spacing == "all":
        return alpha_shape(x, alpha, alpha_factor)
    return alpha_shape(x, alpha, alpha_factor, np.concatenate(labels), np.concatenate(back))

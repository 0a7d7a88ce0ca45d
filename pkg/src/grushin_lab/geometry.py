"""Metric structures of the Grushin plane.

Everything here is built on the vector fields ``X1 = d/dx1`` and
``X2 = x1 d/dx2``: the gauge ``rho``, the quasi-distance ``d~``, the
Franchi-Lanconelli boxes, the sublevel families ``G`` / ``G~``, exact ball
volumes and a lattice approximation of the Carnot-Caratheodory distance.

Coordinates are passed as anything ``np.asarray`` turns into an array whose
last axis has length 2, so every function works on a single point or on a
batch of points with numpy broadcasting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy import integrate
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .report import ExperimentReport

#: homogeneous dimension of the plane under ``(t x1, t^2 x2)``
Q = 3
#: degrees of the coordinates x1, x2
DEGREES = (1, 2)


class Point(NamedTuple):
    x1: float
    x2: float


def as_point(x) -> Point:
    x1, x2 = (float(v) for v in x)
    if not (math.isfinite(x1) and math.isfinite(x2)):
        raise ValueError(f"point coordinates must be finite, got {(x1, x2)}")
    return Point(x1, x2)


def _xy(x):
    a = np.asarray(x, dtype=float)
    if a.shape[-1] != 2:
        raise ValueError(f"expected trailing coordinate axis of length 2, got shape {a.shape}")
    return a[..., 0], a[..., 1]


def _scalar(v):
    return float(v) if np.ndim(v) == 0 else v


# -- gauges -----------------------------------------------------------------


def rho(x, y):
    """``((x1^2 - y1^2)^2 + 4 (x2 - y2)^2)^(1/4)``.

    Vanishes at ``y`` and at its mirror image ``(-y1, y2)``.
    """
    x1, x2 = _xy(x)
    y1, y2 = _xy(y)
    return _scalar(np.sqrt(np.hypot(x1 * x1 - y1 * y1, 2.0 * (x2 - y2))))


def quasi_distance(x, y):
    """The explicit quasi-distance ``d~(x, y)``, symmetric and 1/2-Hoelder."""
    x1, x2 = _xy(x)
    y1, y2 = _xy(y)
    s = x1 * x1 + y1 * y1
    d2 = 4.0 * np.abs(x2 - y2)
    # sqrt(s + d2) - sqrt(s) rewritten without cancellation
    vertical = d2 / (np.sqrt(s + d2) + np.sqrt(s) + (d2 == 0))
    return _scalar(np.abs(x1 - y1) + vertical)


def box_extent(j: int, x, r):
    """Half-width ``F_j(x, r)`` of ``Box(x, r)`` along coordinate ``j``."""
    x1, _ = _xy(x)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("radius must be nonnegative")
    if j == 1:
        return _scalar(r + 0.0 * x1)
    if j == 2:
        return _scalar(r * (np.abs(x1) + r))
    raise ValueError(f"coordinate index must be 1 or 2, got {j}")


def box_extent_inverse(j: int, x, s):
    """Inverse ``G_j(x, .)`` of ``r -> F_j(x, r)`` on ``[0, inf)``."""
    x1, _ = _xy(x)
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("argument must be nonnegative")
    if j == 1:
        return _scalar(s + 0.0 * x1)
    if j == 2:
        a = np.abs(x1)
        # (-a + sqrt(a^2 + 4 s)) / 2, rationalized
        return _scalar(2.0 * s / (a + np.sqrt(a * a + 4.0 * s) + ((a == 0) & (s == 0))))
    raise ValueError(f"coordinate index must be 1 or 2, got {j}")


def box_gauge(x, y):
    """``sum_j G_j(x, |y_j - x_j|)``, comparable to the CC distance."""
    x1, x2 = _xy(x)
    y1, y2 = _xy(y)
    return _scalar(box_extent_inverse(1, x, np.abs(y1 - x1)) + box_extent_inverse(2, x, np.abs(y2 - x2)))


def level_radius(y1, s):
    """The value of ``rho(., y)`` on the boundary of ``G~(y, s)``.

    ``G~(y, s)`` is a sublevel set of ``rho(., y)`` in both regimes of the
    piecewise gauge: ``rho < s`` when ``|y1| < s`` and ``rho < sqrt(s |y1|)``
    otherwise.  The map is continuous and increasing in ``s``.
    """
    a = np.abs(np.asarray(y1, dtype=float))
    s = np.asarray(s, dtype=float)
    return _scalar(np.where(a < s, s, np.sqrt(s * a)))


def g_tilde(x, y, r):
    """Piecewise gauge ``g~_r(x, y)``: ``rho`` if ``|y1| < r``, else ``rho^2 / |y1|``."""
    y1 = abs(float(np.asarray(y, dtype=float)[..., 0]))
    p = np.asarray(rho(x, y))
    return _scalar(p if y1 < r else p * p / y1)


def g_half(x, y, r):
    """``g_r(x, y)``: like :func:`g_tilde` but ``+inf`` across the axis when ``|y1| >= r``."""
    y = np.asarray(y, dtype=float)
    y1 = float(y[..., 0])
    out = np.asarray(g_tilde(x, y, r), dtype=float)
    if abs(y1) >= r:
        x1, _ = _xy(x)
        out = np.where(x1 * y1 < 0, np.inf, out)
    return _scalar(out)


# -- sets -------------------------------------------------------------------


class SetKind(str, Enum):
    B = "B"
    B_TILDE = "B_tilde"
    G = "G"
    G_TILDE = "G_tilde"


@dataclass(frozen=True)
class BoxSpec:
    center: Point
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        if not self.radius > 0:
            raise ValueError("box radius must be positive")

    @property
    def half_widths(self) -> tuple[float, float]:
        return float(box_extent(1, self.center, self.radius)), float(box_extent(2, self.center, self.radius))


@dataclass(frozen=True)
class QuasiBallSpec:
    center: Point
    radius: float
    kind: SetKind = SetKind.B

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        object.__setattr__(self, "kind", SetKind(self.kind))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")


def contains(spec: BoxSpec | QuasiBallSpec, x):
    """Membership of ``x`` in an open box, quasi-ball or ``G``-type sublevel set."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(spec.center)
    r = spec.radius
    if isinstance(spec, BoxSpec):
        w1, w2 = spec.half_widths
        x1, x2 = _xy(x)
        return _scalar((np.abs(x1 - y[0]) < w1) & (np.abs(x2 - y[1]) < w2))
    if spec.kind is SetKind.B:
        return _scalar(np.asarray(quasi_distance(x, y)) < r)
    if spec.kind is SetKind.B_TILDE:
        return _scalar((np.asarray(quasi_distance(x, y)) < r) | (np.asarray(quasi_distance(x, reflect(y))) < r))
    if spec.kind is SetKind.G_TILDE:
        return _scalar(np.asarray(g_tilde(x, y, r)) < r)
    return _scalar(np.asarray(g_half(x, y, r)) < r)


# -- group actions ----------------------------------------------------------


def dilate(t: float, x):
    """Anisotropic dilation ``(t x1, t^2 x2)``."""
    if not t > 0:
        raise ValueError("dilation factor must be positive")
    x1, x2 = _xy(x)
    return np.stack([t * x1, t * t * x2], axis=-1)


def translate_scale(r: float, y2: float, x):
    """``T(x) = (r x1, y2 + r^2 x2)``, the chart sending unit sets to radius-``r`` sets."""
    if not r > 0:
        raise ValueError("scale must be positive")
    x1, x2 = _xy(x)
    return np.stack([r * x1, y2 + r * r * x2], axis=-1)


def reflect(x):
    """Mirror ``S(x1, x2) = (-x1, x2)``."""
    x1, x2 = _xy(x)
    return np.stack([-x1, x2 + 0.0], axis=-1)


# -- volumes ----------------------------------------------------------------


def _check_radius(r):
    if not r > 0:
        raise ValueError("radius must be positive")


def ball_volume(y, r: float) -> float:
    """Lebesgue measure of ``B(y, r)``.

    Integrates the exact fibre length over ``t = x1 - y1`` with adaptive
    Gauss-Kronrod, splitting at the kink ``t = 0``.  Invariant under
    ``y2``, homogeneous of degree 3 under dilations.
    """
    _check_radius(r)
    a = float(np.asarray(y, dtype=float)[0])

    def fibre(t):
        w = r - abs(t)
        return 0.5 * (w * w + 2.0 * w * math.hypot(a + t, a))

    scale = r * r * (r + abs(a))
    total = 0.0
    for lo, hi in ((-r, 0.0), (0.0, r)):
        val, _ = integrate.quad(fibre, lo, hi, epsabs=1e-10 * scale, epsrel=1e-13, limit=200)
        total += val
    return total


def _primitive_hypot(u, a):
    # antiderivative of sqrt(u^2 + a^2)
    if a == 0.0:
        return 0.5 * u * abs(u)
    return 0.5 * (u * math.hypot(u, a) + a * a * math.asinh(u / a))


def ball_volume_derivative(y, r: float) -> float:
    """Closed form of ``d/dr |B(y, r)| = r^2 + int_{-r}^{r} sqrt((y1+t)^2 + y1^2) dt``."""
    _check_radius(r)
    a = float(np.asarray(y, dtype=float)[0])
    b = abs(a)
    return r * r + _primitive_hypot(a + r, b) - _primitive_hypot(a - r, b)


def ring_deficit(y, r: float, eps: float) -> float:
    """Relative measure ``|B(y,r) \\ B(y,(1-eps) r)| / |B(y,r)|``.

    The numerator is integrated from the closed-form derivative so that it
    carries no cancellation when ``eps`` is small.
    """
    _check_radius(r)
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    shell, _ = integrate.quad(lambda s: ball_volume_derivative(y, s), (1.0 - eps) * r, r,
                              epsabs=0.0, epsrel=1e-13, limit=200)
    return shell / ball_volume(y, r)


def volume_constants(ratios, eps_values=(1e-1, 1e-2, 1e-3), r: float = 1.0) -> dict:
    """Measure the comparison, doubling and ring constants over a sweep of ``|y1| / r``.

    Returns per-ratio values together with the extremes; nothing is
    compared against a fixed threshold here.
    """
    rows = []
    for q in ratios:
        y = (q * r, 0.0)
        f = ball_volume(y, r)
        model = r * r * (r + abs(q) * r)
        deficits = [ring_deficit(y, r, e) / e for e in eps_values]
        rows.append({
            "ratio": float(q),
            "volume": f,
            "volume_over_model": f / model,
            "doubling": ball_volume(y, 2 * r) / f,
            "ring_c": max(deficits),
            "ring_per_eps": deficits,
            "ring_proof_bound": 4.0 * model / f,
        })
    vm = [row["volume_over_model"] for row in rows]
    c_ring = [row["ring_c"] for row in rows]
    return {
        "rows": rows,
        "comparison_C": max(max(vm), 1.0 / min(vm)),
        "doubling_C_D": max(row["doubling"] for row in rows),
        "ring_c": max(c_ring),
        "ring_c_spread": max(c_ring) / min(c_ring),
    }


# -- Carnot-Caratheodory lattice --------------------------------------------


@dataclass(frozen=True)
class CCLattice:
    """Axis-aligned lattice over a box, with a floor on the vertical speed.

    Traversing ``dx1`` costs ``|dx1|``; traversing ``dx2`` at abscissa
    ``x1`` costs ``|dx2| / max(|x1|, floor)``.
    """

    box: BoxSpec
    h: float
    floor: float | None = None

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("lattice spacing must be positive")
        fl = self.h if self.floor is None else self.floor
        if not 0 < fl <= self.h:
            raise ValueError("regularization floor must lie in (0, h]")
        object.__setattr__(self, "floor", float(fl))

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        c1, c2 = self.box.center
        w1, w2 = self.box.half_widths
        k1 = int(math.floor(w1 / self.h + 1e-9))
        k2 = int(math.floor(w2 / self.h + 1e-9))
        return c1 + self.h * np.arange(-k1, k1 + 1), c2 + self.h * np.arange(-k2, k2 + 1)

    def node_index(self, x) -> int:
        a1, a2 = self.axes()
        x1, x2 = (float(v) for v in x)
        tol = 1e-9 * self.h
        if not (a1[0] - tol <= x1 <= a1[-1] + tol and a2[0] - tol <= x2 <= a2[-1] + tol):
            raise ValueError(f"point {(x1, x2)} lies outside the lattice")
        i = int(np.argmin(np.abs(a1 - x1)))
        j = int(np.argmin(np.abs(a2 - x2)))
        return j * a1.size + i

    def graph(self):
        a1, a2 = self.axes()
        n1, n2 = a1.size, a2.size
        idx = np.arange(n1 * n2).reshape(n2, n1)
        X1 = np.broadcast_to(a1, (n2, n1))
        rows = [idx[:, :-1].ravel(), idx[:-1, :].ravel()]
        cols = [idx[:, 1:].ravel(), idx[1:, :].ravel()]
        horiz = np.full(rows[0].size, self.h)
        xbar = np.abs(X1[:-1, :])
        vert = self.h / np.maximum(xbar, self.floor).ravel()
        w = np.concatenate([horiz, vert])
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        n = n1 * n2
        return coo_matrix((w, (r, c)), shape=(n, n)).tocsr()


def cc_distances_from(x, lattice: CCLattice) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lattice travel time from ``x`` to every node; returns ``(x1_axis, x2_axis, times)``."""
    src = lattice.node_index(x)
    dist = dijkstra(lattice.graph(), directed=False, indices=src)
    a1, a2 = lattice.axes()
    return a1, a2, dist.reshape(a2.size, a1.size)


def cc_distance(x, y, lattice: CCLattice) -> float:
    """Approximate ``d_CC(x, y)`` by the shortest lattice path between the nearest nodes."""
    dst = lattice.node_index(y)
    _, _, times = cc_distances_from(x, lattice)
    return float(times.ravel()[dst])


# -- structure theorems -----------------------------------------------------


def _uniform_in_box(rng, y, r, n):
    w1 = box_extent(1, y, r)
    w2 = box_extent(2, y, r)
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.column_stack([y[0] + w1 * u[:, 0], y[1] + w2 * u[:, 1]])


def structure_check(kind: str, y, r: float, samples: int, seed: int = 0,
                    sample_scales=(0.2, 1.0, 3.0, 4.0), lattice_h: float | None = None) -> ExperimentReport:
    """Sample the inclusion chains of the two structure theorems.

    ``charact``: ``B(y,r) <= Box(y,r) <= B(y,3r)``.
    ``equiv``:   ``Box(y,r/5) <= G(y,r) <= Box(y,3r)``.
    ``frla``:    ratios ``box_gauge / cc_distance`` on lattice nodes (measured constant).

    Points are drawn in equal strata, uniformly from ``Box(y, s * r)`` for
    each ``s`` in ``sample_scales``: the small strata populate the inner sets,
    the largest one (beyond ``3r``) produces points that can actually violate
    the outer inclusions.  The center itself is always the first sample.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    y = as_point(y)
    rng = np.random.default_rng(seed)
    rep = ExperimentReport(name=f"structure_{kind}", seed=seed,
                           config={"kind": kind, "center": list(y), "radius": r, "samples": samples,
                                   "sample_scales": list(sample_scales)})
    counts = np.diff(np.linspace(0, samples - 1, len(sample_scales) + 1).astype(int))
    pts = [np.asarray(y)[None, :]]
    pts += [_uniform_in_box(rng, y, s * r, n) for s, n in zip(sample_scales, counts)]
    pts = np.vstack(pts)

    if kind == "charact":
        in_b = contains(QuasiBallSpec(y, r, "B"), pts)
        in_box = contains(BoxSpec(y, r), pts)
        in_b3 = contains(QuasiBallSpec(y, 3 * r, "B"), pts)
        inner = int(np.sum(in_b & ~in_box))
        outer = int(np.sum(in_box & ~in_b3))
        rep.measurements.update(inner_violations=inner, outer_violations=outer,
                                hits_inner_set=int(in_b.sum()), hits_middle_set=int(in_box.sum()))
    elif kind == "equiv":
        in_small = contains(BoxSpec(y, r / 5), pts)
        in_g = contains(QuasiBallSpec(y, r, "G"), pts)
        in_box3 = contains(BoxSpec(y, 3 * r), pts)
        inner = int(np.sum(in_small & ~in_g))
        outer = int(np.sum(in_g & ~in_box3))
        rep.measurements.update(inner_violations=inner, outer_violations=outer,
                                hits_inner_set=int(in_small.sum()), hits_middle_set=int(in_g.sum()))
    elif kind == "frla":
        h = lattice_h if lattice_h is not None else r / 16
        lat = CCLattice(BoxSpec(y, 2 * r), h)
        a1, a2, times = cc_distances_from(y, lat)
        X1, X2 = np.meshgrid(a1, a2)
        nodes = np.stack([X1, X2], axis=-1)
        gauge = np.asarray(box_gauge(y, nodes))
        off = times > 0
        pick = np.flatnonzero(off.ravel())
        pick = rng.choice(pick, size=min(samples, pick.size), replace=False)
        ratio = gauge.ravel()[pick] / times.ravel()[pick]
        inner = int(np.sum(~np.isfinite(ratio) | (ratio <= 0)))
        outer = 0
        rep.measurements.update(ratio_min=float(ratio.min()), ratio_max=float(ratio.max()),
                                measured_C=float(max(ratio.max(), 1 / ratio.min())), lattice_h=h)
    else:
        raise ValueError(f"unknown structure check {kind!r}")
    rep.measurements["violations"] = inner + outer
    rep.check("no_violations", inner + outer == 0, tolerance=0)
    return rep

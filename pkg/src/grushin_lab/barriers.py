"""Closed-form barriers built from powers of the gauge ``rho``.

Three objects live here:

* the power barrier ``rho(., y)^a`` with exact first and second partials;
* the smoothed barrier ``h(M1 - M2 rho^alpha)`` used for the critical density
  estimate, with its cutoff;
* the ring barrier ``M2 rho^alpha - M1`` interpolating between the level
  sets ``dG~(y, r)`` and ``dG~(y, 3r)``.

Every ``G~(y, s)`` is a sublevel set of ``rho(., y)`` (see
:func:`grushin_lab.geometry.level_radius`), so all boundary conditions reduce
to equations in the single unknown ``rho^alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .fields import CoefficientField, EllipticityConstants, SmoothFunction
from .geometry import as_point, level_radius
from .report import ExperimentReport


def alpha(ell: EllipticityConstants) -> float:
    """Largest admissible exponent ``2 - 3 Lam / lam`` (always ``<= -1``)."""
    return 2.0 - 3.0 * ell.Lam / ell.lam


# -- power barrier ----------------------------------------------------------


def rho_partials(x, y):
    """``rho`` and its partials ``(rho, r1, r2, r11, r12, r22)`` with respect to ``x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x1 = x[..., 0]
    z = x[..., 1] - y[..., 1]
    d = x1 * x1 - y[..., 0] ** 2
    p4 = d * d + 4 * z * z
    p = p4 ** 0.25
    p3 = p4 / p
    p7 = p4 * p3
    r1 = d * x1 / p3
    r2 = 2 * z / p3
    r11 = (12 * z * z * x1 * x1 - y[..., 0] ** 2 * p4) / p7
    r12 = -6 * z * x1 * d / p7
    r22 = (3 * d * d - p4) / p7
    return p, r1, r2, r11, r12, r22


def _power_partials(x, y, a):
    with np.errstate(invalid="ignore", divide="ignore"):
        p, r1, r2, r11, r12, r22 = rho_partials(x, y)
    if np.any(p == 0):
        raise ValueError("power barrier is singular where rho vanishes")
    v = p ** a
    g1 = a * v / p  # a rho^(a-1)
    g2 = a * (a - 1) * v / (p * p)
    return (v, g1 * r1, g1 * r2,
            g2 * r1 * r1 + g1 * r11, g2 * r1 * r2 + g1 * r12, g2 * r2 * r2 + g1 * r22)


def power_barrier(y, a: float) -> SmoothFunction:
    """``phi = rho(., y)^a`` as a :class:`SmoothFunction` with exact partials."""
    y = np.asarray(as_point(y))

    def part(i):
        return lambda x1, x2: _power_partials(np.stack(np.broadcast_arrays(x1, x2), axis=-1), y, a)[i]

    return SmoothFunction(*(part(i) for i in range(6)))


def level_set_samples(y, levels, n: int, rng) -> np.ndarray:
    """Points with prescribed ``rho(., y)`` values, spread over both zeros of ``rho``.

    Uses ``x1^2 - y1^2 = rho^2 cos t``, ``2 (x2 - y2) = rho^2 sin t`` and a
    random sign for ``x1``; angles that would make ``x1^2`` negative are
    redrawn.
    """
    y1, y2 = as_point(y)
    levels = np.broadcast_to(np.asarray(levels, dtype=float), (n,)).copy()
    t = rng.uniform(0, 2 * math.pi, size=n)
    bad = y1 * y1 + levels**2 * np.cos(t) < 0
    while bad.any():
        t[bad] = rng.uniform(0, 2 * math.pi, size=int(bad.sum()))
        bad = y1 * y1 + levels**2 * np.cos(t) < 0
    sign = rng.choice([-1.0, 1.0], size=n)
    x1 = sign * np.sqrt(y1 * y1 + levels**2 * np.cos(t))
    x2 = y2 + 0.5 * levels**2 * np.sin(t)
    return np.column_stack([x1, x2])


def log_radial_samples(y, rho_min: float, rho_max: float, n: int, rng) -> np.ndarray:
    """Samples with ``log rho`` uniform on ``[log rho_min, log rho_max]``."""
    levels = np.exp(rng.uniform(math.log(rho_min), math.log(rho_max), size=n))
    return level_set_samples(y, levels, n, rng)


def _L_terms(fld: CoefficientField, parts, pts):
    # parts: (u, u1, u2, u11, u12, u22) already evaluated at pts
    a11, a12, a22 = fld.at(pts)
    _, _, _, u11, u12, u22 = parts
    x1 = pts[..., 0]
    t = (a11 * u11, 2 * a12 * x1 * u12, a22 * x1 * x1 * u22)
    return t[0] + t[1] + t[2], np.abs(t[0]) + np.abs(t[1]) + np.abs(t[2])


@dataclass(frozen=True)
class BarrierSpec:
    """Exponent, pole, radius and case-resolved constants of a closed-form barrier."""

    alpha: float
    center: tuple[float, float]
    radius: float
    case: str
    M1: float
    M2: float
    M3_or_m: float
    beta: int | None = None


def verify_subsolution(fld: CoefficientField, spec: BarrierSpec, samples=10_000, seed: int = 0,
                       rho_range: tuple[float, float] | None = None, rtol: float = 1e-10) -> ExperimentReport:
    """Check ``L rho^alpha >= 0`` at samples away from the zeros of ``rho``.

    ``samples`` is either a count (log-radial draw around both zeros) or an
    explicit ``(n, 2)`` array.  A sample fails when ``L phi`` is below
    ``-rtol`` times the sum of the absolute values of the three terms of ``L phi``.
    """
    y = as_point(spec.center)
    rng = np.random.default_rng(seed)
    if np.ndim(samples) == 0:
        scale = max(spec.radius, math.sqrt(spec.radius * abs(y.x1)))
        lo, hi = rho_range or (1e-3 * scale, 1e2 * scale)
        pts = log_radial_samples(y, lo, hi, int(samples), rng)
    else:
        pts = np.asarray(samples, dtype=float).reshape(-1, 2)
    val, mag = _L_terms(fld, _power_partials(pts, np.asarray(y), spec.alpha), pts)
    normalized = val / np.where(mag > 0, mag, 1.0)
    bad = normalized < -rtol
    admissible = spec.alpha <= alpha(fld.ell) + 1e-15
    rep = ExperimentReport(
        name="power_barrier_subsolution", seed=seed,
        config={"field": fld.descriptor, "alpha": spec.alpha, "center": list(y), "samples": len(pts),
                "admissible_alpha": bool(admissible)},
    )
    rep.measurements.update(violations=int(bad.sum()), min_normalized_L=float(normalized.min()),
                            alpha_extremal=alpha(fld.ell))
    if bad.any():
        i = int(np.argmin(normalized))
        rep.measurements["witness"] = pts[i].tolist()
        rep.measurements["witness_L"] = float(val[i])
    rep.check("L_phi_nonnegative", not bad.any(), tolerance=-rtol)
    return rep


def adversarial_field(y, ell: EllipticityConstants) -> CoefficientField:
    """Field whose weak eigenvector follows ``(x1^2 - y1^2, 2 (x2 - y2))``.

    This aligns the coefficient matrix against ``rho^alpha`` so that the
    subsolution property fails as soon as ``alpha`` exceeds ``2 - 3 Lam/lam``.
    """
    y1, y2 = as_point(y)
    lam, Lam = ell.lam, ell.Lam

    def ev(x1, x2):
        p = x1 * x1 - y1 * y1
        q = 2 * (x2 - y2)
        n = np.hypot(p, q)
        n = np.where(n > 0, n, 1.0)
        e1, e2 = np.where(n > 0, p / n, 1.0), q / n
        return (lam * e1 * e1 + Lam * e2 * e2, (lam - Lam) * e1 * e2, lam * e2 * e2 + Lam * e1 * e1)

    return CoefficientField(ev, ell, {"kind": "adversarial", "center": [y1, y2], "lam": lam, "Lam": Lam})


# -- smoothed barrier for the critical density ------------------------------


def smoothing_exponent(a: float) -> int:
    """Smallest integer ``beta`` with ``2 beta > max(1, 1 - 4 / a)``."""
    bound = max(1.0, 1.0 - 4.0 / a)
    beta = 1
    while not 2 * beta > bound:
        beta += 1
    return beta


def tail_integral(beta: int) -> float:
    """``int_0^inf ds / (1 + s^(2 beta)) = pi / (2 beta sin(pi / (2 beta)))``."""
    n = 2 * beta
    return math.pi / (n * math.sin(math.pi / n))


def _partial_tail(z, beta):
    # int_0^z ds / (1 + s^n) via the regularized incomplete beta function
    n = 2 * beta
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        w = np.where(z > 0, 1.0 / (1.0 + z ** (-float(n))), 0.0)
    return tail_integral(beta) * special.betainc(1.0 / n, 1.0 - 1.0 / n, w)


def smoothing(t, m: float, beta: int):
    """``h, h', h''`` of the C^2 splice: identity above ``-m``, saturating below."""
    t = np.asarray(t, dtype=float)
    s = t + m
    n = 2 * beta
    below = s < 0
    big = np.abs(s) > 1
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        sn = np.where(big, 0.0, s) ** n
        inv = np.where(big, s, 1.0) ** (-float(n))
        d1 = np.where(big, inv / (1 + inv), 1 / (1 + sn))
        d2 = np.where(big, -n * inv / np.where(big, s, 1.0) / (1 + inv) ** 2,
                      -n * np.where(big, 0.0, s) ** (n - 1) / (1 + sn) ** 2)
    h = np.where(below, -_partial_tail(-s, beta) - m, t)
    return h, np.where(below, d1, 1.0), np.where(below, d2, 0.0)


def _local_case(a1: float, r: float) -> str:
    if a1 >= 2 * r:
        return "far"  # |y1| >= 2r
    if a1 < r / 2:
        return "near"  # |y1| < r/2
    if a1 < r:
        return "inner_mid"  # r/2 <= |y1| < r
    return "outer_mid"  # r <= |y1| < 2r


def lemma41_constants(y, r: float, a: float) -> BarrierSpec:
    """Constants of ``phi = M1 - M2 rho^a`` with ``phi = 0`` on ``dG~(y,2r)``, ``-2`` on ``dG~(y,r)``.

    ``M3_or_m`` holds ``m = -phi`` on ``dG~(y, r/2)``.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    y = as_point(y)
    a1 = abs(y.x1)
    v_out, v_in, v_core = (level_radius(a1, s) ** a for s in (2 * r, r, r / 2))
    M2 = 2.0 / (v_in - v_out)
    M1 = M2 * v_out
    m = M2 * v_core - M1
    return BarrierSpec(a, tuple(y), r, _local_case(a1, r), M1, M2, m, smoothing_exponent(a))


@dataclass(frozen=True)
class CutoffFn:
    """C^1 ramp in ``rho``: 1 on ``G~(y, r/2)``, 0 outside ``G~(y, 2r/3)``, even in ``x1``."""

    center: tuple[float, float]
    radius: float

    @property
    def levels(self) -> tuple[float, float]:
        a1 = abs(self.center[0])
        return level_radius(a1, self.radius / 2), level_radius(a1, 2 * self.radius / 3)

    def __call__(self, x):
        from .geometry import rho

        lo, hi = self.levels
        s = np.clip((np.asarray(rho(x, self.center)) - lo) / (hi - lo), 0.0, 1.0)
        return 1.0 - s * s * (3.0 - 2.0 * s)


@dataclass(frozen=True)
class LocalBarrier:
    spec: BarrierSpec
    cutoff: CutoffFn

    @property
    def lower_bound(self) -> float:
        """``-M`` with ``M = m + int_0^inf (1 + s^(2 beta))^-1 ds``."""
        return -(self.spec.M3_or_m + tail_integral(self.spec.beta))

    def partials(self, x):
        sp = self.spec
        x = np.asarray(x, dtype=float)
        p, r1, r2, r11, r12, r22 = rho_partials(x, sp.center)
        zero = p == 0
        ps = np.where(zero, 1.0, p)
        v = ps ** sp.alpha
        g1 = sp.alpha * v / ps
        g2 = sp.alpha * (sp.alpha - 1) * v / (ps * ps)
        phi = sp.M1 - sp.M2 * v
        f1, f2 = -sp.M2 * g1 * r1, -sp.M2 * g1 * r2
        f11 = -sp.M2 * (g2 * r1 * r1 + g1 * r11)
        f12 = -sp.M2 * (g2 * r1 * r2 + g1 * r12)
        f22 = -sp.M2 * (g2 * r2 * r2 + g1 * r22)
        h, d1, d2 = smoothing(phi, sp.M3_or_m, sp.beta)
        out = (h, d1 * f1, d1 * f2, d2 * f1 * f1 + d1 * f11, d2 * f1 * f2 + d1 * f12, d2 * f2 * f2 + d1 * f22)
        if np.any(zero):
            out = tuple(np.where(zero, self.lower_bound if i == 0 else 0.0, o) for i, o in enumerate(out))
        return out

    def function(self) -> SmoothFunction:
        def part(i):
            return lambda x1, x2: self.partials(np.stack(np.broadcast_arrays(x1, x2), axis=-1))[i]

        return SmoothFunction(*(part(i) for i in range(6)))


def lemma41_barrier(y, r: float, ell: EllipticityConstants) -> LocalBarrier:
    spec = lemma41_constants(y, r, alpha(ell))
    return LocalBarrier(spec, CutoffFn(spec.center, r))


def verify_local_barrier(fld: CoefficientField, barrier: LocalBarrier, samples: int = 10_000, seed: int = 0,
                   rtol: float = 1e-10) -> ExperimentReport:
    """Sample the three properties of the smoothed barrier and measure its constant ``C``.

    ``C`` is the largest observed ``L phi~ * r^2 (r+|y1|)^2 / (x1^2 zeta)``
    over samples with ``zeta > 0``; where ``zeta = 0`` the operator must be
    nonpositive.
    """
    sp = barrier.spec
    y = sp.center
    r = sp.radius
    a1 = abs(y[0])
    rng = np.random.default_rng(seed)
    l_half, l_one, l_two = (level_radius(a1, s) for s in (r / 2, r, 2 * r))
    n3 = samples // 3
    inside = log_radial_samples(y, 1e-3 * l_half, l_one, n3, rng)
    outside = log_radial_samples(y, l_two, 1e2 * l_two, n3, rng)
    anywhere = log_radial_samples(y, 1e-3 * l_half, 1e2 * l_two, samples - 2 * n3, rng)
    parts = barrier.partials(inside)
    rep = ExperimentReport(name="local_barrier", seed=seed,
                           config={"field": fld.descriptor, "center": list(y), "radius": r, "alpha": sp.alpha,
                                   "beta": sp.beta, "case": sp.case, "samples": samples})
    upper_inside = float(parts[0].max())
    lower_outside = float(barrier.partials(outside)[0].min())
    parts_any = barrier.partials(anywhere)
    val, mag = _L_terms(fld, parts_any, anywhere)
    zeta = barrier.cutoff(anywhere)
    x1 = anywhere[:, 0]
    weight = x1 * x1 / (r * r * (r + a1) ** 2)
    active = (zeta > 0) & (np.abs(x1) > 1e-12)
    ratio = np.where(active, val / np.where(active, weight * zeta, 1.0), -np.inf)
    C_hat = max(0.0, float(ratio.max()))
    passive_bad = (zeta == 0) & (val > rtol * mag)
    values_all = parts_any[0]
    rep.measurements.update(
        max_inside_G_r=upper_inside, min_outside_G_2r=lower_outside,
        min_value=float(values_all.min()), lower_bound=barrier.lower_bound,
        C_hat=C_hat, passive_violations=int(passive_bad.sum()), m=sp.M3_or_m, M1=sp.M1, M2=sp.M2,
    )
    rep.check("nonnegative_outside_G_2r", lower_outside >= -rtol, tolerance=-rtol)
    rep.check("at_most_minus_2_inside_G_r", upper_inside <= -2 + rtol, tolerance=rtol)
    rep.check("bounded_below", float(values_all.min()) >= barrier.lower_bound - rtol, tolerance=rtol)
    rep.check("L_nonpositive_where_cutoff_vanishes", not passive_bad.any(), tolerance=rtol)
    return rep


# -- ring barrier -----------------------------------------------------------


def gamma_bound(a: float) -> float:
    """Uniform lower bound of the ring barrier on ``dG~(y, 2r)``."""
    return min((2**a - 3**a) / (1 - 3**a),
               (2 ** (a / 2) - 3 ** (a / 2)) / (1 - 3 ** (a / 2)),
               (6 ** (a / 2) - 3**a) / (2 ** (a / 2) - 3**a))


def _ring_case(a1: float, r: float) -> str:
    if a1 < r:
        return "I"
    if a1 >= 3 * r:
        return "II"
    if a1 < 2 * r:
        return "III"
    return "IV"


@dataclass(frozen=True)
class RingBarrier:
    spec: BarrierSpec
    gamma: float

    def function(self) -> SmoothFunction:
        base = power_barrier(self.spec.center, self.spec.alpha)
        return base.scaled(self.spec.M2, -self.spec.M1)

    def __call__(self, x):
        from .geometry import rho

        return self.spec.M2 * np.asarray(rho(x, self.spec.center)) ** self.spec.alpha - self.spec.M1


def ring_barrier(y, r: float, ell: EllipticityConstants | None = None, a: float | None = None) -> RingBarrier:
    """``Phi = M2 rho^a - M1`` with ``Phi = 0`` on ``dG~(y,3r)`` and ``1`` on ``dG~(y,r)``.

    ``M3_or_m`` holds the constant value of ``Phi`` on ``dG~(y, 2r)``.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    if a is None:
        a = alpha(ell)
    y = as_point(y)
    a1 = abs(y.x1)
    v_in, v_mid, v_out = (level_radius(a1, s) ** a for s in (r, 2 * r, 3 * r))
    M2 = 1.0 / (v_in - v_out)
    M1 = M2 * v_out
    M3 = M2 * v_mid - M1
    spec = BarrierSpec(a, tuple(y), r, _ring_case(a1, r), M1, M2, M3)
    return RingBarrier(spec, gamma_bound(a))


def verify_ring_barrier(fld: CoefficientField, ring: RingBarrier, samples: int = 10_000, seed: int = 0,
                        atol: float = 1e-10) -> ExperimentReport:
    """Boundary values ``(0, 1, >= gamma)`` on sampled level sets and ``L Phi >= 0`` in the ring."""
    sp = ring.spec
    y, r = sp.center, sp.radius
    a1 = abs(y[0])
    rng = np.random.default_rng(seed)
    l1, l2, l3 = (level_radius(a1, s) for s in (r, 2 * r, 3 * r))
    n = max(samples // 4, 1)
    on1 = ring(level_set_samples(y, l1, n, rng))
    on2 = ring(level_set_samples(y, l2, n, rng))
    on3 = ring(level_set_samples(y, l3, n, rng))
    inner = log_radial_samples(y, l1, l3, max(samples - 3 * n, 1), rng)
    pp = _power_partials(inner, np.asarray(y), sp.alpha)
    val, mag = _L_terms(fld, tuple(sp.M2 * q for q in pp), inner)
    normalized = val / np.where(mag > 0, mag, 1.0)
    rep = ExperimentReport(name="ring_barrier", seed=seed,
                           config={"field": fld.descriptor, "center": list(y), "radius": r, "alpha": sp.alpha,
                                   "case": sp.case, "samples": samples})
    rep.measurements.update(
        M1=sp.M1, M2=sp.M2, M3=sp.M3_or_m, gamma=ring.gamma,
        max_dev_outer=float(np.abs(on3).max()), max_dev_inner=float(np.abs(on1 - 1).max()),
        min_on_double=float(on2.min()), min_normalized_L=float(normalized.min()),
    )
    rep.check("zero_on_outer_level", float(np.abs(on3).max()) <= atol, tolerance=atol)
    rep.check("one_on_inner_level", float(np.abs(on1 - 1).max()) <= atol, tolerance=atol)
    rep.check("at_least_gamma_on_double_level", float(on2.min()) >= ring.gamma - atol, tolerance=atol)
    rep.check("L_Phi_nonnegative_in_ring", float(normalized.min()) >= -atol, tolerance=-atol)
    return rep

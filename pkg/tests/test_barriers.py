import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grushin_lab.barriers import (
    BarrierSpec, adversarial_field, alpha, gamma_bound, lemma41_barrier, lemma41_constants, level_set_samples,
    log_radial_samples, power_barrier, ring_barrier, rho_partials, smoothing, smoothing_exponent, tail_integral,
    verify_local_barrier, verify_ring_barrier, verify_subsolution,
)
from grushin_lab.fields import EllipticityConstants, make_field
from grushin_lab.geometry import QuasiBallSpec, contains, rho


def local_barrier_oracle(y1, r, a):
    """(M1, M2, m) from the case-by-case closed forms."""
    y1 = abs(y1)
    if y1 >= 2 * r:
        k = 1 - 2 ** (a / 2)
        return 2 * 2 ** (a / 2) / k, 2 / ((r * y1) ** (a / 2) * k), -2 / k * (2 ** (a / 2) - 2 ** (-a / 2))
    if y1 < r / 2:
        k = 1 - 2**a
        return 2 * 2**a / k, 2 / (r**a * k), -2 / k * (2**a - 2 ** (-a))
    if y1 < r:
        k = 1 - 2**a
        return 2 * 2**a / k, 2 / (r**a * k), -2 / k * (2**a - (y1 / (2 * r)) ** (a / 2))
    k = y1 ** (a / 2) - (4 * r) ** (a / 2)
    return (2 * 2**a * r ** (a / 2) / k, 2 / (r ** (a / 2) * k),
            2 * ((y1 / 2) ** (a / 2) - (4 * r) ** (a / 2)) / k)


def ring_oracle(y1, r, a):
    """(M1, M2, M3) of the four ring cases."""
    y1 = abs(y1)
    if y1 < r:
        return 3**a / (1 - 3**a), 1 / (r**a * (1 - 3**a)), (2**a - 3**a) / (1 - 3**a)
    if y1 >= 3 * r:
        k = 1 - 3 ** (a / 2)
        return 3 ** (a / 2) / k, 1 / ((r * y1) ** (a / 2) * k), (2 ** (a / 2) - 3 ** (a / 2)) / k
    q = (y1 / r) ** (a / 2)
    M1 = 3**a / (q - 3**a)
    M2 = 1 / ((r * y1) ** (a / 2) - (3 * r) ** a)
    if y1 < 2 * r:
        return M1, M2, (2**a - 3**a) / (q - 3**a)
    return M1, M2, ((2 * y1 / r) ** (a / 2) - 3**a) / (q - 3**a)


@pytest.mark.parametrize("lam, Lam, expected", [(1, 1, -1), (1, 2, -4), (1, 3, -7), (2, 4, -4)])
def test_alpha_examples(lam, Lam, expected):
    assert alpha(EllipticityConstants(lam, Lam)) == expected


def test_power_barrier_partials_match_finite_differences():
    y, a, h = (0.5, 0.0), -1.0, 1e-5
    phi = power_barrier(y, a)
    x = np.array([1.3, 0.7])
    v, d1, d2, d11, d12, d22 = phi.partials(x)
    e1, e2 = np.array([h, 0]), np.array([0, h])

    def fd(f, e):
        return (f(x + e) - f(x - e)) / (2 * h)

    assert fd(lambda p: phi.partials(p)[0], e1) == pytest.approx(d1, rel=1e-6)
    assert fd(lambda p: phi.partials(p)[0], e2) == pytest.approx(d2, rel=1e-6)
    assert fd(lambda p: phi.partials(p)[1], e1) == pytest.approx(d11, rel=1e-6)
    assert fd(lambda p: phi.partials(p)[1], e2) == pytest.approx(d12, rel=1e-6)
    assert fd(lambda p: phi.partials(p)[2], e1) == pytest.approx(d12, rel=1e-6)
    assert fd(lambda p: phi.partials(p)[2], e2) == pytest.approx(d22, rel=1e-6)
    assert v == pytest.approx(float(rho(x, y)) ** a, rel=1e-14)


def test_rho_x2_value_and_pole():
    assert rho_partials((0.0, 1.0), (0.0, 0.0))[2] == pytest.approx(2 * math.sqrt(2) ** -3, rel=1e-12)
    with pytest.raises(ValueError):
        power_barrier((1, 0), -1).partials((-1.0, 0.0))


@settings(max_examples=50)
@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(0, 3))
def test_barriers_are_even(x1, x2, y1):
    x, xr = np.array([x1, x2]), np.array([-x1, x2])
    if float(rho(x, (y1, 0))) < 1e-6:
        return
    phi = power_barrier((y1, 0), -2.5)
    assert phi.partials(x)[0] == phi.partials(xr)[0]
    b = lemma41_barrier((y1, 0), 1.0, EllipticityConstants(1, 2))
    assert b.partials(x)[0] == b.partials(xr)[0]
    assert b.cutoff(x) == b.cutoff(xr)
    ring = ring_barrier((y1, 0), 0.7, a=-1.0)
    assert ring(x) == ring(xr)


def test_level_set_samples_hit_prescribed_levels():
    rng = np.random.default_rng(0)
    pts = level_set_samples((1.5, 0.3), 0.8, 1000, rng)
    np.testing.assert_allclose(rho(pts, (1.5, 0.3)), 0.8, rtol=1e-12)
    assert (pts[:, 0] < 0).any() and (pts[:, 0] > 0).any()
    pts = log_radial_samples((0, 0), 1e-3, 1e2, 500, rng)
    p = np.asarray(rho(pts, (0, 0)))
    assert p.min() >= 1e-3 * (1 - 1e-12) and p.max() <= 1e2 * (1 + 1e-12)


@pytest.mark.parametrize("kind", ["identity", "rotating"])
@pytest.mark.parametrize("ratio", [1, 0.5, 0.25])
@pytest.mark.parametrize("y1", [0.0, 1.0, 3.0])
def test_subsolution_at_extremal_alpha(kind, ratio, y1):
    fld = make_field(kind, 1.0, 1.0 / ratio, seed=7)
    spec = BarrierSpec(alpha(fld.ell), (y1, 0.0), 1.0, "power", 1.0, 1.0, 0.0)
    rep = verify_subsolution(fld, spec, samples=3000, seed=1)
    assert rep.measurements["violations"] == 0 and rep.config["admissible_alpha"]


def test_subsolution_degenerate_alpha_zero():
    rep = verify_subsolution(make_field("identity"), BarrierSpec(0.0, (1.0, 0.0), 1.0, "power", 1, 1, 0), samples=500)
    assert rep.passed and rep.measurements["min_normalized_L"] == 0


def test_subsolution_fails_beyond_extremal_alpha():
    ell = EllipticityConstants(1, 2)
    fld = adversarial_field((1.0, 0.0), ell)
    bad = verify_subsolution(fld, BarrierSpec(-2.0, (1.0, 0.0), 1.0, "power", 1, 1, 0), samples=5000)
    assert not bad.passed and bad.measurements["violations"] > 0
    witness = np.array(bad.measurements["witness"])
    assert float(rho(witness, (1.0, 0.0))) > 0
    good = verify_subsolution(fld, BarrierSpec(-4.0, (1.0, 0.0), 1.0, "power", 1, 1, 0), samples=5000)
    assert good.passed


@pytest.mark.parametrize("a", [-1.0, -2.5, -4.0, -7.0])
@pytest.mark.parametrize("y1", [0.0, 0.3, 0.5, 0.8, 1.0, 1.5, 2.0, 2.5, 6.0])
def test_local_barrier_constants_match_case_formulas(a, y1):
    sp = lemma41_constants((y1, 0.0), 1.0, a)
    M1, M2, m = local_barrier_oracle(y1, 1.0, a)
    assert sp.M1 == pytest.approx(M1, rel=1e-12)
    assert sp.M2 == pytest.approx(M2, rel=1e-12)
    assert sp.M3_or_m == pytest.approx(m, rel=1e-12)
    assert min(sp.M1, sp.M2, sp.M3_or_m) > 0


def test_local_barrier_constant_examples():
    assert lemma41_constants((3.0, 0), 1.0, -1.0).M1 == pytest.approx(2 * 2**-0.5 / (1 - 2**-0.5), rel=1e-12)
    assert lemma41_constants((0.2, 0), 1.0, -1.0).M1 == pytest.approx(2.0, rel=1e-12)
    assert lemma41_constants((0.2, 0), 1.0, -1.0).case == "near"


def test_local_barrier_M2_sandwich_and_scaling():
    a = -4.0
    normalized = []
    for q in np.concatenate([[0.0], np.geomspace(1e-2, 1e2, 40)]):
        sp = lemma41_constants((q, 0), 1.0, a)
        normalized.append(sp.M2 * (1.0 + q) ** (a / 2))
        t = 2.7
        scaled = lemma41_constants((t * q, 0), t, a)
        assert scaled.M1 == pytest.approx(sp.M1, rel=1e-12)
        assert scaled.M3_or_m == pytest.approx(sp.M3_or_m, rel=1e-12)
        assert scaled.M2 == pytest.approx(sp.M2 * t ** (-a), rel=1e-12)
    normalized = np.array(normalized)
    assert normalized.min() > 0 and normalized.max() / normalized.min() < 10


@pytest.mark.parametrize("a, beta", [(-1.0, 3), (-2.0, 2), (-4.0, 2), (-7.0, 1)])
def test_smoothing_exponent(a, beta):
    assert smoothing_exponent(a) == beta
    assert 2 * beta > max(1, 1 - 4 / a) and not 2 * (beta - 1) > max(1, 1 - 4 / a)


def test_tail_integral_against_quadrature():
    from scipy.integrate import quad

    for beta in (1, 2, 3):
        val, _ = quad(lambda s: 1 / (1 + s ** (2 * beta)), 0, np.inf)
        assert tail_integral(beta) == pytest.approx(val, rel=1e-9)


@pytest.mark.parametrize("beta", [1, 2, 3])
def test_smoothing_is_C2_at_splice(beta):
    m, d = 1.7, 1e-5
    t0 = -m
    h = lambda t: float(smoothing(t, m, beta)[0])
    h1 = lambda t: float(smoothing(t, m, beta)[1])

    # second-order one-sided quotients from each side of the splice
    def left(f):
        return (3 * f(t0) - 4 * f(t0 - d) + f(t0 - 2 * d)) / (2 * d)

    def right(f):
        return (-3 * f(t0) + 4 * f(t0 + d) - f(t0 + 2 * d)) / (2 * d)

    assert abs(left(h) - right(h)) < 1e-8 and abs(left(h) - 1) < 1e-8
    assert abs(left(h1) - right(h1)) < 1e-8 and abs(right(h1)) < 1e-8
    for t in (-m - 0.3, -m - 2.0):
        _, d1, d2 = smoothing(t, m, beta)
        assert (h(t + d) - h(t - d)) / (2 * d) == pytest.approx(float(d1), rel=1e-6)
        assert (h1(t + d) - h1(t - d)) / (2 * d) == pytest.approx(float(d2), rel=1e-6)
    n, s = 2 * beta, -400.0
    _, d1, d2 = smoothing(t0 + s, m, beta)
    assert float(d1) == pytest.approx(1 / (1 + s**n), rel=1e-12)
    assert float(d2) == pytest.approx(-n * s ** (n - 1) / (1 + s**n) ** 2, rel=1e-12)
    assert float(smoothing(-1e300, m, beta)[0]) == pytest.approx(-(m + tail_integral(beta)), rel=1e-12)


@pytest.mark.parametrize("y1", [0.0, 0.7, 1.5, 4.0])
def test_cutoff_invariants(y1):
    b = lemma41_barrier((y1, 0.0), 1.0, EllipticityConstants(1, 2))
    rng = np.random.default_rng(2)
    pts = log_radial_samples((y1, 0.0), 1e-3, 10.0, 5000, rng)
    z = b.cutoff(pts)
    assert z.min() >= 0 and z.max() <= 1
    inner = contains(QuasiBallSpec((y1, 0.0), 0.5, "G_tilde"), pts) | contains(QuasiBallSpec((-y1, 0.0), 0.5, "G_tilde"), pts)
    outer = contains(QuasiBallSpec((y1, 0.0), 2 / 3, "G_tilde"), pts) | contains(QuasiBallSpec((-y1, 0.0), 2 / 3, "G_tilde"), pts)
    assert np.all(z[inner] == 1) and np.all(z[~outer] == 0)


@pytest.mark.parametrize("kind", ["identity", "rotating", "checkerboard"])
@pytest.mark.parametrize("y1", [0.0, 0.6, 1.2, 2.5])
def test_local_barrier_properties(kind, y1):
    fld = make_field(kind, 1.0, 2.0, seed=3) if kind != "identity" else make_field(kind)
    b = lemma41_barrier((y1, 0.0), 1.0, fld.ell)
    rep = verify_local_barrier(fld, b, samples=3000, seed=4)
    assert rep.passed, rep.verdicts
    assert 0 < rep.measurements["C_hat"] < np.inf


def test_gamma_at_minus_one():
    forms = [(2**-1 - 3**-1) / (1 - 3**-1),
             (2**-0.5 - 3**-0.5) / (1 - 3**-0.5),
             (6**-0.5 - 3**-1) / (2**-0.5 - 3**-1)]
    assert forms[0] == pytest.approx(0.25)
    assert gamma_bound(-1.0) == pytest.approx(min(forms), abs=1e-15)
    assert abs(gamma_bound(-1.0) - 0.200428) < 1e-6


def test_gamma_positive_and_decreasing_in_ratio():
    ratios = np.linspace(1, 10, 200)
    g = np.array([gamma_bound(2 - 3 * k) for k in ratios])
    assert np.all(g > 0) and np.all(np.diff(g) < 0)


@pytest.mark.parametrize("y1", [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 7.0])
@pytest.mark.parametrize("a", [-1.0, -4.0])
def test_ring_constants_match_case_formulas(y1, a):
    ring = ring_barrier((y1, 0.0), 1.0, a=a)
    M1, M2, M3 = ring_oracle(y1, 1.0, a)
    assert ring.spec.M1 == pytest.approx(M1, rel=1e-12)
    assert ring.spec.M2 == pytest.approx(M2, rel=1e-12)
    assert ring.spec.M3_or_m == pytest.approx(M3, rel=1e-12)
    assert ring.spec.M3_or_m >= ring.gamma * (1 - 1e-12)
    t = 0.4
    scaled = ring_barrier((t * y1, 0.0), t, a=a)
    assert scaled.spec.M1 == pytest.approx(ring.spec.M1, rel=1e-12)
    assert scaled.spec.M3_or_m == pytest.approx(ring.spec.M3_or_m, rel=1e-12)


def test_ring_case_one_example():
    ring = ring_barrier((0.5, 0.0), 1.0, EllipticityConstants(1, 1))
    assert ring.spec.case == "I" and ring.spec.M1 == pytest.approx(0.5, rel=1e-14)


@pytest.mark.parametrize("kind", ["identity", "rotating", "random_smooth"])
@pytest.mark.parametrize("y1", [0.0, 1.5, 2.5, 4.0])
def test_ring_barrier_verified(kind, y1):
    fld = make_field(kind, 1.0, 2.0, seed=1) if kind != "identity" else make_field(kind)
    rep = verify_ring_barrier(fld, ring_barrier((y1, 0.0), 1.0, fld.ell), samples=4000, seed=2)
    assert rep.passed, rep.measurements

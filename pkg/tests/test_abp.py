import numpy as np
import pytest
from scipy.optimize import linprog

from grushin_lab.abp import (
    classical_abp_check, convex_envelope, discrete_hessian, discrete_horizontal_hessian, is_discretely_convex,
    monge_ampere_mass, monge_ampere_measure, weighted_abp_check, wmp_check,
)
from grushin_lab.fields import Grid, GridFunction, make_field, solve_dirichlet


def random_function(grid, rng):
    X1, X2 = grid.mesh()
    base = -np.exp(-((X1 - rng.uniform(-.5, .5)) ** 2 + (X2 - rng.uniform(-.5, .5)) ** 2) / rng.uniform(.1, .5))
    return GridFunction(grid, base + 0.3 * rng.standard_normal(grid.shape))


def lp_envelope(grid, g):
    """Largest convex minorant at each node, one linear program per node."""
    X1, X2 = grid.mesh()
    d = np.hypot(grid.x1_range[1] - grid.x1_range[0], grid.x2_range[1] - grid.x2_range[0])
    c1, c2 = np.mean(grid.x1_range), np.mean(grid.x2_range)
    corners = [(c1 + s1 * 2 * d, c2 + s2 * 2 * d) for s1 in (-1, 1) for s2 in (-1, 1)]
    P = np.vstack([np.column_stack([X1.ravel(), X2.ravel()]), corners])
    vals = np.concatenate([g.ravel(), np.zeros(4)])
    A = np.vstack([P.T, np.ones(len(P))])
    out = np.empty(g.size)
    for k, (a, b) in enumerate(P[:-4]):
        res = linprog(vals, A_eq=A, b_eq=[a, b, 1.0], bounds=(0, None), method="highs")
        out[k] = res.fun
    return out.reshape(g.shape)


def test_envelope_matches_lp_oracle():
    rng = np.random.default_rng(1)
    grid = Grid((-1, 1), (-0.5, 1.5), 11, 9)
    u = random_function(grid, rng)
    env = convex_envelope(u)
    oracle = lp_envelope(grid, np.minimum(u.values, 0))
    assert np.abs(env.envelope.values - oracle).max() < 1e-9


def test_envelope_idempotent_monotone_convex():
    rng = np.random.default_rng(7)
    grid = Grid.square(1.0, 33)
    for _ in range(10):
        u = random_function(grid, rng)
        v = GridFunction(grid, u.values + np.abs(rng.standard_normal(grid.shape)) * 0.2)
        eu, ev = convex_envelope(u), convex_envelope(v)
        again = convex_envelope(eu.envelope)
        assert np.abs(again.envelope.values - eu.envelope.values).max() < 1e-12
        assert again.contact.all()
        assert np.all(eu.envelope.values <= ev.envelope.values + 1e-12)
        assert np.all(eu.envelope.values <= eu.source.values + 1e-12)
        assert is_discretely_convex(eu.envelope.values, tol=1e-12)
        assert eu.contact.any()


def test_envelope_trivial_cases():
    grid = Grid.square(1.0, 17)
    X1, X2 = grid.mesh()
    pos = convex_envelope(GridFunction(grid, 1 + X1**2))
    assert np.all(pos.envelope.values == 0) and pos.contact.all()
    bowl = GridFunction(grid, 0.01 * (X1**2 + X2**2) - 1)
    e = convex_envelope(bowl)
    assert np.abs(e.envelope.values - bowl.values).max() < 1e-12 and e.contact.all()
    with pytest.raises(ValueError):
        convex_envelope(GridFunction(grid, np.full(grid.shape, np.nan)))


def test_envelope_respects_domain_extension_by_zero():
    grid = Grid.square(1.0, 21)
    X1, X2 = grid.mesh()
    dom = X1**2 + X2**2 < 0.5
    env = convex_envelope(GridFunction(grid, -np.ones(grid.shape)), dom)
    assert np.all(env.source.values[~dom] == 0)
    assert env.envelope.values.min() == pytest.approx(-1.0)


def test_envelope_csv(tmp_path):
    grid = Grid.square(1.0, 5)
    convex_envelope(GridFunction(grid, -np.ones(grid.shape))).to_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "x1,x2,u,envelope,contact"


@pytest.mark.parametrize("expr, mass", [
    (lambda x1, x2: 0.5 * (x1**2 + x2**2), 4.0),
    (lambda x1, x2: 0.5 * (2 * x1**2 + x2**2), 8.0),
    (lambda x1, x2: 3 * x1 - x2 + 2, 0.0),
])
def test_monge_ampere_mass(expr, mass):
    grid = Grid.square(1.0, 41)
    u = GridFunction(grid, grid.sample(expr))
    assert monge_ampere_mass(u) == pytest.approx(mass, rel=1e-8, abs=1e-10)
    rec = monge_ampere_measure(u)
    assert rec.det.min() >= 0 and rec.mass == pytest.approx(mass, rel=1e-8, abs=1e-10)


def cubic(x1, x2):
    return x1**3 - 2 * x1 * x2**2 + 0.5 * x1**2 * x2 + x2**3 - x1 * x2


def cubic_hessian(x1, x2):
    return 6 * x1 + x2, -4 * x2 + x1 - 1, -4 * x1 + 6 * x2


def test_discrete_hessian_exact_on_cubics():
    grid = Grid((0.2, 1.7), (-1, 0.5), 13, 11)
    X1, X2 = grid.mesh()
    u11, u12, u22 = discrete_hessian(GridFunction(grid, cubic(X1, X2)))
    e11, e12, e22 = cubic_hessian(X1, X2)
    for a, b in ((u11, e11), (u12, e12), (u22, e22)):
        np.testing.assert_allclose(a, b, atol=1e-9)
    h11, h12, h22 = discrete_horizontal_hessian(GridFunction(grid, cubic(X1, X2)))
    np.testing.assert_allclose(h11 * h22 - h12**2, X1**2 * (e11 * e22 - e12**2), atol=1e-8)
    with pytest.raises(ValueError):
        discrete_hessian(GridFunction(Grid.square(1, 3), np.zeros((3, 3))))


def weighted_run(n, fld):
    grid = Grid.square(1.0, n)
    u = solve_dirichlet(grid, fld, 0.0, lambda x1, x2: x1 * x1)
    return weighted_abp_check(u, 1.0, fld)


@pytest.mark.parametrize("kind", ["identity", "rotating"])
def test_weighted_abp_constant_stable_under_refinement(kind):
    fld = make_field(kind, 1, 2, seed=2) if kind != "identity" else make_field(kind)
    reps = [weighted_run(n, fld) for n in (33, 65, 129)]
    Cs = [r.measurements["realized_C"] for r in reps]
    assert all(r.passed for r in reps)
    assert max(Cs) / min(Cs) <= 2


def test_weighted_abp_trivial_and_rejected():
    fld = make_field("identity")
    grid = Grid.square(1.0, 17)
    X1, X2 = grid.mesh()
    pos = weighted_abp_check(GridFunction(grid, np.ones(grid.shape)), 0.0, fld)
    assert pos.passed and pos.measurements["realized_C"] == 0
    bump = GridFunction(grid, -np.cos(np.pi * X1 / 2) * np.cos(np.pi * X2 / 2))
    bad = weighted_abp_check(bump, -10.0, fld)
    assert bad.rejected is not None and not bad.passed


def test_weighted_abp_reflection():
    fld = make_field("rotating", 1, 2, seed=5)
    grid = Grid((-0.5, 1.5), (-1, 1), 41, 41)
    mirror = Grid((-1.5, 0.5), (-1, 1), 41, 41)
    u = solve_dirichlet(grid, fld, 0.0, lambda x1, x2: x1 * x1)
    v = solve_dirichlet(mirror, fld.reflected(), 0.0, lambda x1, x2: x1 * x1)
    np.testing.assert_allclose(v.values[:, ::-1], u.values, rtol=1e-12, atol=1e-14)
    a = weighted_abp_check(u, 1.0, fld).measurements["realized_C"]
    b = weighted_abp_check(v, 1.0, fld.reflected()).measurements["realized_C"]
    assert a == pytest.approx(b, rel=1e-10)


def test_classical_abp_scaling_and_trivial():
    grid = Grid.square(1.0, 33)
    X1, X2 = grid.mesh()
    disk = X1**2 + X2**2 < 1
    well = np.where(disk, X1**2 + X2**2 - 1, 0.0)
    c1 = classical_abp_check(GridFunction(grid, well), disk).measurements["realized_c"]
    c2 = classical_abp_check(GridFunction(grid, 2 * well), disk).measurements["realized_c"]
    assert c1 > 0 and c2 == pytest.approx(c1, rel=1e-9)
    triv = classical_abp_check(GridFunction(grid, 1 + X1**2), disk)
    assert triv.passed
    neg = classical_abp_check(GridFunction(grid, -np.ones(grid.shape)), disk)
    assert neg.rejected is not None


def test_weak_maximum_principle_check():
    fld = make_field("checkerboard", 1, 2, seed=1)
    grid = Grid.square(1.0, 33, center=(0.8, 0.0))
    u = solve_dirichlet(grid, fld, lambda x1, x2: np.sin(x2) + x1)
    assert wmp_check(u, u, fld).passed
    assert wmp_check(u, GridFunction(grid, u.values + 1), fld).passed
    low = wmp_check(u, GridFunction(grid, u.values - 1), fld)
    assert low.rejected is not None

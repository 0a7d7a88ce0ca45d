"""The operator ``L = a11 X1^2 + 2 a12 X2 X1 + a22 X2^2`` and its discretization.

Coefficient fields are evaluated pointwise (nondivergence form); on grids the
operator uses centered second differences and a centered 4-point cross
stencil, with the explicit ``x1`` weights of the horizontal Hessian.  The
Dirichlet solver is a direct sparse factorization.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla
import sympy

from .report import ExperimentReport

logger = logging.getLogger(__name__)

Evaluator = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


class SolverError(RuntimeError):
    """Raised when the discrete Dirichlet problem cannot be solved reliably."""


class EllipticityError(ValueError):
    """Raised when a coefficient field violates its declared ellipticity bounds."""


# -- coefficient fields -----------------------------------------------------


@dataclass(frozen=True)
class EllipticityConstants:
    lam: float
    Lam: float

    def __post_init__(self):
        if not (self.lam > 0 and self.Lam >= self.lam):
            raise ValueError(f"need 0 < lambda <= Lambda, got ({self.lam}, {self.Lam})")

    @property
    def ratio(self) -> float:
        return self.Lam / self.lam


@dataclass(frozen=True)
class CoefficientField:
    """Symmetric coefficient matrix ``(a11, a12, a22)`` as a function of the point.

    ``descriptor`` records the generator, its parameters, the seed and any
    coordinate change applied afterwards, so that :func:`field_from_descriptor`
    rebuilds an identical field in another process.
    """

    evaluator: Evaluator
    ell: EllipticityConstants
    descriptor: dict[str, Any] = field(default_factory=dict)

    def __call__(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        shape = np.broadcast_shapes(x1.shape, x2.shape)
        return tuple(np.broadcast_to(np.asarray(a, dtype=float), shape) for a in self.evaluator(x1, x2))

    def at(self, x):
        x = np.asarray(x, dtype=float)
        return self(x[..., 0], x[..., 1])

    def pullback(self, s1: float, c1: float, s2: float, c2: float) -> "CoefficientField":
        """Coefficients composed with the diagonal affine map ``x -> (s1 x1 + c1, s2 x2 + c2)``."""
        inner = self.evaluator

        def ev(x1, x2):
            return inner(s1 * np.asarray(x1) + c1, s2 * np.asarray(x2) + c2)

        maps = list(self.descriptor.get("pullbacks", [])) + [[s1, c1, s2, c2]]
        return CoefficientField(ev, self.ell, {**self.descriptor, "pullbacks": maps})

    def reflected(self) -> "CoefficientField":
        return self.pullback(-1.0, 0.0, 1.0, 0.0)


def _rotated(theta, mu1, mu2):
    c, s = np.cos(theta), np.sin(theta)
    return (mu1 * c * c + mu2 * s * s, (mu1 - mu2) * c * s, mu1 * s * s + mu2 * c * c)


def _symmetric_eigs(a11, a12, a22):
    mean = 0.5 * (a11 + a22)
    rad = np.hypot(0.5 * (a11 - a22), a12)
    return mean - rad, mean + rad


FIELD_KINDS = ("identity", "constant", "rotating", "checkerboard", "random_smooth")


def make_field(kind: str, lam: float = 1.0, Lam: float = 1.0, seed: int = 0, **params) -> CoefficientField:
    """Build one of the experiment families of coefficient fields.

    Parameters
    ----------
    kind : {'identity', 'constant', 'rotating', 'checkerboard', 'random_smooth'}
    lam, Lam : float
        Declared ellipticity constants.  Ignored for ``identity``; for
        ``constant`` they default to the true eigenvalues of the matrix.
    seed : int
        Drives phases/offsets; the field is a deterministic function of
        ``(kind, lam, Lam, seed, params)``.
    **params
        ``constant``: ``a11, a12, a22``; without them a seeded rotation of
        ``diag(lam, Lam)`` is used.
        ``rotating``: ``max_angle`` (default pi/8), ``wavenumber`` (default 1).
        ``checkerboard``: ``cell`` (default 0.5).
        ``random_smooth``: ``modes`` (default 3), ``max_angle`` (default pi/8).
    """
    rng = np.random.default_rng(seed)
    desc = {"kind": kind, "lam": lam, "Lam": Lam, "seed": seed, "params": dict(params)}
    if kind == "identity":
        desc.update(lam=1.0, Lam=1.0)
        return CoefficientField(lambda x1, x2: (1.0, 0.0, 1.0), EllipticityConstants(1.0, 1.0), desc)

    if kind == "constant":
        if {"a11", "a12", "a22"} <= params.keys():
            a11, a12, a22 = (float(params[k]) for k in ("a11", "a12", "a22"))
        else:
            # seeded rotation of diag(lam, Lam)
            a11, a12, a22 = (float(v) for v in _rotated(rng.uniform(0, math.pi), lam, Lam))
        lo, hi = (float(v) for v in _symmetric_eigs(a11, a12, a22))
        if lo <= 0:
            raise ValueError("constant coefficient matrix must be positive definite")
        if (lam, Lam) == (1.0, 1.0):
            lam, Lam = lo, hi
        if lam > lo * (1 + 1e-12) or Lam < hi * (1 - 1e-12):
            raise ValueError(f"eigenvalues ({lo}, {hi}) are outside the declared bounds ({lam}, {Lam})")
        desc.update(lam=lam, Lam=Lam)
        return CoefficientField(lambda x1, x2: (a11, a12, a22), EllipticityConstants(lam, Lam), desc)

    ell = EllipticityConstants(lam, Lam)
    if kind == "rotating":
        cap = float(params.get("max_angle", math.pi / 8))
        k = float(params.get("wavenumber", 1.0))
        p1, p2 = rng.uniform(0, 2 * math.pi, size=2)

        def ev(x1, x2):
            theta = cap * np.sin(k * x1 + p1) * np.cos(k * x2 + p2)
            return _rotated(theta, lam, Lam)

        return CoefficientField(ev, ell, desc)

    if kind == "checkerboard":
        cell = float(params.get("cell", 0.5))
        o1, o2 = rng.uniform(0, cell, size=2)

        def ev(x1, x2):
            parity = (np.floor((x1 - o1) / cell) + np.floor((x2 - o2) / cell)) % 2
            even = parity == 0
            return np.where(even, lam, Lam), 0.0, np.where(even, Lam, lam)

        return CoefficientField(ev, ell, desc)

    if kind == "random_smooth":
        modes = int(params.get("modes", 3))
        cap = float(params.get("max_angle", math.pi / 8))
        kx = rng.normal(size=(3, modes))
        ky = rng.normal(size=(3, modes))
        ph = rng.uniform(0, 2 * math.pi, size=(3, modes))

        def wave(i, x1, x2):
            acc = 0.0
            for m in range(modes):
                acc = acc + np.sin(kx[i, m] * x1 + ky[i, m] * x2 + ph[i, m])
            return acc / modes

        def ev(x1, x2):
            mu1 = lam + (Lam - lam) * 0.5 * (1 + wave(0, x1, x2))
            mu2 = lam + (Lam - lam) * 0.5 * (1 + wave(1, x1, x2))
            return _rotated(cap * wave(2, x1, x2), mu1, mu2)

        return CoefficientField(ev, ell, desc)

    raise ValueError(f"unknown field kind {kind!r}; expected one of {FIELD_KINDS}")


def field_from_descriptor(desc: dict[str, Any]) -> CoefficientField:
    """Rebuild a field (including recorded pullbacks) from its descriptor."""
    f = make_field(desc["kind"], desc.get("lam", 1.0), desc.get("Lam", 1.0), desc.get("seed", 0),
                   **desc.get("params", {}))
    for s1, c1, s2, c2 in desc.get("pullbacks", []):
        f = f.pullback(s1, c1, s2, c2)
    return f


def check_ellipticity(fld: CoefficientField, points, rtol: float = 1e-12) -> ExperimentReport:
    """Verify that the eigenvalues at every sample point lie in ``[lam, Lam]``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    a11, a12, a22 = fld.at(pts)
    lo, hi = _symmetric_eigs(a11, a12, a22)
    lam, Lam = fld.ell.lam, fld.ell.Lam
    low_margin = lo - lam
    high_margin = Lam - hi
    bad = (low_margin < -rtol * Lam) | (high_margin < -rtol * Lam)
    rep = ExperimentReport(name="ellipticity", config={"field": fld.descriptor, "samples": len(pts)})
    rep.measurements.update(
        worst_lower_margin=float(low_margin.min()),
        worst_upper_margin=float(high_margin.min()),
        violations=int(bad.sum()),
    )
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        rep.measurements["witness"] = pts[i].tolist()
    rep.check("eigenvalues_within_bounds", not bad.any(), tolerance=rtol)
    return rep


def require_ellipticity(fld: CoefficientField, points) -> CoefficientField:
    rep = check_ellipticity(fld, points)
    if not rep.passed:
        raise EllipticityError(f"field {fld.descriptor} rejected: {rep.measurements}")
    return fld


# -- smooth functions -------------------------------------------------------

_ORDERS = ("value", "d1", "d2", "d11", "d12", "d22")


@dataclass(frozen=True)
class SmoothFunction:
    """A function with its first and second partials as vectorized evaluators."""

    value: Callable
    d1: Callable
    d2: Callable
    d11: Callable
    d12: Callable
    d22: Callable

    @classmethod
    def from_expr(cls, expr: str | sympy.Expr) -> "SmoothFunction":
        """Symbolic construction, e.g. ``SmoothFunction.from_expr("sin(x1)*cos(x2)")``."""
        x1, x2 = sympy.symbols("x1 x2", real=True)
        e = sympy.sympify(expr, locals={"x1": x1, "x2": x2})
        exprs = [e, e.diff(x1), e.diff(x2), e.diff(x1, 2), e.diff(x1, x2), e.diff(x2, 2)]
        funcs = []
        for ex in exprs:
            f = sympy.lambdify((x1, x2), ex, modules="numpy")
            funcs.append(lambda a, b, f=f: np.asarray(f(a, b), dtype=float) + 0.0 * np.asarray(a) * np.asarray(b))
        return cls(*funcs)

    def partials(self, x):
        x = np.asarray(x, dtype=float)
        a, b = x[..., 0], x[..., 1]
        return tuple(getattr(self, k)(a, b) for k in _ORDERS)

    def pullback(self, s1: float, c1: float, s2: float, c2: float) -> "SmoothFunction":
        """``u o A`` for ``A(x) = (s1 x1 + c1, s2 x2 + c2)`` with chain-rule partials."""
        base = self

        def comp(name, k):
            f = getattr(base, name)
            return lambda a, b: k * f(s1 * np.asarray(a) + c1, s2 * np.asarray(b) + c2)

        return SmoothFunction(comp("value", 1.0), comp("d1", s1), comp("d2", s2),
                              comp("d11", s1 * s1), comp("d12", s1 * s2), comp("d22", s2 * s2))

    def scaled(self, k: float, shift: float = 0.0) -> "SmoothFunction":
        def sc(name, kk, add=0.0):
            f = getattr(self, name)
            return lambda a, b: kk * f(a, b) + add

        return SmoothFunction(sc("value", k, shift), sc("d1", k), sc("d2", k), sc("d11", k), sc("d12", k), sc("d22", k))


def horizontal_hessian(u: SmoothFunction, x):
    """``X^2 u = [[u11, x1 u12], [x1 u12, x1^2 u22]]``, shape ``(..., 2, 2)``."""
    x = np.asarray(x, dtype=float)
    x1 = x[..., 0]
    _, _, _, u11, u12, u22 = u.partials(x)
    m = np.empty(np.shape(x1) + (2, 2))
    m[..., 0, 0] = u11
    m[..., 0, 1] = m[..., 1, 0] = x1 * u12
    m[..., 1, 1] = x1 * x1 * u22
    return m


def apply_L(fld: CoefficientField, u: SmoothFunction, x):
    """Pointwise ``Lu(x) = a11 u11 + 2 a12 x1 u12 + a22 x1^2 u22``."""
    x = np.asarray(x, dtype=float)
    x1 = x[..., 0]
    a11, a12, a22 = fld.at(x)
    _, _, _, u11, u12, u22 = u.partials(x)
    out = a11 * u11 + 2.0 * a12 * x1 * u12 + a22 * x1 * x1 * u22
    return float(out) if np.ndim(out) == 0 else out


# -- grids ------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular lattice; node arrays have shape ``(n2, n1)``."""

    x1_range: tuple[float, float]
    x2_range: tuple[float, float]
    n1: int
    n2: int

    def __post_init__(self):
        if self.n1 < 3 or self.n2 < 3:
            raise ValueError("grid needs at least 3 nodes per direction")
        if not (self.x1_range[1] > self.x1_range[0] and self.x2_range[1] > self.x2_range[0]):
            raise ValueError("grid ranges must be increasing")
        object.__setattr__(self, "x1_range", tuple(float(v) for v in self.x1_range))
        object.__setattr__(self, "x2_range", tuple(float(v) for v in self.x2_range))

    @classmethod
    def square(cls, half: float, n: int, center=(0.0, 0.0)) -> "Grid":
        c1, c2 = center
        return cls((c1 - half, c1 + half), (c2 - half, c2 + half), n, n)

    @property
    def h1(self) -> float:
        return (self.x1_range[1] - self.x1_range[0]) / (self.n1 - 1)

    @property
    def h2(self) -> float:
        return (self.x2_range[1] - self.x2_range[0]) / (self.n2 - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n2, self.n1)

    @property
    def size(self) -> int:
        return self.n1 * self.n2

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        return np.linspace(*self.x1_range, self.n1), np.linspace(*self.x2_range, self.n2)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        a1, a2 = self.axes()
        return np.meshgrid(a1, a2)

    def points(self) -> np.ndarray:
        X1, X2 = self.mesh()
        return np.stack([X1, X2], axis=-1)

    def edge_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
        return m

    def cell_weights(self) -> np.ndarray:
        """Trapezoidal dual-cell areas (sum to the rectangle area)."""
        w1 = np.full(self.n1, self.h1)
        w1[[0, -1]] *= 0.5
        w2 = np.full(self.n2, self.h2)
        w2[[0, -1]] *= 0.5
        return np.outer(w2, w1)

    def sample(self, data) -> np.ndarray:
        """Turn a scalar, callable ``f(x1, x2)``, array or :class:`GridFunction` into node values."""
        if isinstance(data, GridFunction):
            return np.asarray(data.values, dtype=float)
        if callable(data):
            X1, X2 = self.mesh()
            return np.broadcast_to(np.asarray(data(X1, X2), dtype=float), self.shape).copy()
        arr = np.asarray(data, dtype=float)
        return np.broadcast_to(arr, self.shape).copy()


@dataclass
class GridFunction:
    grid: Grid
    values: np.ndarray
    mask: np.ndarray | None = None
    info: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if self.mask is None:
            self.mask = ~self.grid.edge_mask()
        self.mask = np.asarray(self.mask, dtype=bool).reshape(self.grid.shape)

    def to_csv(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        """Write ``x1,x2,value[,extra...]``, rows ordered by x2 then x1."""
        X1, X2 = self.grid.mesh()
        cols = {"x1": X1.ravel(), "x2": X2.ravel(), "value": self.values.ravel()}
        for k, v in (extra or {}).items():
            cols[k] = np.asarray(v).reshape(self.grid.shape).ravel()
        write_columns_csv(path, cols)

    @classmethod
    def from_csv(cls, path) -> "GridFunction":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        x1 = np.array([float(r["x1"]) for r in rows])
        x2 = np.array([float(r["x2"]) for r in rows])
        v = np.array([float(r["value"]) for r in rows])
        a1, a2 = np.unique(x1), np.unique(x2)
        grid = Grid((a1[0], a1[-1]), (a2[0], a2[-1]), a1.size, a2.size)
        return cls(grid, v.reshape(grid.shape))


def write_columns_csv(path, cols: dict[str, np.ndarray]) -> None:
    keys = list(cols)
    n = len(next(iter(cols.values())))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for i in range(n):
            w.writerow([_fmt(cols[k][i]) for k in keys])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return repr(float(v))


# -- discretization ---------------------------------------------------------


@dataclass
class DiscreteOperator:
    """Full-grid matrix of the discrete operator; edge rows are empty."""

    grid: Grid
    matrix: sps.csr_matrix
    diagnostics: dict[str, Any]

    def apply(self, values) -> np.ndarray:
        out = self.matrix @ np.asarray(values, dtype=float).ravel()
        out = out.reshape(self.grid.shape)
        out[self.grid.edge_mask()] = np.nan
        return out


_OFFSETS = {
    "C": (0, 0), "E": (0, 1), "W": (0, -1), "N": (1, 0), "S": (-1, 0),
    "NE": (1, 1), "NW": (1, -1), "SE": (-1, 1), "SW": (-1, -1),
}


def stencil_weights(grid: Grid, fld: CoefficientField, cross: str = "centered") -> dict[str, np.ndarray]:
    """Per-node stencil weights of ``L`` at interior nodes, keyed by compass offset.

    ``cross='centered'`` uses ``(u_NE - u_NW - u_SE + u_SW) / (4 h1 h2)`` for
    ``u12``.  ``cross='monotone'`` switches to the one-sided 7-point form
    wherever that keeps every off-diagonal weight nonnegative, and falls back
    to the centered form elsewhere.
    """
    X1, X2 = grid.mesh()
    a11, a12, a22 = fld(X1, X2)
    h1, h2 = grid.h1, grid.h2
    ex = a11 / h1**2
    ny = a22 * X1**2 / h2**2
    b = a12 * X1 / (h1 * h2)  # 2 a12 x1 / (2 h1 h2)
    zero = np.zeros(grid.shape)
    w = {
        "C": -2 * ex - 2 * ny, "E": ex.copy(), "W": ex.copy(), "N": ny.copy(), "S": ny.copy(),
        "NE": b / 2, "SW": b / 2, "NW": -b / 2, "SE": -b / 2,
    }
    if cross == "monotone":
        ok = (ex >= np.abs(b)) & (ny >= np.abs(b))
        pos = ok & (b > 0)
        neg = ok & (b < 0)
        ab = np.abs(b)
        for k in ("E", "W", "N", "S"):
            w[k] = np.where(ok, w[k] - ab, w[k])
        w["C"] = np.where(ok, w["C"] + 2 * ab, w["C"])
        w["NE"] = np.where(pos, ab, np.where(ok, zero, w["NE"]))
        w["SW"] = np.where(pos, ab, np.where(ok, zero, w["SW"]))
        w["NW"] = np.where(neg, ab, np.where(ok, zero, w["NW"]))
        w["SE"] = np.where(neg, ab, np.where(ok, zero, w["SE"]))
    elif cross != "centered":
        raise ValueError(f"unknown cross stencil {cross!r}")
    return w


def discretize_L(grid: Grid, fld: CoefficientField, cross: str = "centered") -> DiscreteOperator:
    """Assemble the sparse matrix of the discrete ``L`` on all interior nodes.

    Rows for edge nodes are left empty.  Diagnostics record rows that are not
    weakly diagonally dominant or carry a negative off-diagonal weight, i.e.
    rows where the discrete maximum principle is not guaranteed.
    """
    w = stencil_weights(grid, fld, cross)
    n2, n1 = grid.shape
    idx = np.arange(grid.size).reshape(grid.shape)
    inner = (slice(1, -1), slice(1, -1))
    rows, cols, vals = [], [], []
    for key, (dj, di) in _OFFSETS.items():
        rows.append(idx[inner].ravel())
        cols.append(idx[1 + dj:n2 - 1 + dj, 1 + di:n1 - 1 + di].ravel())
        vals.append(w[key][inner].ravel())
    A = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(grid.size, grid.size))

    diag = np.abs(w["C"][inner])
    off = sum(np.abs(w[k][inner]) for k in _OFFSETS if k != "C")
    neg = np.zeros_like(diag, dtype=bool)
    for k in _OFFSETS:
        if k != "C":
            neg |= w[k][inner] < -1e-14 * diag
    dominance = off / diag
    flagged = neg | (dominance > 1 + 1e-12)
    diagnostics = {
        "cross_stencil": cross,
        "rows": int(diag.size),
        "flagged_rows": int(flagged.sum()),
        "negative_offdiag_rows": int(neg.sum()),
        "max_offdiag_to_diag": float(dominance.max()),
        "monotone": bool(not flagged.any()),
    }
    return DiscreteOperator(grid, A, diagnostics)


def solve_dirichlet(grid: Grid, fld: CoefficientField, boundary, rhs=0.0, domain=None,
                    cross: str = "centered", rtol: float = 1e-10) -> GridFunction:
    """Solve ``L u = rhs`` on the masked domain with Dirichlet data elsewhere.

    Parameters
    ----------
    boundary : scalar, callable, array or GridFunction
        Values imposed on every node outside the unknown set (only nodes
        adjacent to the unknowns actually enter the equations).
    rhs : scalar, callable, array or GridFunction
    domain : bool array, optional
        Nodes where the equation is imposed.  Edge nodes of the rectangle are
        always excluded.  Defaults to the full interior.

    Returns
    -------
    GridFunction
        Solution on the unknowns, boundary data elsewhere; ``mask`` marks the
        unknowns.  Residual diagnostics are attached as ``.info``.
    """
    op = discretize_L(grid, fld, cross)
    g = grid.sample(boundary)
    f = grid.sample(rhs)
    unknown = ~grid.edge_mask() if domain is None else (np.asarray(domain, dtype=bool) & ~grid.edge_mask())
    U = np.flatnonzero(unknown.ravel())
    K = np.flatnonzero(~unknown.ravel())
    if U.size == 0:
        return GridFunction(grid, g, unknown, {"unknowns": 0, "residual": 0.0, **op.diagnostics})
    if not (np.all(np.isfinite(g.ravel()[K])) and np.all(np.isfinite(f.ravel()[U]))):
        raise SolverError("boundary data and right-hand side must be finite")

    A = op.matrix
    A_UU = A[U][:, U].tocsc()
    b = f.ravel()[U] - A[U][:, K] @ g.ravel()[K]
    try:
        lu = spla.splu(A_UU)
    except RuntimeError as exc:
        raise SolverError(f"singular discrete system: {exc}") from exc
    x = lu.solve(b)
    r = b - A_UU @ x
    x = x + lu.solve(r)  # one step of iterative refinement
    r = b - A_UU @ x

    row_norm = float(abs(A_UU).sum(axis=1).max())
    scale = max(float(np.abs(b).max()), row_norm * float(np.abs(x).max()), np.finfo(float).tiny)
    res = float(np.abs(r).max())
    if not np.all(np.isfinite(x)) or res > rtol * scale:
        cond = _condest(A_UU, lu)
        raise SolverError(f"residual {res:.3e} exceeds {rtol:.0e} x scale {scale:.3e}; "
                          f"1-norm condition estimate {cond:.3e}")
    vals = g.copy().ravel()
    vals[U] = x
    info = {"unknowns": int(U.size), "residual": res, "residual_scale": scale, **op.diagnostics}
    return GridFunction(grid, vals.reshape(grid.shape), unknown, info)


def _condest(A, lu) -> float:
    try:
        inv = spla.LinearOperator(A.shape, matvec=lu.solve, rmatvec=lambda v: lu.solve(v, trans="T"))
        return float(spla.onenormest(A) * spla.onenormest(inv))
    except Exception:  # diagnostic only
        return float("nan")

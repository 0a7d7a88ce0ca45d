"""Discrete convex envelopes, Monge-Ampere mass and ABP-type checks on grids.

The envelope of ``-u^-`` is taken over a square of side ``4 d`` (``d`` the
grid diameter) on which the data is extended by zero.  It is computed as the
lower convex hull of the lifted nodes plus the four far corners at height
zero, then read back at the nodes by locating each node in the projected
lower facets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull

from .fields import CoefficientField, Grid, GridFunction, discretize_L, write_columns_csv
from .report import ExperimentReport

CONTACT_FACTOR = 10.0  # hypothesis slack CONTACT_FACTOR * h^2 for discrete inequalities
CONTACT_RTOL = 1e-9  # contact tolerance relative to max |u^-|


@dataclass
class EnvelopeResult:
    """``-u^-``, its convex envelope and the contact mask ``{-u^- = Gamma_u}``."""

    source: GridFunction
    envelope: GridFunction
    contact: np.ndarray
    tau: float

    def to_csv(self, path) -> None:
        X1, X2 = self.envelope.grid.mesh()
        write_columns_csv(path, {"x1": X1.ravel(), "x2": X2.ravel(), "u": self.source.values.ravel(),
                                 "envelope": self.envelope.values.ravel(), "contact": self.contact.ravel()})


@dataclass
class MAMass:
    """Per-node discrete ``det D^2 u`` (clamped at 0) and its weighted sum over ``mask``."""

    det: np.ndarray
    mask: np.ndarray
    mass: float


def _grid_diameter(grid: Grid) -> float:
    return math.hypot(grid.x1_range[1] - grid.x1_range[0], grid.x2_range[1] - grid.x2_range[0])


def _lower_hull_values(grid: Grid, g: np.ndarray) -> np.ndarray:
    X1, X2 = grid.mesh()
    c1 = 0.5 * sum(grid.x1_range)
    c2 = 0.5 * sum(grid.x2_range)
    half = 2.0 * _grid_diameter(grid)
    corners = np.array([[c1 - half, c2 - half], [c1 + half, c2 - half],
                        [c1 - half, c2 + half], [c1 + half, c2 + half]])
    pts = np.column_stack([np.concatenate([X1.ravel(), corners[:, 0]]),
                           np.concatenate([X2.ravel(), corners[:, 1]]),
                           np.concatenate([g.ravel(), np.zeros(4)])])
    hull = ConvexHull(pts)
    lower = hull.equations[:, 2] < -1e-12
    tris = hull.simplices[lower]
    eq = hull.equations[lower]

    out = np.full(grid.size, -np.inf)
    x0, y0 = grid.x1_range[0], grid.x2_range[0]
    h1, h2 = grid.h1, grid.h2
    n2, n1 = grid.shape
    P = pts[:, :2]
    # bounding boxes of each projected facet in node-index space
    tx, ty = P[tris, 0], P[tris, 1]
    i_lo = np.clip(np.ceil((tx.min(1) - x0) / h1 - 1e-9), 0, n1 - 1).astype(int)
    i_hi = np.clip(np.floor((tx.max(1) - x0) / h1 + 1e-9), 0, n1 - 1).astype(int)
    j_lo = np.clip(np.ceil((ty.min(1) - y0) / h2 - 1e-9), 0, n2 - 1).astype(int)
    j_hi = np.clip(np.floor((ty.max(1) - y0) / h2 + 1e-9), 0, n2 - 1).astype(int)
    wi = np.maximum(i_hi - i_lo + 1, 0)
    wj = np.maximum(j_hi - j_lo + 1, 0)
    count = wi * wj
    # facets entirely outside the grid have an empty (or inverted) box
    count[(tx.max(1) < x0 - h1) | (tx.min(1) > grid.x1_range[1] + h1)
          | (ty.max(1) < y0 - h2) | (ty.min(1) > grid.x2_range[1] + h2)] = 0

    order = np.flatnonzero(count)
    budget = 4_000_000
    start = 0
    while start < order.size:
        csum = np.cumsum(count[order[start:]])
        stop = start + max(1, int(np.searchsorted(csum, budget, side="right")))
        sel = order[start:stop]
        start = stop
        c = count[sel]
        t = np.repeat(sel, c)
        local = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        ii = i_lo[t] + local % wi[t]
        jj = j_lo[t] + local // wi[t]
        px = x0 + ii * h1
        py = y0 + jj * h2
        a, b, cc = tris[t, 0], tris[t, 1], tris[t, 2]
        ax, ay = P[a, 0], P[a, 1]
        bx, by = P[b, 0] - ax, P[b, 1] - ay
        cx, cy = P[cc, 0] - ax, P[cc, 1] - ay
        det = bx * cy - by * cx
        dx, dy = px - ax, py - ay
        s = (dx * cy - dy * cx) / det
        r = (bx * dy - by * dx) / det
        eps = 1e-10
        inside = (s >= -eps) & (r >= -eps) & (s + r <= 1 + eps)
        e = eq[t[inside]]
        z = -(e[:, 0] * px[inside] + e[:, 1] * py[inside] + e[:, 3]) / e[:, 2]
        np.maximum.at(out, jj[inside] * n1 + ii[inside], z)
    if not np.all(np.isfinite(out)):
        raise RuntimeError("convex envelope: some nodes were not located in the lower hull")
    return out.reshape(grid.shape)


def convex_envelope(u: GridFunction, domain=None, tau: float | None = None) -> EnvelopeResult:
    """Convex envelope of ``-u^-`` with ``u`` extended by zero outside ``domain``.

    Parameters
    ----------
    u : GridFunction
        Values on a rectangle containing the domain.
    domain : bool array, optional
        Nodes of the domain; values elsewhere are replaced by 0.  Defaults to
        every node.
    tau : float, optional
        Contact tolerance.  The hull is exact up to round-off, so the default
        is ``1e-9 * max(1, max |u^-|)``; a grid-scale value such as
        ``10 h^2`` widens the mask into a band of width ``O(h)``.
    """
    grid = u.grid
    g = np.minimum(u.values, 0.0)
    if domain is not None:
        g = np.where(np.asarray(domain, dtype=bool), g, 0.0)
    if not np.all(np.isfinite(g)):
        raise ValueError("grid function must be finite")
    if tau is None:
        tau = CONTACT_RTOL * max(1.0, float(-g.min()))
    if g.min() == 0.0:
        env = np.zeros(grid.shape)
    else:
        env = np.minimum(_lower_hull_values(grid, g), g)
    src = GridFunction(grid, g, u.mask)
    return EnvelopeResult(src, GridFunction(grid, env, u.mask), np.abs(g - env) <= tau, float(tau))


def is_discretely_convex(values, tol: float = 1e-12) -> bool:
    """Nonnegative second differences along rows, columns and both diagonals."""
    v = np.asarray(values, dtype=float)
    diffs = [v[:, 2:] - 2 * v[:, 1:-1] + v[:, :-2], v[2:, :] - 2 * v[1:-1, :] + v[:-2, :],
             v[2:, 2:] - 2 * v[1:-1, 1:-1] + v[:-2, :-2], v[2:, :-2] - 2 * v[1:-1, 1:-1] + v[:-2, 2:]]
    scale = max(float(np.abs(v).max()), 1.0)
    return all(float(d.min()) >= -tol * scale for d in diffs)


def _second_difference(v, h, axis):
    v = np.moveaxis(v, axis, -1)
    out = np.empty_like(v)
    out[..., 1:-1] = (v[..., 2:] - 2 * v[..., 1:-1] + v[..., :-2]) / h**2
    # one-sided, exact for cubics
    out[..., 0] = (2 * v[..., 0] - 5 * v[..., 1] + 4 * v[..., 2] - v[..., 3]) / h**2
    out[..., -1] = (2 * v[..., -1] - 5 * v[..., -2] + 4 * v[..., -3] - v[..., -4]) / h**2
    return np.moveaxis(out, -1, axis)


def discrete_hessian(u: GridFunction):
    """``(u11, u12, u22)`` at every node, exact for polynomials of degree at most 3."""
    grid = u.grid
    if min(grid.shape) < 4:
        raise ValueError("discrete Hessian needs at least 4 nodes per direction")
    v = u.values
    u11 = _second_difference(v, grid.h1, axis=1)
    u22 = _second_difference(v, grid.h2, axis=0)
    u12 = np.gradient(np.gradient(v, grid.h1, axis=1, edge_order=2), grid.h2, axis=0, edge_order=2)
    return u11, u12, u22


def discrete_horizontal_hessian(u: GridFunction):
    """Entries ``(X1X1 u, X2X1 u, X2X2 u)`` built from :func:`discrete_hessian`."""
    u11, u12, u22 = discrete_hessian(u)
    X1 = u.grid.mesh()[0]
    return u11, X1 * u12, X1 * X1 * u22


def monge_ampere_measure(u: GridFunction, mask=None) -> MAMass:
    """Discrete Monge-Ampere measure of ``mask`` (default: all nodes)."""
    u11, u12, u22 = discrete_hessian(u)
    det = np.maximum(u11 * u22 - u12 * u12, 0.0)
    mask = np.ones(u.grid.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return MAMass(det, mask, float((det * u.grid.cell_weights())[mask].sum()))


def monge_ampere_mass(u: GridFunction, mask=None) -> float:
    """Sum of clamped ``det D^2 u`` times trapezoidal cell areas over ``mask``."""
    return monge_ampere_measure(u, mask).mass


def _domain(u: GridFunction, domain):
    return u.mask.copy() if domain is None else np.asarray(domain, dtype=bool)


def _domain_diameter(grid: Grid, dom: np.ndarray) -> float:
    pts = grid.points()[dom]
    if len(pts) < 2:
        return 0.0
    try:
        pts = pts[ConvexHull(pts).vertices]
    except Exception:  # collinear node sets
        pass
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max())


def _outer_ring(dom: np.ndarray) -> np.ndarray:
    grow = dom.copy()
    grow[1:, :] |= dom[:-1, :]
    grow[:-1, :] |= dom[1:, :]
    grow[:, 1:] |= dom[:, :-1]
    grow[:, :-1] |= dom[:, 1:]
    return grow & ~dom


def classical_abp_check(u: GridFunction, domain=None, tau: float | None = None) -> ExperimentReport:
    """Realized constant ``c = d * mass^(1/2) / sup u^-`` of the Euclidean ABP bound.

    ``mass`` is the Monge-Ampere mass of the envelope on the contact set in
    the domain and ``d`` is the domain diameter.
    """
    grid = u.grid
    dom = _domain(u, domain)
    rep = ExperimentReport(name="classical_abp", config={"grid": [grid.n1, grid.n2], "nodes": int(dom.sum())})
    ring = _outer_ring(dom)
    tol = CONTACT_FACTOR * max(grid.h1, grid.h2) ** 2
    if ring.any() and float(u.values[ring].min()) < -tol:
        rep.rejected = "u is negative on the domain boundary"
        return rep
    env = convex_envelope(u, dom, tau)
    sup_neg = float(np.maximum(-u.values[dom], 0.0).max()) if dom.any() else 0.0
    d = _domain_diameter(grid, dom)
    contact = env.contact & dom
    mass = monge_ampere_mass(env.envelope, contact)
    rep.measurements.update(sup_u_minus=sup_neg, diameter=d, contact_mass=mass,
                            contact_nodes=int(contact.sum()), tau=env.tau)
    if sup_neg == 0.0:
        rep.measurements["realized_c"] = float("inf")
        rep.notes.append("u is nonnegative; inequality holds trivially")
        rep.check("inequality", True)
        return rep
    c = d * math.sqrt(mass) / sup_neg
    rep.measurements["realized_c"] = c
    rep.check("realized_c_positive", c > 0 and math.isfinite(c))
    return rep


def _sample(grid: Grid, data) -> np.ndarray:
    return grid.sample(data)


def weighted_abp_check(u: GridFunction, f, fld: CoefficientField, domain=None,
                       cross: str = "centered", tau: float | None = None) -> ExperimentReport:
    """Realized constant of ``sup u^- <= C diam (int_contact (f^+)^2 x1^2)^(1/2)``.

    Requires the discrete ``L u <= f x1^2 + 10 h^2`` on domain nodes and
    ``u >= 0`` off the domain; otherwise the input is rejected.
    """
    grid = u.grid
    dom = _domain(u, domain) & ~grid.edge_mask()
    fv = _sample(grid, f)
    X1 = grid.mesh()[0]
    tol = CONTACT_FACTOR * max(grid.h1, grid.h2) ** 2
    rep = ExperimentReport(name="weighted_abp", config={"grid": [grid.n1, grid.n2], "field": fld.descriptor,
                                                         "cross_stencil": cross})
    Lu = discretize_L(grid, fld, cross).apply(u.values)
    excess = float((Lu - fv * X1**2)[dom].max()) if dom.any() else -np.inf
    rep.measurements["max_Lu_minus_f_x1sq"] = excess
    off = ~dom
    if excess > tol or float(u.values[off].min()) < -tol:
        rep.rejected = "precondition violated: L u <= f x1^2 or u >= 0 off the domain fails"
        return rep
    env = convex_envelope(u, dom, tau)
    contact = env.contact & dom
    w = grid.cell_weights()
    integral = float((np.maximum(fv, 0.0) ** 2 * X1**2 * w)[contact].sum())
    sup_neg = float(np.maximum(-u.values[dom], 0.0).max()) if dom.any() else 0.0
    d = _domain_diameter(grid, dom | _outer_ring(dom))
    axis = contact & (np.abs(X1) < 0.5 * grid.h1)
    rep.measurements.update(sup_u_minus=sup_neg, diameter=d, weighted_integral=integral,
                            contact_nodes=int(contact.sum()), axis_contact_nodes=int(axis.sum()), tau=env.tau)
    if sup_neg == 0.0:
        rep.measurements["realized_C"] = 0.0
        rep.notes.append("u is nonnegative; inequality holds trivially")
        rep.check("inequality", True)
        return rep
    C = sup_neg / (d * math.sqrt(integral)) if integral > 0 else float("inf")
    rep.measurements["realized_C"] = C
    rep.check("realized_C_finite", math.isfinite(C))
    return rep


def wmp_check(u: GridFunction, v: GridFunction, fld: CoefficientField, domain=None,
              cross: str = "centered") -> ExperimentReport:
    """Comparison: ``u <= v`` off the domain and ``L v <= L u`` inside imply ``u <= v``."""
    grid = u.grid
    dom = _domain(u, domain) & ~grid.edge_mask()
    tol = CONTACT_FACTOR * max(grid.h1, grid.h2) ** 2
    op = discretize_L(grid, fld, cross)
    diff_L = (op.apply(v.values) - op.apply(u.values))[dom]
    diff = u.values - v.values
    rep = ExperimentReport(name="weak_maximum_principle", config={"grid": [grid.n1, grid.n2],
                                                                   "field": fld.descriptor})
    rep.measurements.update(max_boundary_gap=float(diff[~dom].max()),
                            max_Lv_minus_Lu=float(diff_L.max()) if diff_L.size else 0.0,
                            max_u_minus_v=float(diff.max()), monotone_stencil=op.diagnostics["monotone"])
    if rep.measurements["max_boundary_gap"] > tol or rep.measurements["max_Lv_minus_Lu"] > tol:
        rep.rejected = "comparison hypotheses fail beyond 10 h^2"
        return rep
    rep.check("u_le_v", rep.measurements["max_u_minus_v"] <= tol, tolerance=tol)
    return rep

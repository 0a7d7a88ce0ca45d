"""Numerical experiments for critical density, double ball, power decay and Harnack.

Each experiment solves ``L u = 0`` (or ``L u = rhs <= 0``) on a quasi-ball
realized as a node mask inside a rectangular grid, with Dirichlet data on
every node outside the mask, and measures one scale-free constant.  All
measured quantities are ratios, so the post-hoc normalizations used below are
exact by linearity.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import barriers
from .fields import CoefficientField, Grid, GridFunction, make_field, solve_dirichlet
from .geometry import (QuasiBallSpec, SetKind, as_point, contains, dilate, level_radius, reflect,
                       rho)
from .report import ExperimentReport

EXPERIMENTS = ("critical_density", "double_ball", "power_decay", "harnack")
BOUNDARY_KINDS = ("constant", "bump", "pole", "spike")
DEFAULT_BOUNDARY = {"critical_density": "bump", "double_ball": "capacitary", "power_decay": "spike",
                    "harnack": "pole"}
#: measured constant of each experiment
MEASURED = {"critical_density": "nu_hat", "double_ball": "gamma_hat", "power_decay": "eps_hat",
            "harnack": "C_hat"}
POSITIVITY_FLOOR = 1e-6
SPREAD_BOUND = 10.0
MARGIN = 1.1


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment, or a sweep when any of the list fields is set.

    ``center`` and ``radius`` are given at unit scale; the run uses
    ``dilate(scale, center)`` and ``scale * radius``.  In a sweep the first
    center coordinate is replaced by ``offset * radius`` for each entry of
    ``offsets``.
    """

    experiment: str = "harnack"
    field: str = "identity"
    lam: float = 1.0
    Lam: float = 1.0
    seed: int = 0
    field_params: dict = dataclasses.field(default_factory=dict)
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0
    scale: float = 1.0
    eta: float = 3.0
    theta: float = 0.5
    M: float = 4.0
    k_max: int = 6
    grid_n: int = 129
    boundary: str | None = None
    boundary_scale: float = 1.0
    sets: str = "ball"
    reflect: bool = False
    fields: list | None = None
    ratios: list | None = None
    offsets: list | None = None
    scales: list | None = None
    seeds: list | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(as_point(self.center)))
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if not self.eta > 2:
            raise ValueError("eta must exceed 2")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if not self.M > 1:
            raise ValueError("M must exceed 1")
        if not (self.radius > 0 and self.scale > 0 and self.boundary_scale > 0):
            raise ValueError("radius, scale and boundary_scale must be positive")
        if self.grid_n < 9:
            raise ValueError("grid_n must be at least 9")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if self.sets not in ("ball", "G"):
            raise ValueError("sets must be 'ball' or 'G'")
        if self.boundary is not None and self.boundary not in BOUNDARY_KINDS:
            raise ValueError(f"unknown boundary kind {self.boundary!r}; expected one of {BOUNDARY_KINDS}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "center" in data:
            data["center"] = tuple(data["center"])
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["center"] = list(self.center)
        return out

    # -- derived quantities --------------------------------------------------

    @property
    def y(self) -> tuple[float, float]:
        return tuple(float(v) for v in dilate(self.scale, self.center))

    @property
    def r(self) -> float:
        return self.scale * self.radius

    @property
    def boundary_kind(self) -> str:
        return self.boundary or DEFAULT_BOUNDARY[self.experiment]

    @property
    def k_scale(self) -> int:
        """Smallest ``k`` with ``2^k theta >= 1``; it must also satisfy ``2^k theta < eta``."""
        return max(0, math.ceil(-math.log2(self.theta) - 1e-12))

    def build_field(self) -> CoefficientField:
        fld = make_field(self.field, self.lam, self.Lam, self.seed, **self.field_params)
        return fld.reflected() if self.reflect else fld

    def is_sweep(self) -> bool:
        return any(v is not None for v in (self.fields, self.ratios, self.offsets, self.scales, self.seeds))

    def expand(self) -> list["ExperimentConfig"]:
        """Cartesian product of the sweep lists, in a fixed order."""
        if not self.is_sweep():
            return [self]
        fields = self.fields or [self.field]
        ratios = self.ratios or [None]
        offsets = self.offsets if self.offsets is not None else [None]
        scales = self.scales or [self.scale]
        seeds = self.seeds or [self.seed]
        base = dataclasses.replace(self, fields=None, ratios=None, offsets=None, scales=None, seeds=None)
        out = []
        for kind, ratio, off, t, seed in itertools.product(fields, ratios, offsets, scales, seeds):
            lam, Lam = (self.lam, self.Lam) if ratio is None else (1.0, 1.0 / float(ratio))
            center = self.center if off is None else (float(off) * self.radius, self.center[1])
            out.append(dataclasses.replace(base, field=kind, lam=lam, Lam=Lam, center=center, scale=float(t),
                                           seed=int(seed)))
        return out


def standard_sweep(experiment: str = "harnack", grid_n: int = 65, **overrides) -> ExperimentConfig:
    """4 field kinds x 3 ellipticity ratios x 6 center offsets x seeds 1..5.

    The dilation scale cycles through ``(1/2, 1, 2, 4)`` with the seed, so each
    scale is visited without multiplying the run count.
    """
    base = dict(experiment=experiment, grid_n=grid_n, fields=["identity", "constant", "rotating", "checkerboard"],
                ratios=[1.0, 0.5, 0.25], offsets=[0.0, 0.5, 1.0, 1.5, 2.0, 4.0], seeds=[1, 2, 3, 4, 5])
    base.update(overrides)
    return ExperimentConfig(**base)


def standard_plan(cfg: ExperimentConfig, scales=(0.5, 1.0, 2.0, 4.0)) -> list[ExperimentConfig]:
    plan = cfg.expand()
    return [dataclasses.replace(c, scale=float(scales[(c.seed - 1) % len(scales)])) for c in plan]


# -- domains and data ---------------------------------------------------------


def ball_extent(y, s: float) -> tuple[float, float]:
    """Half-widths of the smallest coordinate rectangle around ``B(y, s)``.

    ``|x1 - y1| < s``, and for fixed ``x1`` the condition ``d~(x, y) < s``
    reads ``|x2 - y2| < ((s - |x1 - y1| + R)^2 - R^2) / 4`` with
    ``R = sqrt(x1^2 + y1^2)``; the height is maximized over a fine ``x1`` sample.
    """
    t = np.linspace(-1.0, 1.0, 4001)
    x1 = y[0] + s * t
    R = np.sqrt(x1 * x1 + y[0] ** 2)
    h = ((s * (1 - np.abs(t)) + R) ** 2 - R * R) / 4
    return float(s), float(h.max())


def _ball_grid(y, s: float, n: int) -> Grid:
    w1, w2 = ball_extent(y, s)
    return Grid((y[0] - MARGIN * w1, y[0] + MARGIN * w1), (y[1] - MARGIN * w2, y[1] + MARGIN * w2), n, n)


def _level_grid(y, s: float, n: int) -> Grid:
    """Grid symmetric in ``x1`` covering ``G~(y, s)`` (both sheets when ``|y1|`` is large)."""
    ell = float(level_radius(abs(y[0]), s))
    w1 = MARGIN * math.sqrt(y[0] ** 2 + ell**2)
    w2 = MARGIN * 0.5 * ell**2
    return Grid((-w1, w1), (y[1] - w2, y[1] + w2), n, n)


def _mask(grid: Grid, y, s: float, kind: SetKind) -> np.ndarray:
    return np.asarray(contains(QuasiBallSpec(y, s, kind), grid.points()), dtype=bool)


def boundary_data(kind: str, y, r: float, eta: float):
    """Positive boundary data placed relative to ``B(y, eta r)``.

    With ``(w1, w2) = ball_extent(y, eta r)``: ``pole`` is ``rho(., p)^-1`` with
    ``p = y + (0, 1.2 w2)``, just beyond the top edge of the grid; ``bump`` and
    ``spike`` are Gaussians centred at ``y +- (0, w2)`` over a positive floor.
    """
    w1, w2 = ball_extent(y, eta * r)
    y1, y2 = y
    if kind == "constant":
        return lambda x1, x2: np.ones(np.broadcast(x1, x2).shape)
    if kind == "pole":
        p = np.array([y1, y2 + 1.2 * w2])
        return lambda x1, x2: 1.0 / rho(np.stack(np.broadcast_arrays(x1, x2), axis=-1), p)
    if kind == "bump":
        return lambda x1, x2: 0.1 + np.exp(-(((x1 - y1) / w1) ** 2) - ((x2 - y2 - w2) / (0.5 * w2)) ** 2)
    if kind == "spike":
        return lambda x1, x2: 1e-2 + 10.0 * np.exp(-(((x1 - y1) / (0.2 * w1)) ** 2)
                                                    - ((x2 - y2 + w2) / (0.2 * w2)) ** 2)
    raise ValueError(f"unknown boundary kind {kind!r}")


def _solve_on(cfg: ExperimentConfig, fld: CoefficientField, grid: Grid, domain: np.ndarray, data) -> GridFunction:
    g = cfg.boundary_scale * grid.sample(data)
    return solve_dirichlet(grid, fld, g, 0.0, domain=domain)


def _frac(w, sel, within) -> float:
    total = float(w[within].sum())
    return float(w[sel & within].sum()) / total if total > 0 else float("nan")


def _new_report(cfg: ExperimentConfig) -> ExperimentReport:
    conf = cfg.to_dict()
    for key in ("fields", "ratios", "offsets", "scales", "seeds"):
        conf.pop(key)
    conf.update(effective_center=list(cfg.y), effective_radius=cfg.r, boundary_kind=cfg.boundary_kind)
    return ExperimentReport(name=cfg.experiment, config=conf, seed=cfg.seed)


def _y_for_run(cfg: ExperimentConfig):
    y = cfg.y
    return tuple(float(v) for v in reflect(y)) if cfg.reflect else y


# -- experiments ------------------------------------------------------------


def critical_density_experiment(cfg: ExperimentConfig, fld: CoefficientField | None = None) -> ExperimentReport:
    """Volume fraction of ``{u <= M}`` after normalizing ``inf u = 1`` on the inner set.

    Ball form: solve in ``B(y, eta r)``, normalize on ``B(y, theta r)``, measure
    in ``B(y, r)``.  ``sets='G'`` uses ``G(y, eta r)``, ``G(y, r)`` and
    ``G(y, 3r/2)`` instead.
    """
    rep = _new_report(cfg)
    y, r = _y_for_run(cfg), cfg.r
    if cfg.sets == "ball":
        kind, s_in, s_meas = SetKind.B, cfg.theta * r, r
    else:
        kind, s_in, s_meas = SetKind.G, r, 1.5 * r
    grid = _ball_grid(y, cfg.eta * r, cfg.grid_n) if kind is SetKind.B else _level_grid(y, cfg.eta * r, cfg.grid_n)
    dom = _mask(grid, y, cfg.eta * r, kind)
    inner = _mask(grid, y, s_in, kind)
    meas = _mask(grid, y, s_meas, kind)
    if not inner.any() or not meas.any():
        rep.rejected = "grid does not resolve the inner sets"
        return rep
    u = _solve_on(cfg, fld or cfg.build_field(), grid, dom, boundary_data(cfg.boundary_kind, y, r, cfg.eta))
    low = float(u.values[inner].min())
    if not low > 0:
        rep.rejected = "solution is not positive on the inner set"
        return rep
    v = u.values / low
    w = grid.cell_weights()
    nu = _frac(w, v <= cfg.M, meas)
    rep.measurements.update(
        nu_hat=nu, inner_nodes=int(inner.sum()), measure_nodes=int(meas.sum()), normalizer=low,
        max_on_measure_set=float(v[meas].max()), monotone_stencil=u.info["monotone"],
        eta_theta_k=[cfg.eta, cfg.theta, cfg.k_scale],
        cdg0_factor=max(r + abs(y[0]), 1.0 / (r + abs(y[0]))),
    )
    rep.check("nu_hat_positive", nu > 0, tolerance=0.0)
    return rep


def double_ball_experiment(cfg: ExperimentConfig, fld: CoefficientField | None = None) -> ExperimentReport:
    """Infimum over ``G~(y, 2r)`` of the potential equal to 1 on ``G~(y, r)`` and 0 outside ``G~(y, 3r)``.

    By comparison this potential lies below every nonnegative supersolution
    that is at least 1 on ``G~(y, r)``, so its infimum is the double ball
    constant of the configuration.  It is compared with the barrier bound
    ``gamma(alpha)``.  ``boundary='constant'`` imposes 1 everywhere instead.
    """
    rep = _new_report(cfg)
    if cfg.boundary_kind not in ("capacitary", "constant"):
        rep.rejected = "double ball data is the capacitary potential (or constant 1)"
        return rep
    y, r = _y_for_run(cfg), cfg.r
    fld = fld or cfg.build_field()
    grid = _level_grid(y, 3 * r, cfg.grid_n)
    a1 = abs(y[0])
    p = np.asarray(rho(grid.points(), y))
    l1, l2, l3 = (float(level_radius(a1, s)) for s in (r, 2 * r, 3 * r))
    ring = (p >= l1) & (p < l3)
    inside = np.ones(grid.shape) if cfg.boundary_kind == "constant" else (p < l1).astype(float)
    g = cfg.boundary_scale * inside
    u = solve_dirichlet(grid, fld, g, 0.0, domain=ring)
    v = u.values / cfg.boundary_scale
    double = p < l2
    gamma_hat = float(v[double].min())
    a = barriers.alpha(fld.ell)
    gam = barriers.gamma_bound(a)
    rep.measurements.update(
        gamma_hat=gamma_hat, gamma_barrier=gam, alpha=a, ring_nodes=int(ring.sum()),
        double_ring_nodes=int((double & ring).sum()), min_u=float(v.min()), max_u=float(v.max()),
        monotone_stencil=u.info["monotone"], case=barriers.ring_barrier(y, r, a=a).spec.case,
    )
    rep.check("gamma_hat_at_least_barrier", gamma_hat >= 0.95 * gam, tolerance=0.95)
    return rep


def power_decay_experiment(cfg: ExperimentConfig, fld: CoefficientField | None = None,
                           k_max: int | None = None) -> ExperimentReport:
    """Superlevel fractions of ``u`` in ``B~(y, r/2) cap B(y, eta r)`` at levels ``M^k``.

    ``u`` solves ``L u = 0`` in ``B(y, eta r)`` and is normalized to have
    infimum 1 on ``B~(y, r) cap B(y, eta r)``.  ``eps_hat = max_k frac_k^(1/k)``
    is the smallest ``eps`` with ``frac_k <= eps^k`` for every measured ``k``.
    The largest ratio of consecutive fractions (fraction 1 at ``k = 0``) is
    reported as ``eps_consecutive``; it can equal 1 on a plateau, which happens
    when the measured set has two components separated by a gap in ``u``.
    """
    k_max = cfg.k_max if k_max is None else k_max
    rep = _new_report(cfg)
    rep.config["k_max"] = k_max
    y, r = _y_for_run(cfg), cfg.r
    grid = _ball_grid(y, cfg.eta * r, cfg.grid_n)
    dom = _mask(grid, y, cfg.eta * r, SetKind.B)
    norm_set = _mask(grid, y, r, SetKind.B_TILDE) & dom
    meas = _mask(grid, y, r / 2, SetKind.B_TILDE) & dom
    if not meas.any():
        rep.rejected = "grid does not resolve the measured set"
        return rep
    u = _solve_on(cfg, fld or cfg.build_field(), grid, dom, boundary_data(cfg.boundary_kind, y, r, cfg.eta))
    low = float(u.values[norm_set].min())
    if not low > 0:
        rep.rejected = "solution is not positive on the normalization set"
        return rep
    v = u.values / low
    w = grid.cell_weights()
    fracs = [_frac(w, v >= cfg.M**k, meas) for k in range(1, k_max + 1)]
    prev = [1.0] + fracs[:-1]
    ratios = [f / p for f, p in zip(fracs, prev) if p > 0]
    exact = all(f == 0 for f in fracs)
    eps = max(f ** (1.0 / k) for k, f in enumerate(fracs, start=1))
    rep.measurements.update(
        eps_hat=eps, eps_consecutive=max(ratios) if ratios else 0.0, fractions=fracs, exact_decay=exact, measure_nodes=int(meas.sum()),
        max_on_measure_set=float(v[meas].max()), monotone_stencil=u.info["monotone"],
        eta_theta_k=[cfg.eta, cfg.theta, cfg.k_scale],
    )
    if exact:
        rep.notes.append("all superlevel fractions vanish: exact decay")
    rep.check("nested_fractions", all(b <= a for a, b in zip([1.0] + fracs, fracs)))
    rep.check("eps_hat_below_one", eps < 1, tolerance=1.0)
    return rep


def harnack_experiment(cfg: ExperimentConfig, fld: CoefficientField | None = None) -> ExperimentReport:
    """``C_hat = sup / inf`` of ``u`` over the nodes of ``B(y, r)``; ``u`` solves ``L u = 0`` in ``B(y, eta r)``."""
    rep = _new_report(cfg)
    y, r = _y_for_run(cfg), cfg.r
    grid = _ball_grid(y, cfg.eta * r, cfg.grid_n)
    dom = _mask(grid, y, cfg.eta * r, SetKind.B)
    inner = _mask(grid, y, r, SetKind.B)
    if not inner.any():
        rep.rejected = "grid does not resolve B(y, r)"
        return rep
    data = boundary_data(cfg.boundary_kind, y, r, cfg.eta)
    g = cfg.boundary_scale * grid.sample(data)
    if float(g[~dom].min()) < POSITIVITY_FLOOR * cfg.boundary_scale:
        rep.rejected = "boundary data below the positivity floor"
        return rep
    u = solve_dirichlet(grid, fld or cfg.build_field(), g, 0.0, domain=dom)
    lo = float(u.values[inner].min())
    hi = float(u.values[inner].max())
    rep.measurements.update(inf_u=lo / cfg.boundary_scale, sup_u=hi / cfg.boundary_scale,
                            inner_nodes=int(inner.sum()), monotone_stencil=u.info["monotone"],
                            eta_theta_k=[cfg.eta, cfg.theta, cfg.k_scale])
    if lo < POSITIVITY_FLOOR * cfg.boundary_scale:
        rep.rejected = "inf over B(y, r) below the positivity floor"
        return rep
    C = hi / lo
    rep.measurements["C_hat"] = C
    rep.check("C_hat_finite", math.isfinite(C))
    return rep


def t_image(cfg: ExperimentConfig) -> tuple[ExperimentConfig, CoefficientField]:
    """Unit-scale chart of ``cfg`` under ``T(x) = (r x1, y2 + r^2 x2)``.

    Returns the configuration centered at ``(y1 / r, 0)`` with radius 1 and
    the pulled-back field ``a o T``, to be passed to :func:`run_experiment`.
    """
    y, r = cfg.y, cfg.r
    base = dataclasses.replace(cfg, center=(y[0] / r, 0.0), radius=1.0, scale=1.0)
    fld = cfg.build_field().pullback(r, 0.0, r * r, y[1])
    return base, fld


RUNNERS = {
    "critical_density": critical_density_experiment,
    "double_ball": double_ball_experiment,
    "power_decay": power_decay_experiment,
    "harnack": harnack_experiment,
}


def run_experiment(cfg: ExperimentConfig, fld: CoefficientField | None = None) -> ExperimentReport:
    """Dispatch on ``cfg.experiment``; ``fld`` overrides the field built from the config."""
    t0 = time.perf_counter()
    rep = RUNNERS[cfg.experiment](cfg, fld)
    if fld is not None:
        rep.config["field_descriptor"] = fld.descriptor
    rep.wall_time = time.perf_counter() - t0
    return rep


def _run_dict(data: dict[str, Any]) -> dict[str, Any]:
    rep = run_experiment(ExperimentConfig.from_dict(data))
    return {"report": rep.to_dict(), "wall_time": rep.wall_time}


# -- sweeps -----------------------------------------------------------------


def _row(cfg: ExperimentConfig, rep: dict[str, Any]) -> dict[str, Any]:
    key = MEASURED[cfg.experiment]
    return {
        "experiment": cfg.experiment, "field": cfg.field, "lam": cfg.lam, "Lam": cfg.Lam, "seed": cfg.seed,
        "center_x1": cfg.y[0], "center_x2": cfg.y[1], "radius": cfg.r, "scale": cfg.scale,
        "value": rep["measurements"].get(key), "passed": rep["passed"], "rejected": rep["rejected"],
    }


def aggregate(rows: list[dict[str, Any]]) -> dict[str, Any]:
    """Per-experiment extrema, median and spread of the measured constant.

    The spread ``max / min`` is taken over strictly positive values (an
    exact-decay run has ``eps_hat = 0`` and carries no scale information).
    """
    out: dict[str, Any] = {}
    for name in EXPERIMENTS:
        sel = [r for r in rows if r["experiment"] == name]
        if not sel:
            continue
        accepted = [r for r in sel if r["rejected"] is None]
        vals = [float(r["value"]) for r in accepted if r["value"] is not None and not isinstance(r["value"], str)]
        finite = [v for v in vals if math.isfinite(v)]
        pos = [v for v in finite if v > 0]
        spread = max(pos) / min(pos) if pos else float("nan")
        all_pass = all(r["passed"] for r in accepted)
        entry = {
            "constant": MEASURED[name], "runs": len(sel), "accepted": len(accepted),
            "rejected": len(sel) - len(accepted), "failed": sum(not r["passed"] for r in accepted),
            "min": min(finite) if finite else float("nan"), "max": max(finite) if finite else float("nan"),
            "median": statistics.median(finite) if finite else float("nan"),
            "positive_values": len(pos), "spread": spread,
        }
        if not accepted:
            entry["verdict"] = "no data"
        else:
            entry["verdict"] = "pass" if all_pass and len(finite) == len(accepted) and (
                not pos or spread <= SPREAD_BOUND) else "fail"
        out[name] = entry
    return out


def sweep(plan: list[ExperimentConfig], jobs: int = 1) -> ExperimentReport:
    """Run every configuration in ``plan`` and aggregate the measured constants.

    Individual failures and rejections are collected, not raised.  Results
    are ordered as in ``plan`` regardless of ``jobs``, so the report is
    deterministic.
    """
    t0 = time.perf_counter()
    rep = ExperimentReport(name="sweep", config={"plan_size": len(plan)})
    if not plan:
        rep.measurements.update(rows=[], aggregate={}, verdict="no data")
        rep.notes.append("empty plan")
        return rep
    payload = [c.to_dict() for c in plan]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_dict, payload))
    else:
        results = [_run_dict(p) for p in payload]
    rows = [_row(c, res["report"]) for c, res in zip(plan, results)]
    agg = aggregate(rows)
    rep.measurements.update(rows=rows, aggregate=agg)
    for name, entry in agg.items():
        rep.check(f"{name}_uniform", entry["verdict"] == "pass", tolerance=SPREAD_BOUND)
    rep.wall_time = time.perf_counter() - t0
    rep.measurements["verdict"] = "pass" if rep.passed else "fail"
    return rep

"""``grushin-lab``: run checks and experiments, writing reproducible artifacts.

Every run writes into one directory:

* ``manifest.json``: command, config path, hash of the resolved config, seed,
  output directory and tool version;
* ``report.json``: the reports, without timing information;
* ``summary.csv``: one row per report or sweep item;
* ``timing.json``: wall-clock times (kept apart so reports are byte-stable);
* ``field.csv`` / ``solution.csv`` for ``solve``, ``envelope.csv`` for ``abp``.

Exit status is 0 when every verdict passes, 2 when some verdict fails or an
input is rejected, and 1 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, abp, barriers, geometry, lab
from .fields import FIELD_KINDS, Grid, GridFunction, SmoothFunction, make_field, solve_dirichlet, write_columns_csv
from .report import ExperimentReport, _plain, dumps

ENV_OUT = "GRUSHIN_LAB_OUT"
LAB_COMMANDS = {"critical-density": "critical_density", "double-ball": "double_ball",
                "power-decay": "power_decay", "harnack": "harnack"}

# flag destination -> config key
FLAG_KEYS = {"lam": "lam", "Lam": "Lam", "center": "center", "radius": "radius", "eta": "eta", "theta": "theta",
             "grid_n": "grid_n", "seed": "seed", "field": "field", "samples": "samples"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _point(text: str) -> list[float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected 'x1,x2', got {text!r}") from exc
    return [a, b]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--lambda", dest="lam", type=float, help="lower ellipticity constant")
    common.add_argument("--big-lambda", dest="Lam", type=float, help="upper ellipticity constant")
    common.add_argument("--center", type=_point, help="center as x1,x2")
    common.add_argument("--radius", type=float)
    common.add_argument("--eta", type=float)
    common.add_argument("--theta", type=float)
    common.add_argument("--grid-n", dest="grid_n", type=int, help="nodes per grid direction")
    common.add_argument("--seed", type=int)
    common.add_argument("--field", choices=list(FIELD_KINDS))
    common.add_argument("--samples", type=int)
    common.add_argument("--config", type=Path, help="JSON config; flags override its entries")
    common.add_argument("--out", type=Path, help=f"output directory (default under ${ENV_OUT})")
    common.add_argument("--jobs", type=int, default=1, help="concurrent sweep items")

    p = _Parser(prog="grushin-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"grushin-lab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    geom = sub.add_parser("geom", help="geometry checks", parents=[common])
    geom.add_argument("action", choices=["verify"])

    bar = sub.add_parser("barrier", help="barrier verifications", parents=[common])
    bar.add_argument("action", choices=["verify"])
    sub.add_parser("solve", help="Dirichlet solve on a square", parents=[common])
    sub.add_parser("abp", help="ABP pipeline checks", parents=[common])
    labp = sub.add_parser("lab", help="experiments and sweeps", parents=[common])
    labp.add_argument("experiment", choices=sorted(LAB_COMMANDS))
    return p


def _load_config(path: Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    return data


def _resolve(args, defaults: dict[str, Any]) -> dict[str, Any]:
    cfg = dict(defaults)
    cfg.update(_load_config(args.config))
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            cfg[key] = v
    return cfg


def config_hash(command: str, cfg: dict[str, Any]) -> str:
    return hashlib.sha256(dumps({"command": command, "config": cfg}).encode("utf-8")).hexdigest()


def _field(cfg):
    return make_field(cfg.get("field", "identity"), float(cfg.get("lam", 1.0)), float(cfg.get("Lam", 1.0)),
                      int(cfg.get("seed", 0)), **cfg.get("field_params", {}))


def _check_keys(cfg: dict[str, Any], allowed: set[str]) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")


# -- commands ---------------------------------------------------------------


def run_geom(cfg) -> tuple[list[ExperimentReport], dict]:
    _check_keys(cfg, {"center", "radius", "samples", "seed", "ratios", "eps_values"})
    y, r = cfg["center"], float(cfg["radius"])
    n, seed = int(cfg["samples"]), int(cfg["seed"])
    reps = [geometry.structure_check(k, y, r, n, seed=seed) for k in ("charact", "equiv", "frla")]
    vol = geometry.volume_constants(cfg["ratios"], cfg["eps_values"], r)
    rep = ExperimentReport(name="volume_constants", config={"ratios": cfg["ratios"], "eps_values": cfg["eps_values"]})
    rep.measurements.update({k: v for k, v in vol.items()})
    rep.check("ring_c_spread_within_2", vol["ring_c_spread"] <= 2.0, tolerance=2.0)
    reps.append(rep)
    return reps, {}


def run_barrier(cfg) -> tuple[list[ExperimentReport], dict]:
    _check_keys(cfg, {"center", "radius", "samples", "seed", "lam", "Lam", "field", "field_params"})
    fld = _field(cfg)
    ell = fld.ell
    y, r = tuple(cfg["center"]), float(cfg["radius"])
    n, seed = int(cfg["samples"]), int(cfg["seed"])
    a = barriers.alpha(ell)
    spec = barriers.BarrierSpec(a, y, r, "power", 0.0, 0.0, 0.0)
    reps = [barriers.verify_subsolution(fld, spec, n, seed=seed),
            barriers.verify_ring_barrier(fld, barriers.ring_barrier(y, r, ell), n, seed=seed),
            barriers.verify_local_barrier(fld, barriers.lemma41_barrier(y, r, ell), n, seed=seed)]
    return reps, {}


def run_solve(cfg) -> tuple[list[ExperimentReport], dict]:
    _check_keys(cfg, {"center", "radius", "grid_n", "seed", "lam", "Lam", "field", "field_params", "boundary",
                      "rhs"})
    fld = _field(cfg)
    c, half, n = cfg["center"], float(cfg["radius"]), int(cfg["grid_n"])
    grid = Grid.square(half, n, center=tuple(c))
    g = SmoothFunction.from_expr(cfg["boundary"])
    f = SmoothFunction.from_expr(cfg["rhs"])
    sol = solve_dirichlet(grid, fld, g.value, f.value)
    rep = ExperimentReport(name="solve", config={"field": fld.descriptor, "grid": [n, n], "center": list(c),
                                                 "half_width": half, "boundary": cfg["boundary"], "rhs": cfg["rhs"]})
    rep.measurements.update(sol.info)
    rep.measurements.update(min_u=float(sol.values.min()), max_u=float(sol.values.max()))
    rep.check("residual_within_tolerance", sol.info["residual"] <= 1e-10 * sol.info["residual_scale"],
              tolerance=1e-10)
    X1, X2 = grid.mesh()
    a11, a12, a22 = fld(X1, X2)
    files = {
        "solution.csv": lambda p: sol.to_csv(p, extra={"unknown": sol.mask}),
        "field.csv": lambda p: write_columns_csv(p, {"x1": X1.ravel(), "x2": X2.ravel(), "a11": a11.ravel(),
                                                     "a12": a12.ravel(), "a22": a22.ravel()}),
    }
    return [rep], files


def run_abp(cfg) -> tuple[list[ExperimentReport], dict]:
    _check_keys(cfg, {"grid_n", "seed", "lam", "Lam", "field", "field_params"})
    fld = _field(cfg)
    n = int(cfg["grid_n"])
    reps = []
    envs = {}
    for k in (n, 2 * n - 1, 4 * n - 3):
        grid = Grid.square(1.0, k)
        u = solve_dirichlet(grid, fld, 0.0, lambda x1, x2: x1 * x1)
        rep = abp.weighted_abp_check(u, 1.0, fld)
        rep.config["grid_n"] = k
        reps.append(rep)
        envs[k] = u
    Cs = [r.measurements.get("realized_C", float("nan")) for r in reps]
    agg = ExperimentReport(name="weighted_abp_refinement", config={"grids": [n, 2 * n - 1, 4 * n - 3]})
    agg.measurements.update(realized_C=Cs, spread=max(Cs) / min(Cs) if min(Cs) > 0 else float("inf"))
    agg.check("stable_within_factor_2", agg.measurements["spread"] <= 2.0, tolerance=2.0)
    reps.append(agg)
    grid = Grid.square(1.0, n)
    X1, X2 = grid.mesh()
    disk = X1**2 + X2**2 < 1
    well = GridFunction(grid, np.where(disk, X1**2 + X2**2 - 1, 0.0))
    reps.append(abp.classical_abp_check(well, disk))
    env = abp.convex_envelope(envs[n])
    return reps, {"envelope.csv": env.to_csv}


def run_lab(experiment: str, cfg: dict[str, Any], jobs: int):
    cfg = dict(cfg)
    cfg["experiment"] = experiment
    try:
        ec = lab.ExperimentConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if ec.is_sweep():
        rep = lab.sweep(ec.expand(), jobs=jobs)
        return rep, rep.measurements["rows"]
    rep = lab.run_experiment(ec)
    row = {"experiment": experiment, "value": rep.measurements.get(lab.MEASURED[experiment]),
           "passed": rep.passed, "rejected": rep.rejected}
    return rep, [row]


DEFAULTS = {
    "geom": {"center": [0.0, 0.0], "radius": 1.0, "samples": 10_000, "seed": 0,
             "ratios": [0.0, 0.5, 1.0, 1.5, 2.0, 4.0], "eps_values": [1e-1, 1e-2, 1e-3]},
    "barrier": {"center": [1.0, 0.0], "radius": 1.0, "samples": 10_000, "seed": 0, "lam": 1.0, "Lam": 1.0,
                "field": "rotating"},
    "solve": {"center": [0.0, 0.0], "radius": 1.0, "grid_n": 65, "seed": 0, "lam": 1.0, "Lam": 1.0,
              "field": "identity", "boundary": "x1**2 + x2", "rhs": "2"},
    "abp": {"grid_n": 33, "seed": 0, "lam": 1.0, "Lam": 1.0, "field": "identity"},
    "lab": {},
}


# -- output -----------------------------------------------------------------


def _write_summary(path: Path, rows: list[dict[str, Any]]) -> None:
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in rows:
            w.writerow([_cell(row.get(k)) for k in keys])


def _cell(v):
    v = _plain(v)
    if v is None:
        return ""
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, dict)):
        return json.dumps(v, sort_keys=True)
    return v


def _report_rows(reps: list[ExperimentReport]) -> list[dict[str, Any]]:
    rows = []
    for r in reps:
        row = {"name": r.name, "passed": r.passed, "rejected": r.rejected}
        for k, v in sorted(r.measurements.items()):
            if isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool):
                row[k] = v
        rows.append(row)
    return rows


def _out_dir(args, command: str, digest: str) -> Path:
    if args.out is not None:
        return args.out
    root = Path(os.environ.get(ENV_OUT, "grushin_lab_runs"))
    return root / f"{command}-{digest[:12]}"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        command = args.command if args.command not in ("lab",) else f"lab-{args.experiment}"
        base = args.command
        cfg = _resolve(args, DEFAULTS[base])
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        t0 = time.perf_counter()
        files: dict = {}
        if base == "lab":
            rep, rows = run_lab(LAB_COMMANDS[args.experiment], cfg, args.jobs)
            payload = rep.to_dict()
            passed = rep.passed
            timing = {"wall_time": rep.wall_time}
        else:
            runner = {"geom": run_geom, "barrier": run_barrier, "solve": run_solve, "abp": run_abp}[base]
            try:
                reps, files = runner(cfg)
            except (KeyError, TypeError, ValueError) as exc:
                raise UsageError(f"invalid configuration: {exc}") from exc
            payload = {"command": command, "passed": all(r.passed for r in reps),
                       "reports": [r.to_dict() for r in reps]}
            passed = payload["passed"]
            rows = _report_rows(reps)
            timing = {}
        timing["total_wall_time"] = time.perf_counter() - t0
    except UsageError as exc:
        print(f"grushin-lab: error: {exc}", file=sys.stderr)
        return 1

    digest = config_hash(command, cfg)
    out = _out_dir(args, command, digest)
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"command": command, "config_path": str(args.config) if args.config else None,
                    "config_hash": digest, "config": cfg, "seed": cfg.get("seed", cfg.get("seeds")),
                    "output_dir": str(out), "tool_version": __version__}
        (out / "manifest.json").write_text(dumps(manifest), encoding="utf-8")
        (out / "report.json").write_text(dumps(payload), encoding="utf-8")
        (out / "timing.json").write_text(dumps(timing), encoding="utf-8")
        _write_summary(out / "summary.csv", rows)
        for name, writer in files.items():
            writer(out / name)
    except OSError as exc:
        print(f"grushin-lab: error: cannot write output: {exc}", file=sys.stderr)
        return 1

    print(f"{'PASS' if passed else 'FAIL'} {command} -> {out}")
    return 0 if passed else 2


if __name__ == "__main__":
    raise SystemExit(main())

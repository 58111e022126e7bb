"""Command-line front end: ``xvariational run|validate|summarize``."""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    ExperimentConfig,
    build_coefficients,
    build_dirichlet,
    build_integrand,
    build_lower_order,
    dump_config,
    parse_config,
    resolve_frame,
)
from .gammalab import (
    PeriodicFamily,
    effective_integrand,
    effective_matrix,
    hconvergence_experiment,
    homogenization_experiment,
    pointwise_gamma_experiment,
)
from .integrand import (
    Integrand,
    check_convexity,
    check_gradient,
    check_growth,
    check_hoelder_gradient,
    check_local_lipschitz,
)
from .mesh import build_grid, build_x_operator
from .solver import DiscreteProblem, SolverError, assemble_functional, poincare_constant

__all__ = ["RunManifest", "run", "summarize", "main", "EXIT_OK", "EXIT_CONFIG", "EXIT_SOLVER"]

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
THREADS_ENV = "XVARIATIONAL_THREADS"

log = logging.getLogger("xvariational")


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    kind: str
    started: str
    finished: str = ""
    steps: List[dict] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    status: str = "ok"
    exit_code: int = EXIT_OK
    message: str = ""
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        return cls(**data)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def _write_csv(path: Path, columns, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _drop_timing(obj):
    """Zero every ``wall_time`` entry so reports are reproducible byte for byte."""
    if isinstance(obj, dict):
        return {k: (0.0 if k == "wall_time" else _drop_timing(v)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_drop_timing(v) for v in obj]
    return obj


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


# -- experiment kinds ----------------------------------------------------------------


def _solver_tol(cfg):
    return cfg.solver.get("tol")


def _solve_kw(cfg):
    sv = cfg.solver
    return {"max_iter": sv.get("max_iter"), "memory": sv.get("memory"),
            "precondition": sv.get("preconditioner")}


def _run_poincare(cfg, frame, grid, timing):
    t0 = time.perf_counter()
    res = poincare_constant(grid, frame, tol=cfg.solver.get("poincare_tol", 1e-8))
    row = {"res": list(grid.res), "lambda_min": res.lambda_min, "iterations": res.iterations,
           "wall_time": timing(time.perf_counter() - t0)}
    steps = [{"name": "poincare", "status": "ok", "metrics": {"lambda_min": res.lambda_min,
                                                              "iterations": res.iterations}}]
    return ["res", "lambda_min", "iterations", "wall_time"], [row], steps, {"poincare": row}


def _run_cell(cfg, frame, grid, timing):
    f = build_integrand(cfg.integrand, frame)
    rows, steps, details = [], [], []
    for eta in cfg.cell["eta"]:
        t0 = time.perf_counter()
        est = effective_integrand(f, frame, eta, cfg.eps, cfg.cell["res"], tol=_solver_tol(cfg),
                                  workers=cfg.threads, solve_kw=_solve_kw(cfg))
        elapsed = timing(time.perf_counter() - t0)
        for e, v, b, r in zip(est.eps_list, est.values, est.affine_bounds, est.reports):
            rows.append({"eta": list(est.eta), "eps": e, "value": v, "affine_bound": b,
                         "converged": r.converged, "wall_time": elapsed})
            steps.append({"name": f"cell eta={_fmt(list(est.eta))}", "eps": e,
                          "status": "ok" if r.converged else "not converged",
                          "metrics": {"value": v, "affine_bound": b}})
        details.append({"eta": list(est.eta), "extrapolated": est.extrapolated,
                        "richardson": est.richardson, "increments": est.increments,
                        "reports": [r.to_dict() for r in est.reports]})
    return ["eta", "eps", "value", "affine_bound", "converged", "wall_time"], rows, steps, \
        {"estimates": details}


def _run_effective_matrix(cfg, frame, grid, timing):
    f = build_integrand(cfg.integrand, frame)
    est = effective_matrix(f, frame, cfg.eps, cfg.cell["res"], tol=_solver_tol(cfg), workers=cfg.threads,
                           solve_kw=_solve_kw(cfg))
    rows, steps = [], []
    m = f.m
    for e, mat in zip(cfg.eps, est.per_eps):
        row = {"eps": e}
        for i in range(m):
            for j in range(m):
                row[f"a{i + 1}{j + 1}"] = float(mat[i, j])
        rows.append(row)
        steps.append({"name": "effective-matrix", "eps": e, "status": "ok",
                      "metrics": {"trace": float(np.trace(mat))}})
    cols = ["eps"] + [f"a{i + 1}{j + 1}" for i in range(m) for j in range(m)]
    detail = {"matrix": est.matrix, "eigenvalues": est.eigenvalues, "in_bounds": est.in_bounds}
    return cols, rows, steps, detail


_CONV_COLUMNS = ["eps", "min_value", "l2_minimizer_err", "max_pairing_residual",
                 "strong_momenta_dist", "wall_time"]


def _conv_output(report, timing, index_name="eps"):
    rows, steps = [], []
    for s in report.steps:
        row = s.row()
        row["wall_time"] = timing(row["wall_time"])
        if index_name != "eps":
            row[index_name] = row.pop("eps")
        rows.append(row)
        steps.append({"name": report.kind, index_name: s.index, "eps": s.index, "status": s.status,
                      "metrics": {"min_value": s.min_value, "min_gap": s.min_gap,
                                  "l2_minimizer_err": s.l2_minimizer_err,
                                  "max_pairing_residual": s.max_pairing_residual,
                                  "strong_gradient_dist": s.strong_gradient_dist}})
    detail = {"reference_min": report.reference_min, "notes": report.notes,
              "partial": report.partial,
              "reference": report.reference.to_dict() if report.reference else None,
              "steps": [{"index": s.index, "min_gap": s.min_gap,
                         "strong_gradient_dist": s.strong_gradient_dist,
                         "pairing_residuals": s.pairing.residuals if s.pairing else [],
                         "solve": s.report.to_dict() if s.report else None}
                        for s in report.steps]}
    if report.effective is not None:
        detail["effective_matrix"] = report.effective.matrix
    cols = _CONV_COLUMNS if index_name == "eps" else [index_name] + _CONV_COLUMNS[1:]
    return cols, rows, steps, detail, report.partial


def _run_homogenize(cfg, frame, grid, timing):
    f = build_integrand(cfg.integrand, frame)
    g = build_lower_order(cfg.lower_order, frame.n)
    rep = homogenization_experiment(f, frame, g, build_dirichlet(cfg.dirichlet), cfg.eps, grid,
                                    cfg.cell["res"], tol=_solver_tol(cfg), workers=cfg.threads,
                                    solve_kw=_solve_kw(cfg))
    return _conv_output(rep, timing)


def _run_hconv(cfg, frame, grid, timing):
    coeffs = build_coefficients(cfg.integrand, frame)
    fam = PeriodicFamily(coeffs, frame, cfg.eps, cfg.cell["res"])
    lo = cfg.lower_order
    g = build_lower_order(lo or {"mu": 0.0, "rhs": 0.0}, frame.n)
    rep = hconvergence_experiment(fam, frame, g.mu, g.rhs, grid, tol=_solver_tol(cfg),
                                  workers=cfg.threads, solve_kw=_solve_kw(cfg))
    return _conv_output(rep, timing)


def _scaled(f: Integrand, factor: float) -> Integrand:
    from .integrand import OperatorCoefficients, quadratic

    if f.is_quadratic:
        base = f.params["coefficients"]
        return quadratic(OperatorCoefficients(n=base.n, m=base.m, a=lambda x: factor * base(x),
                                              c0=factor * base.c0, c1=factor * base.c1))
    return Integrand(n=f.n, m=f.m, p=f.p, value_fn=lambda x, e: factor * f.value_fn(x, e),
                     grad_fn=lambda x, e: factor * f.grad_fn(x, e), c0=factor * f.c0,
                     c1=factor * f.c1, kind="custom")


def _added(f: Integrand, t: float) -> Integrand:
    """f + t |eta|^2 (quadratic f only)."""
    from .integrand import OperatorCoefficients, quadratic

    base = f.params["coefficients"]
    eye = np.eye(base.m)
    return quadratic(OperatorCoefficients(n=base.n, m=base.m, a=lambda x: base(x) + 2 * t * eye,
                                          c0=base.c0 + 2 * t, c1=base.c1 + 2 * t))


def _run_gamma(cfg, frame, grid, timing):
    f = build_integrand(cfg.integrand, frame)
    if cfg.family == "add" and not f.is_quadratic:
        raise ConfigError(["sweep.family: 'add' needs a quadratic integrand"])
    seq = [_scaled(f, 1 + 1 / h) if cfg.family == "scale" else _added(f, 1 / h) for h in cfg.h]
    g = build_lower_order(cfg.lower_order, frame.n)
    rep = pointwise_gamma_experiment(seq, f, g, build_dirichlet(cfg.dirichlet), grid, frame,
                                     indices=cfg.h, tol=_solver_tol(cfg), workers=cfg.threads,
                                     solve_kw=_solve_kw(cfg))
    return _conv_output(rep, timing, index_name="h")


def _check_rows(reports, timing):
    rows = [{"check": r.name, "worst": r.worst, "passed": r.passed, "n_samples": r.n_samples}
            for r in reports]
    steps = [{"name": r.name, "status": "ok" if r.passed else "failed",
              "metrics": {"worst": r.worst}} for r in reports]
    return ["check", "worst", "passed", "n_samples"], rows, steps


def _run_gradcheck(cfg, frame, grid, timing):
    from .integrand import CheckReport

    f = build_integrand(cfg.integrand, frame)
    n = int(cfg.checks.get("n_samples", 1000))
    reports = [check_gradient(f, n_samples=n, seed=cfg.seed, grid=grid)]
    prob = DiscreteProblem(grid, build_x_operator(grid, frame), f,
                           build_lower_order(cfg.lower_order, frame.n), build_dirichlet(cfg.dirichlet))
    value, gradient = assemble_functional(prob)
    rng = np.random.default_rng(cfg.seed)
    z = rng.normal(size=grid.interior_index.size)
    gz = gradient(z)
    errs = []
    for _ in range(20):
        d = rng.normal(size=z.size)
        step = 1e-5
        fd = (value(z + step * d) - value(z - step * d)) / (2 * step)
        errs.append(abs(fd - gz @ d) / max(abs(gz @ d), 1e-12))
    worst = float(max(errs))
    reports.append(CheckReport("functional_gradient", worst <= 1e-6, 20, worst))
    cols, rows, steps = _check_rows(reports, timing)
    return cols, rows, steps, {}


def _run_propcheck(cfg, frame, grid, timing):
    f = build_integrand(cfg.integrand, frame)
    n = int(cfg.checks.get("n_samples", 1000))
    alpha = float(cfg.checks.get("alpha", min(1.0, f.p - 1)))
    cbar = float(cfg.checks.get("cbar", 2 * f.c1 * f.p * max(1.0, f.p - 1)))
    reports = [
        check_growth(f, grid, n, cfg.seed),
        check_convexity(f, n, cfg.seed, grid=grid),
        check_hoelder_gradient(f, alpha, cbar, n, b=float(cfg.checks.get("hoelder_b", 0.0)),
                               seed=cfg.seed, grid=grid),
        check_local_lipschitz(f, n, cfg.seed, grid=grid),
    ]
    cols, rows, steps = _check_rows(reports, timing)
    return cols, rows, steps, {}


_RUNNERS = {
    "poincare": _run_poincare,
    "cell": _run_cell,
    "effective-matrix": _run_effective_matrix,
    "homogenize": _run_homogenize,
    "hconv": _run_hconv,
    "gamma-pointwise": _run_gamma,
    "gradcheck": _run_gradcheck,
    "propcheck": _run_propcheck,
}


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def run(config: ExperimentConfig, output: Optional[Path] = None) -> RunManifest:
    """Execute an experiment and write ``results.csv``, ``report.json`` and ``manifest.json``."""
    out = Path(output or config.output)
    manifest = RunManifest(config_hash=config.config_hash(), tool_version=__version__,
                           kind=config.kind, started=_now())
    timing = (lambda t: t) if config.record_timing else (lambda t: 0.0)
    try:
        frame = resolve_frame(config)
        grid = build_grid(config.box, config.res)
        result = _RUNNERS[config.kind](config, frame, grid, timing)
    except ConfigError as exc:
        manifest.status, manifest.exit_code, manifest.message = "config error", EXIT_CONFIG, str(exc)
        manifest.finished = _now()
        return manifest
    except (SolverError, ArithmeticError) as exc:
        manifest.status, manifest.exit_code, manifest.message = "solver failure", EXIT_SOLVER, str(exc)
        manifest.finished = _now()
        manifest.outputs = ["manifest.json"]
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(manifest.to_json())
        return manifest
    cols, rows, steps, detail = result[:4]
    partial = result[4] if len(result) > 4 else False
    if any(s["status"] not in ("ok",) for s in steps if config.kind not in ("gradcheck", "propcheck")):
        partial = True
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "results.csv", cols, rows)
    report = _jsonable({"schema_version": SCHEMA_VERSION, "kind": config.kind,
                        "config": config.to_dict(), "steps": steps, "detail": detail})
    if not config.record_timing:
        report = _drop_timing(report)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out / "config.toml").write_text(dump_config(config))
    manifest.steps = _jsonable(steps)
    manifest.outputs = ["results.csv", "report.json", "config.toml", "manifest.json"]
    if partial:
        manifest.status, manifest.exit_code = "solver failure", EXIT_SOLVER
        manifest.message = "one or more solves did not converge"
    elif config.kind in ("gradcheck", "propcheck") and not all(r["passed"] for r in rows):
        manifest.status = "checks failed"
    manifest.finished = _now()
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


_SUMMARY_HEADER = f"{'step':<24} {'index':>12} {'status':<14} metrics"


def summarize(manifest: RunManifest) -> str:
    """Fixed-format table, one line per step, sweep steps ordered by decreasing eps."""
    lines = [_SUMMARY_HEADER]
    steps = list(manifest.steps)
    if steps and all("eps" in s for s in steps):
        steps.sort(key=lambda s: -float(s["eps"]) if s.get("name") != "gamma-pointwise" else float(s["eps"]))
    for s in steps:
        idx = s.get("eps", "")
        idx = format(float(idx), ".6g") if idx != "" else "-"
        metrics = " ".join(f"{k}={format(v, '.6g') if isinstance(v, float) else v}"
                           for k, v in sorted(s.get("metrics", {}).items()))
        lines.append(f"{s['name']:<24} {idx:>12} {s['status']:<14} {metrics}".rstrip())
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="xvariational", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("-o", "--output", help="output directory (overrides the config)")
    p_run.add_argument("-j", "--threads", type=int,
                       default=int(os.environ.get(THREADS_ENV, "0")) or None)
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")
    p_sum = sub.add_parser("summarize", help="print a manifest as a table")
    p_sum.add_argument("manifest")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    if args.command == "summarize":
        print(summarize(RunManifest.load(args.manifest)))
        return EXIT_OK
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(f"{args.config}: ok ({cfg.kind})")
        return EXIT_OK
    if args.threads:
        cfg.threads = args.threads
    out = Path(args.output) if args.output else None
    if out is None and cfg.source and not Path(cfg.output).is_absolute():
        out = Path.cwd() / cfg.output
    manifest = run(cfg, out)
    if manifest.exit_code == EXIT_CONFIG:
        print(f"config error: {manifest.message}", file=sys.stderr)
    elif manifest.exit_code == EXIT_SOLVER and manifest.message:
        print(f"solver failure: {manifest.message}", file=sys.stderr)
    if manifest.steps:
        print(summarize(manifest))
    return manifest.exit_code


if __name__ == "__main__":
    sys.exit(main())

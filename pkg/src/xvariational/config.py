"""Experiment configuration files (TOML) and their validation."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import tomli
import tomli_w

from .expr import ExpressionError, compile_expression
from .frame import FrameError, frame_from_tag
from .gammalab import DEFAULT_EPS
from .integrand import OperatorCoefficients, Integrand, LowerOrderTerm, linear_quadratic, p_power, quadratic

__all__ = ["ExperimentConfig", "ConfigError", "KINDS", "parse_config", "parse_config_text",
           "dump_config", "build_integrand", "build_lower_order", "build_dirichlet", "DEFAULT_EPS"]

KINDS = ("poincare", "cell", "effective-matrix", "homogenize", "hconv", "gamma-pointwise",
         "gradcheck", "propcheck")
_NEEDS_EPS = {"cell", "effective-matrix", "homogenize", "hconv"}
_NEEDS_INTEGRAND = {"cell", "effective-matrix", "homogenize", "hconv", "gamma-pointwise",
                    "gradcheck", "propcheck"}

_TOP = {"kind", "frame", "seed", "output", "threads", "domain", "integrand", "lower_order",
        "dirichlet", "sweep", "cell", "solver", "checks", "report"}
_SECTIONS = {
    "domain": {"box", "res"},
    "integrand": {"kind", "coefficient", "matrix", "bounds", "p"},
    "lower_order": {"mu", "rhs", "rhs_bound"},
    "dirichlet": {"kind", "eta", "offset"},
    "sweep": {"eps", "h", "family"},
    "cell": {"res", "eta"},
    "solver": {"tol", "max_iter", "memory", "preconditioner", "poincare_tol"},
    "checks": {"n_samples", "alpha", "cbar", "hoelder_b"},
    "report": {"record_timing"},
}


class ConfigError(ValueError):
    """Carries every problem found in a configuration."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ExperimentConfig:
    kind: str
    frame: str
    box: list
    res: list
    integrand: dict = field(default_factory=dict)
    lower_order: dict = field(default_factory=dict)
    dirichlet: dict = field(default_factory=lambda: {"kind": "zero"})
    eps: list = field(default_factory=list)
    h: list = field(default_factory=list)
    family: str = "scale"
    cell: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    seed: int = 0
    output: str = "out"
    threads: int = 1
    record_timing: bool = False
    source: Optional[str] = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "frame": self.frame, "seed": self.seed, "output": self.output,
             "threads": self.threads,
             "domain": {"box": [list(b) for b in self.box], "res": list(self.res)},
             "dirichlet": dict(self.dirichlet),
             "solver": dict(self.solver), "report": {"record_timing": self.record_timing}}
        if self.integrand:
            d["integrand"] = dict(self.integrand)
        if self.lower_order:
            d["lower_order"] = dict(self.lower_order)
        sweep = {}
        if self.eps:
            sweep["eps"] = list(self.eps)
        if self.h:
            sweep["h"] = list(self.h)
        if self.kind == "gamma-pointwise":
            sweep["family"] = self.family
        if sweep:
            d["sweep"] = sweep
        if self.cell:
            d["cell"] = dict(self.cell)
        if self.checks:
            d["checks"] = dict(self.checks)
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _is_expr(x) -> bool:
    return _num(x) or isinstance(x, str)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror}"]) from None
    cfg = parse_config_text(text, base=path.parent)
    cfg.source = str(path)
    return cfg


def parse_config_text(text: str, base: Optional[Path] = None) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    return _validate(raw, base)


def _validate(raw: dict, base: Optional[Path]) -> ExperimentConfig:
    errors = []
    for key in raw:
        if key not in _TOP:
            errors.append(f"unknown key {key!r}")
    for sec, allowed in _SECTIONS.items():
        val = raw.get(sec)
        if val is None:
            continue
        if not isinstance(val, dict):
            errors.append(f"{sec}: must be a section")
            continue
        for key in val:
            if key not in allowed:
                errors.append(f"unknown key {sec}.{key!r}")

    kind = raw.get("kind")
    if kind not in KINDS:
        errors.append(f"kind: must be one of {', '.join(KINDS)} (got {kind!r})")

    n = None
    tag = raw.get("frame")
    if not isinstance(tag, str):
        errors.append("frame: missing or not a string tag")
    else:
        if tag.startswith("custom:") and base is not None:
            p = Path(tag[7:])
            if not p.is_absolute():
                tag = f"custom:{base / p}"
        try:
            n = frame_from_tag(tag).n
        except (FrameError, OSError, ValueError) as exc:
            errors.append(f"frame: {exc}")

    domain = raw.get("domain") if isinstance(raw.get("domain"), dict) else {}
    box = domain.get("box")
    if box is None:
        errors.append("domain.box: missing")
        box = []
    elif (not isinstance(box, list) or not box
          or not all(isinstance(b, list) and len(b) == 2 and all(_num(v) for v in b) for b in box)):
        errors.append("domain.box: must be a list of [lo, hi] pairs")
        box = []
    else:
        box = [[float(lo), float(hi)] for lo, hi in box]
        if any(lo >= hi for lo, hi in box):
            errors.append("domain.box: need lo < hi on every axis")
        if n is not None and len(box) != n:
            errors.append(f"domain.box: frame needs {n} axes, got {len(box)}")
    res = domain.get("res")
    if res is None:
        errors.append("domain.res: missing")
        res = []
    else:
        res = res if isinstance(res, list) else [res]
        if not all(isinstance(r, int) and not isinstance(r, bool) for r in res):
            errors.append("domain.res: must be integers")
        elif any(r < 2 for r in res):
            errors.append("domain.res: every resolution must be >= 2")
        elif box and len(res) not in (1, len(box)):
            errors.append("domain.res: one entry or one per axis")
        elif box and len(res) == 1:
            res = res * len(box)

    integrand = dict(raw.get("integrand") or {})
    if kind in _NEEDS_INTEGRAND and not integrand:
        errors.append("integrand: section required for this kind")
    if integrand:
        ik = integrand.get("kind")
        if ik not in ("quadratic", "p_power"):
            errors.append("integrand.kind: must be 'quadratic' or 'p_power'")
        if "coefficient" in integrand and "matrix" in integrand:
            errors.append("integrand: give either coefficient or matrix, not both")
        exprs = []
        if "coefficient" in integrand:
            exprs.append(integrand["coefficient"])
        if "matrix" in integrand:
            mat = integrand["matrix"]
            if ik != "quadratic":
                errors.append("integrand.matrix: only for quadratic integrands")
            if not (isinstance(mat, list) and mat and all(isinstance(r, list) and len(r) == len(mat) for r in mat)):
                errors.append("integrand.matrix: must be a square list of lists")
            else:
                exprs.extend(v for r in mat for v in r)
        if "coefficient" not in integrand and "matrix" not in integrand:
            errors.append("integrand: coefficient or matrix required")
        for e in exprs:
            if not _is_expr(e):
                errors.append(f"integrand: coefficient entry {e!r} is not an expression")
                continue
            try:
                compile_expression(e, n)
            except ExpressionError as exc:
                errors.append(f"integrand: {exc}")
        if ik == "p_power":
            p = integrand.get("p")
            if not _num(p):
                errors.append("integrand.p: required number for p_power")
            elif p <= 1:
                errors.append(f"integrand.p: must exceed 1 (got {p})")
        elif "p" in integrand and (not _num(integrand["p"]) or integrand["p"] != 2):
            errors.append("integrand.p: quadratic integrands have p = 2")
        bounds = integrand.get("bounds")
        if bounds is not None:
            if not (isinstance(bounds, list) and len(bounds) == 2 and all(_num(b) for b in bounds)
                    and 0 < bounds[0] <= bounds[1]):
                errors.append("integrand.bounds: need [lo, hi] with 0 < lo <= hi")
        elif not errors and not _constant_integrand(integrand, n):
            errors.append("integrand.bounds: required for variable coefficients")

    lower = dict(raw.get("lower_order") or {})
    if lower:
        if "mu" in lower and (not _num(lower["mu"]) or lower["mu"] < 0):
            errors.append("lower_order.mu: must be a nonnegative number")
        if "rhs" in lower:
            if not _is_expr(lower["rhs"]):
                errors.append("lower_order.rhs: must be an expression")
            else:
                try:
                    compile_expression(lower["rhs"], n)
                except ExpressionError as exc:
                    errors.append(f"lower_order.rhs: {exc}")

    dirichlet = dict(raw.get("dirichlet") or {"kind": "zero"})
    dk = dirichlet.get("kind", "zero")
    dirichlet["kind"] = dk
    if dk not in ("zero", "affine"):
        errors.append("dirichlet.kind: must be 'zero' or 'affine'")
    elif dk == "affine":
        eta = dirichlet.get("eta")
        if not (isinstance(eta, list) and eta and all(_num(v) for v in eta)):
            errors.append("dirichlet.eta: list of numbers required for affine data")
    if "offset" in dirichlet and not _num(dirichlet["offset"]):
        errors.append("dirichlet.offset: must be a number")

    sweep = raw.get("sweep") if isinstance(raw.get("sweep"), dict) else {}
    eps = sweep.get("eps")
    if eps is None:
        eps = list(DEFAULT_EPS) if kind in _NEEDS_EPS else []
    elif not (isinstance(eps, list) and eps and all(_num(e) for e in eps)):
        errors.append("sweep.eps: must be a nonempty list of numbers")
        eps = []
    elif any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        errors.append("sweep.eps: must be positive and strictly decreasing")
    hs = sweep.get("h", [1, 2, 4, 8, 16] if kind == "gamma-pointwise" else [])
    if not (isinstance(hs, list) and all(_num(h) and h > 0 for h in hs)):
        errors.append("sweep.h: must be a list of positive numbers")
        hs = []
    family = sweep.get("family", "scale")
    if family not in ("scale", "add"):
        errors.append("sweep.family: must be 'scale' or 'add'")

    cell = dict(raw.get("cell") or {})
    if "res" in cell:
        cr = cell["res"]
        crl = cr if isinstance(cr, list) else [cr]
        if not all(isinstance(r, int) and not isinstance(r, bool) and r >= 2 for r in crl):
            errors.append("cell.res: integers >= 2 required")
    elif kind in {"cell", "effective-matrix", "homogenize", "hconv"}:
        cell["res"] = res[0] if res else 64
    if kind == "cell":
        etas = cell.get("eta")
        if not (isinstance(etas, list) and etas and all(isinstance(e, list) and all(_num(v) for v in e) for e in etas)):
            errors.append("cell.eta: list of slope vectors required")

    solver = dict(raw.get("solver") or {})
    for key, lo in (("tol", 0.0), ("poincare_tol", 0.0)):
        if key in solver and (not _num(solver[key]) or solver[key] <= lo):
            errors.append(f"solver.{key}: must be a positive number")
    for key in ("max_iter", "memory"):
        if key in solver and (not isinstance(solver[key], int) or solver[key] < 1):
            errors.append(f"solver.{key}: must be a positive integer")
    if "preconditioner" in solver and not isinstance(solver["preconditioner"], bool):
        errors.append("solver.preconditioner: must be true or false")

    checks = dict(raw.get("checks") or {})
    if "n_samples" in checks and (not isinstance(checks["n_samples"], int) or checks["n_samples"] < 1):
        errors.append("checks.n_samples: must be a positive integer")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append("seed: must be a nonnegative integer")
    threads = raw.get("threads", 1)
    if not isinstance(threads, int) or threads < 1:
        errors.append("threads: must be a positive integer")
    output = raw.get("output", "out")
    if not isinstance(output, str):
        errors.append("output: must be a path string")
    record = (raw.get("report") or {}).get("record_timing", False)
    if not isinstance(record, bool):
        errors.append("report.record_timing: must be true or false")

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(kind=kind, frame=raw["frame"], box=box, res=res, integrand=integrand,
                            lower_order=lower, dirichlet=dirichlet, eps=[float(e) for e in eps],
                            h=[float(h) for h in hs], family=family, cell=cell, solver=solver,
                            checks=checks, seed=seed, output=output, threads=threads,
                            record_timing=record)


def _constant_integrand(spec: dict, n) -> bool:
    entries = [spec["coefficient"]] if "coefficient" in spec else [v for r in spec["matrix"] for v in r]
    return all(compile_expression(e, n).is_constant for e in entries)


# -- builders -------------------------------------------------------------------------


def resolve_frame(cfg: ExperimentConfig):
    tag = cfg.frame
    if tag.startswith("custom:") and cfg.source:
        p = Path(tag[7:])
        if not p.is_absolute():
            tag = f"custom:{Path(cfg.source).parent / p}"
    return frame_from_tag(tag)


def build_coefficients(spec: dict, frame) -> OperatorCoefficients:
    n, m = frame.n, frame.m
    if "matrix" in spec:
        entries = [[compile_expression(v, n) for v in row] for row in spec["matrix"]]
        if len(entries) != m:
            raise ConfigError([f"integrand.matrix: frame has {m} fields, matrix is {len(entries)}x{len(entries)}"])

        def a(x):
            return np.stack([np.stack([e(x) for e in row], axis=-1) for row in entries], axis=-2)
    else:
        coef = compile_expression(spec["coefficient"], n)
        eye = np.eye(m)

        def a(x):
            return coef(x)[:, None, None] * eye

    bounds = spec.get("bounds")
    if bounds is None:
        mat = a(np.zeros((1, n)))[0]
        ev = np.linalg.eigvalsh(mat)
        bounds = (float(ev[0]), float(ev[-1]))
    return OperatorCoefficients(n=n, m=m, a=a, c0=float(bounds[0]), c1=float(bounds[1]),
                                label=str(spec.get("coefficient", "matrix")))


def build_integrand(spec: dict, frame) -> Integrand:
    if spec["kind"] == "quadratic":
        return quadratic(build_coefficients(spec, frame))
    coef = compile_expression(spec["coefficient"], frame.n)
    bounds = spec.get("bounds")
    if bounds is None:
        c = float(coef(np.zeros((1, frame.n)))[0])
        return p_power(c, float(spec["p"]), frame.m, frame.n)
    return p_power(coef, float(spec["p"]), frame.m, frame.n, c_bounds=tuple(bounds))


def build_lower_order(spec: dict, n: int) -> Optional[LowerOrderTerm]:
    if not spec:
        return None
    rhs = compile_expression(spec.get("rhs", 0.0), n)
    if rhs.is_constant:
        rhs_val = float(rhs(np.zeros((1, n)))[0])
        return linear_quadratic(float(spec.get("mu", 0.0)), rhs_val)
    return linear_quadratic(float(spec.get("mu", 0.0)), rhs, rhs_bound=spec.get("rhs_bound"))


def build_dirichlet(spec: dict):
    from .frame import HAffine

    if spec.get("kind", "zero") == "zero":
        return float(spec.get("offset", 0.0))
    return HAffine(tuple(spec["eta"]), float(spec.get("offset", 0.0)))

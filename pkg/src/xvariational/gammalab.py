"""Convergence experiments: cell estimates of homogenized integrands, convergence of
minima, minimizers and momenta, and H-convergence of divergence-form operators.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .frame import Frame, HAffine
from .integrand import (
    Integrand,
    LowerOrderTerm,
    OperatorCoefficients,
    linear_quadratic,
    momentum_map,
    periodic_compose,
    quadratic,
)
from .mesh import (
    DiscreteField,
    GradientField,
    Grid,
    MeshError,
    apply_x,
    build_grid,
    build_x_operator,
    l2_norm,
)
from .solver import DiscreteProblem, SolveReport, solve

__all__ = [
    "EffectiveIntegrandEstimate",
    "EffectiveMatrixEstimate",
    "ConvergenceStep",
    "ConvergenceReport",
    "TestFieldBattery",
    "PairingResult",
    "PeriodicFamily",
    "ExperimentError",
    "DEFAULT_EPS",
    "effective_integrand",
    "effective_matrix",
    "weak_pairing_residual",
    "homogenization_experiment",
    "hconvergence_experiment",
    "pointwise_gamma_experiment",
]


DEFAULT_EPS = [1 / 4, 1 / 8, 1 / 16, 1 / 32, 1 / 64]


class ExperimentError(ValueError):
    pass


def _map(fn, items, workers: int = 1):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _check_decreasing(eps_list):
    eps = [float(e) for e in eps_list]
    if not eps or any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ExperimentError(f"eps_list must be positive and strictly decreasing, got {eps}")
    return eps


# -- effective integrand ----------------------------------------------------------


@dataclass
class EffectiveIntegrandEstimate:
    eta: tuple
    eps_list: list
    values: list
    affine_bounds: list
    extrapolated: float
    cell_resolution: tuple
    richardson: Optional[float] = None
    increments: list = field(default_factory=list)
    converged: bool = True
    reports: list = field(default_factory=list, repr=False)


def _cell(frame: Frame, cell_res):
    res = np.broadcast_to(np.atleast_1d(cell_res), (frame.n,))
    grid = build_grid([(-1.0, 1.0)] * frame.n, res)
    return grid, build_x_operator(grid, frame)


def effective_integrand(f: Integrand, frame: Frame, eta, eps_list, cell_res,
                        tol: Optional[float] = None, workers: int = 1,
                        _cell_cache=None, solve_kw: Optional[dict] = None) -> EffectiveIntegrandEstimate:
    """Estimate f0(eta) by minimizing the eps-oscillating energy on Q = (-1, 1)^n
    with the H-affine datum l_eta on the boundary, averaged over |Q|.
    """
    eps = _check_decreasing(eps_list)
    eta = tuple(float(v) for v in np.atleast_1d(eta))
    if len(eta) != f.m:
        raise ExperimentError("eta has the wrong dimension")
    grid, xop = _cell_cache or _cell(frame, cell_res)
    datum = HAffine(eta)
    vol = grid.volume
    eta_sites = np.broadcast_to(np.asarray(eta), (grid.cell_count, f.m))

    def one(e):
        fe = periodic_compose(f, frame, e)
        prob = DiscreteProblem(grid, xop, fe, None, datum)
        rep = solve(prob, tol=tol, **(solve_kw or {}))
        bound = float(grid.site_weights @ fe.value_fn(grid.centers, eta_sites)) / vol
        return rep.min_value / vol, bound, rep

    out = _map(one, eps, workers)
    values = [v for v, _, _ in out]
    reports = [r for _, _, r in out]
    rich = None
    if len(eps) >= 3:
        e1, e2 = eps[-2], eps[-1]
        rich = (e1 * values[-1] - e2 * values[-2]) / (e1 - e2)
    return EffectiveIntegrandEstimate(
        eta=eta, eps_list=eps, values=values, affine_bounds=[b for _, b, _ in out],
        extrapolated=values[-1], cell_resolution=grid.res, richardson=rich,
        increments=[abs(a - b) for a, b in zip(values, values[1:])],
        converged=all(r.converged for r in reports), reports=reports,
    )


@dataclass
class EffectiveMatrixEstimate:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    in_bounds: bool
    per_eps: list
    estimates: dict = field(repr=False)
    converged: bool = True


def _polarize(vals: dict, m: int, idx: int) -> np.ndarray:
    a = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            a[i, j] = vals[(i, j)][idx] - vals[(i,)][idx] - vals[(j,)][idx]
    return 0.5 * (a + a.T)


def effective_matrix(f: Integrand, frame: Frame, eps_list, cell_res, tol: Optional[float] = None,
                     workers: int = 1, bound_tol: float = 1e-6,
                     solve_kw: Optional[dict] = None) -> EffectiveMatrixEstimate:
    """Effective matrix of a quadratic integrand by polarization of f0 estimates."""
    if not f.is_quadratic:
        raise ExperimentError("effective_matrix needs a quadratic integrand")
    m = f.m
    cache = _cell(frame, cell_res)
    eye = np.eye(m)
    keys = [(i,) for i in range(m)] + [(i, j) for i in range(m) for j in range(i, m)]

    def slope(key):
        return eye[key[0]] if len(key) == 1 else eye[key[0]] + eye[key[1]]

    ests = {k: effective_integrand(f, frame, slope(k), eps_list, cell_res, tol, workers, cache,
                                     solve_kw)
            for k in keys}
    vals = {k: e.values for k, e in ests.items()}
    for i in range(m):
        for j in range(i):
            vals[(i, j)] = vals[(j, i)]
    n_eps = len(ests[keys[0]].eps_list)
    per_eps = [_polarize(vals, m, k) for k in range(n_eps)]
    mat = per_eps[-1]
    ev = np.linalg.eigvalsh(mat)
    lo, hi = 2 * f.c0, 2 * f.c1
    ok = bool(ev[0] >= lo - bound_tol and ev[-1] <= hi + bound_tol)
    return EffectiveMatrixEstimate(matrix=mat, eigenvalues=ev, in_bounds=ok, per_eps=per_eps,
                                   estimates=ests, converged=all(e.converged for e in ests.values()))


# -- weak convergence ----------------------------------------------------------------


@dataclass
class TestFieldBattery:
    """Site-sampled m-vector test fields, each normalized to unit L^q norm."""

    fields: list
    labels: list

    __test__ = False  # not a pytest class

    @property
    def count(self) -> int:
        return len(self.fields)

    @classmethod
    def from_functions(cls, sites, weights, m: int, functions, labels=None, q: float = 2.0):
        fields, names = [], []
        for k, fn in enumerate(functions):
            vals = np.asarray(fn(sites), dtype=float).reshape(len(sites))
            for j in range(m):
                psi = np.zeros((len(sites), m))
                psi[:, j] = vals
                norm = float(weights @ np.abs(vals) ** q) ** (1 / q)
                if norm == 0:
                    continue
                fields.append(GradientField(psi / norm, sites, weights))
                base = labels[k] if labels else f"f{k}"
                names.append(f"{base}*e{j + 1}")
        return cls(fields, names)

    @classmethod
    def default(cls, grid: Grid, m: int, q: float = 2.0):
        """Per component: 1, x_i, sin(pi x_i), cos(pi x_i) for every axis i."""
        fns, labels = [lambda x: np.ones(len(x))], ["1"]
        for i in range(grid.n):
            fns += [lambda x, i=i: x[:, i],
                    lambda x, i=i: np.sin(np.pi * x[:, i]),
                    lambda x, i=i: np.cos(np.pi * x[:, i])]
            labels += [f"x{i + 1}", f"sin(pi x{i + 1})", f"cos(pi x{i + 1})"]
        return cls.from_functions(grid.centers, grid.site_weights, m, fns, labels, q)


@dataclass
class PairingResult:
    residuals: list
    max_residual: float
    strong_distance: float
    labels: list = field(default_factory=list)


def weak_pairing_residual(phi_seq: GradientField, phi_ref: GradientField,
                          battery: TestFieldBattery) -> PairingResult:
    """|sum_sites w <phi_seq - phi_ref, psi_k>| for every test field, plus the L2 distance."""
    diff = phi_seq - phi_ref
    res = []
    for psi in battery.fields:
        if psi.samples.shape != diff.samples.shape:
            raise MeshError("test field lives on different sites")
        res.append(abs(float(diff.weights @ np.sum(diff.samples * psi.samples, axis=1))))
    strong = float(np.sqrt(diff.weights @ np.sum(diff.samples ** 2, axis=1)))
    return PairingResult(residuals=res, max_residual=max(res) if res else 0.0,
                         strong_distance=strong, labels=list(battery.labels))


# -- experiment reports ------------------------------------------------------------------


@dataclass
class ConvergenceStep:
    index: float
    min_value: float
    min_gap: float
    l2_minimizer_err: float
    max_pairing_residual: float
    strong_momenta_dist: float
    strong_gradient_dist: float
    wall_time: float
    report: Optional[SolveReport] = field(default=None, repr=False)
    minimizer: Optional[DiscreteField] = field(default=None, repr=False)
    momenta: Optional[GradientField] = field(default=None, repr=False)
    pairing: Optional[PairingResult] = field(default=None, repr=False)
    status: str = "ok"

    def row(self) -> dict:
        return {"eps": self.index, "min_value": self.min_value,
                "l2_minimizer_err": self.l2_minimizer_err,
                "max_pairing_residual": self.max_pairing_residual,
                "strong_momenta_dist": self.strong_momenta_dist,
                "wall_time": self.wall_time}


@dataclass
class ConvergenceReport:
    kind: str
    steps: List[ConvergenceStep]
    reference_min: float
    reference: Optional[SolveReport] = field(default=None, repr=False)
    reference_momenta: Optional[GradientField] = field(default=None, repr=False)
    effective: Optional[object] = field(default=None, repr=False)
    partial: bool = False
    notes: list = field(default_factory=list)

    @property
    def indices(self):
        return [s.index for s in self.steps]

    def column(self, name: str) -> list:
        return [getattr(s, name) for s in self.steps]

    def validate(self) -> bool:
        cols = ("min_value", "min_gap", "l2_minimizer_err", "max_pairing_residual",
                "strong_momenta_dist", "strong_gradient_dist")
        return all(np.isfinite(getattr(s, c)) for s in self.steps for c in cols)

    def gap_trend_ok(self, slack: float = 1.1) -> bool:
        gaps = self.column("min_gap")
        return all(b <= slack * a + 1e-12 for a, b in zip(gaps, gaps[1:]))


def _compare(prob: DiscreteProblem, f: Integrand, rep: SolveReport, ref: SolveReport,
             ref_momenta: GradientField, battery: TestFieldBattery, index, t0) -> ConvergenceStep:
    grid = prob.grid
    xu = apply_x(prob.xop, rep.minimizer)
    mom = momentum_map(f, xu)
    pairing = weak_pairing_residual(mom, ref_momenta, battery)
    xu_ref = apply_x(prob.xop, ref.minimizer)
    return ConvergenceStep(
        index=index, min_value=rep.min_value, min_gap=abs(rep.min_value - ref.min_value),
        l2_minimizer_err=l2_norm(grid, rep.minimizer - ref.minimizer),
        max_pairing_residual=pairing.max_residual,
        strong_momenta_dist=pairing.strong_distance,
        strong_gradient_dist=l2_norm(grid, (xu - xu_ref).samples),
        wall_time=time.perf_counter() - t0, report=rep, minimizer=rep.minimizer,
        momenta=mom, pairing=pairing, status="ok" if rep.converged else "not converged",
    )


def homogenization_experiment(f: Integrand, frame: Frame, g_term: Optional[LowerOrderTerm],
                              phi_datum, eps_list, grid: Grid, cell_res,
                              battery: Optional[TestFieldBattery] = None,
                              effective: Optional[Integrand] = None,
                              tol: Optional[float] = None, workers: int = 1,
                              poincare: Optional[float] = None,
                              solve_kw: Optional[dict] = None) -> ConvergenceReport:
    """Solve the eps-oscillating Dirichlet problems on ``grid`` and compare them with
    the homogenized problem: minima, L2 minimizers, and weak pairings of momenta.

    For quadratic ``f`` the homogenized integrand comes from :func:`effective_matrix`;
    other integrands need ``effective`` supplied.
    """
    eps = _check_decreasing(eps_list)
    xop = build_x_operator(grid, frame)
    notes = []
    base = DiscreteProblem(grid, xop, f, g_term, phi_datum)
    ok, why = base.well_posed(poincare)
    if not ok:
        notes.append(f"well-posedness warning: {why}")
    eff_est = None
    if effective is None:
        if not f.is_quadratic:
            raise ExperimentError("non-quadratic integrands need an explicit effective integrand")
        eff_est = effective_matrix(f, frame, eps, cell_res, tol, workers, solve_kw=solve_kw)
        effective = quadratic(OperatorCoefficients.constant(eff_est.matrix, n=frame.n))
        if not eff_est.in_bounds:
            notes.append("effective matrix eigenvalues outside growth bounds")
    ref = solve(base.with_integrand(effective), tol=tol, **(solve_kw or {}))
    ref_mom = momentum_map(effective, apply_x(xop, ref.minimizer))
    battery = battery or TestFieldBattery.default(grid, f.m)

    def one(e):
        t0 = time.perf_counter()
        fe = periodic_compose(f, frame, e)
        prob = base.with_integrand(fe)
        rep = solve(prob, tol=tol, **(solve_kw or {}))
        return _compare(prob, fe, rep, ref, ref_mom, battery, e, t0)

    steps = _map(one, eps, workers)
    return ConvergenceReport(kind="homogenize", steps=steps, reference_min=ref.min_value,
                             reference=ref, reference_momenta=ref_mom, effective=eff_est,
                             partial=not (ref.converged and all(s.report.converged for s in steps)),
                             notes=notes)


@dataclass
class PeriodicFamily:
    """a^h(x) = base(reduce(delta_{1/eps_h} x)) for a periodic coefficient field ``base``."""

    base: OperatorCoefficients
    frame: Frame
    eps_list: list
    cell_res: object = 256

    def __post_init__(self):
        self.eps_list = _check_decreasing(self.eps_list)

    def members(self) -> List[Integrand]:
        f = quadratic(self.base)
        return [periodic_compose(f, self.frame, e) for e in self.eps_list]


def hconvergence_experiment(a_seq, frame: Frame, mu: float, rhs, grid: Grid,
                            battery: Optional[TestFieldBattery] = None,
                            reference: Optional[OperatorCoefficients] = None,
                            indices: Optional[Sequence] = None, tol: Optional[float] = None,
                            workers: int = 1, solve_kw: Optional[dict] = None) -> ConvergenceReport:
    """Solutions of mu u - div_X(a^h X u) = rhs, u = 0 on the boundary, against the
    limit operator: L2 errors of u_h and weak pairings of the fluxes a^h X u_h.
    """
    xop = build_x_operator(grid, frame)
    eff_est = None
    if isinstance(a_seq, PeriodicFamily):
        fam = a_seq
        members = fam.members()
        indices = fam.eps_list
        if reference is None:
            eff_est = effective_matrix(quadratic(fam.base), frame, fam.eps_list, fam.cell_res, tol,
                                       workers, solve_kw=solve_kw)
            reference = OperatorCoefficients.constant(eff_est.matrix, n=frame.n)
    else:
        if reference is None:
            raise ExperimentError("a reference operator is required for non-periodic families")
        members = [quadratic(a) for a in a_seq]
        indices = list(indices) if indices is not None else list(range(1, len(members) + 1))
    g = linear_quadratic(mu, rhs)
    f_ref = quadratic(reference)
    base = DiscreteProblem(grid, xop, f_ref, g, 0.0)
    ref = solve(base, tol=tol, **(solve_kw or {}))
    ref_mom = momentum_map(f_ref, apply_x(xop, ref.minimizer))
    battery = battery or TestFieldBattery.default(grid, frame.m)

    def one(item):
        idx, fh = item
        t0 = time.perf_counter()
        prob = base.with_integrand(fh)
        rep = solve(prob, tol=tol, **(solve_kw or {}))
        return _compare(prob, fh, rep, ref, ref_mom, battery, idx, t0)

    steps = _map(one, list(zip(indices, members)), workers)
    return ConvergenceReport(kind="hconv", steps=steps, reference_min=ref.min_value, reference=ref,
                             reference_momenta=ref_mom, effective=eff_est,
                             partial=not all(s.report.converged for s in steps))


def pointwise_gamma_experiment(f_seq: Sequence[Integrand], f_lim: Integrand,
                               g_term: Optional[LowerOrderTerm], phi, grid: Grid, frame: Frame,
                               indices: Optional[Sequence] = None,
                               battery: Optional[TestFieldBattery] = None,
                               tol: Optional[float] = None, workers: int = 1,
                               solve_kw: Optional[dict] = None) -> ConvergenceReport:
    """Minimize each F_h + G with datum ``phi`` and compare with the pointwise limit problem."""
    xop = build_x_operator(grid, frame)
    base = DiscreteProblem(grid, xop, f_lim, g_term, phi)
    ref = solve(base, tol=tol, **(solve_kw or {}))
    ref_mom = momentum_map(f_lim, apply_x(xop, ref.minimizer))
    battery = battery or TestFieldBattery.default(grid, frame.m)
    indices = list(indices) if indices is not None else list(range(1, len(f_seq) + 1))

    def one(item):
        idx, fh = item
        t0 = time.perf_counter()
        prob = base.with_integrand(fh)
        rep = solve(prob, tol=tol, **(solve_kw or {}))
        return _compare(prob, fh, rep, ref, ref_mom, battery, idx, t0)

    steps = _map(one, list(zip(indices, f_seq)), workers)
    return ConvergenceReport(kind="gamma-pointwise", steps=steps, reference_min=ref.min_value,
                             reference=ref, reference_momenta=ref_mom,
                             partial=not all(s.report.converged for s in steps))

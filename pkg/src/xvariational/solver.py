"""Discrete minimization of sum_sites w f(x, Xu) + sum_nodes w g(x, u) with Dirichlet data.

Unknowns are the interior nodal values in lexicographic order; boundary
values are fixed by the datum.
"""

from __future__ import annotations

import logging
import time
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .frame import Frame, HAffine, h_affine_eval
from .integrand import Integrand, LowerOrderTerm, quadratic, OperatorCoefficients
from .mesh import DiscreteField, DiscreteXOperator, Grid, build_x_operator

__all__ = [
    "DiscreteProblem",
    "SolveReport",
    "SolverError",
    "NotSPDError",
    "PoincareResult",
    "CoercivityReport",
    "pcg",
    "stiffness_matrix",
    "assemble_functional",
    "solve_quadratic",
    "minimize_convex",
    "solve",
    "poincare_constant",
    "coercivity_margin",
]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class NotSPDError(SolverError):
    """Conjugate gradients met a direction of nonpositive curvature."""


@dataclass(frozen=True, eq=False)
class DiscreteProblem:
    grid: Grid
    xop: DiscreteXOperator
    f: Integrand
    g: Optional[LowerOrderTerm] = None
    dirichlet: object = 0.0

    def __post_init__(self):
        if self.xop.grid is not self.grid:
            raise ValueError("operator was built on a different grid")
        if self.f.m != self.xop.m or self.f.n != self.grid.n:
            raise ValueError("integrand dimensions do not match the operator")

    @classmethod
    def build(cls, grid: Grid, frame: Frame, f: Integrand, g=None, dirichlet=0.0):
        return cls(grid, build_x_operator(grid, frame), f, g, dirichlet)

    def with_integrand(self, f: Integrand, g="keep") -> "DiscreteProblem":
        return DiscreteProblem(self.grid, self.xop, f, self.g if g == "keep" else g, self.dirichlet)

    @property
    def interior(self) -> np.ndarray:
        return self.grid.interior_index

    def boundary_values(self) -> np.ndarray:
        """Full nodal vector carrying the datum on the boundary and 0 inside."""
        grid, d = self.grid, self.dirichlet
        out = np.zeros(grid.node_count)
        mask = grid.boundary_mask
        if isinstance(d, DiscreteField):
            out[mask] = d.values[mask]
        elif isinstance(d, HAffine):
            out[mask] = h_affine_eval(d, grid.nodes[mask])
        elif callable(d):
            out[mask] = np.asarray(d(grid.nodes[mask]), dtype=float)
        else:
            out[mask] = float(d)
        return out

    def datum_extension(self) -> np.ndarray:
        """Datum evaluated at every node (affine/callable data) or boundary-only values."""
        d = self.dirichlet
        if isinstance(d, HAffine):
            return h_affine_eval(d, self.grid.nodes)
        if isinstance(d, DiscreteField):
            return d.values.copy()
        if callable(d):
            return np.asarray(d(self.grid.nodes), dtype=float)
        return np.full(self.grid.node_count, float(d))

    def full(self, z: np.ndarray) -> np.ndarray:
        u = self.boundary_values()
        u[self.interior] = z
        return u

    def well_posed(self, poincare: Optional[float] = None) -> Tuple[bool, str]:
        """Check -c0 * c_Omega < d0 for lower-order terms with negative d0."""
        g = self.g
        if g is None or g.d0 >= 0:
            return True, "ok"
        if poincare is None:
            return False, "d0 < 0 and no Poincare estimate supplied"
        note = "" if self.f.p == 2 else " (p=2 Poincare constant used as surrogate)"
        if g.d0 > -self.f.c0 * poincare:
            return True, "ok" + note
        return False, f"d0={g.d0} <= -c0*c_Omega={-self.f.c0 * poincare}" + note


@dataclass
class SolveReport:
    minimizer: DiscreteField
    min_value: float
    iterations: int
    final_grad_norm: float
    converged: bool
    wall_time: float
    method: str = ""
    tolerance: float = 0.0
    message: str = ""
    history: list = field(default_factory=list, repr=False)

    def to_dict(self, include_minimizer: bool = False) -> dict:
        out = {
            "min_value": self.min_value,
            "iterations": self.iterations,
            "final_grad_norm": self.final_grad_norm,
            "converged": self.converged,
            "wall_time": self.wall_time,
            "method": self.method,
            "tolerance": self.tolerance,
            "message": self.message,
        }
        if include_minimizer:
            out["minimizer"] = self.minimizer.values.tolist()
        return out


# -- linear algebra ------------------------------------------------------------


BACKWARD_FLOOR = 1e-14


def pcg(apply_a: Callable[[np.ndarray], np.ndarray], b: np.ndarray, x0=None,
        diag: Optional[np.ndarray] = None, tol: float = 1e-10, max_iter: Optional[int] = None,
        label: str = "system", anorm: Optional[float] = None):
    """Jacobi-preconditioned conjugate gradients.

    Stops when ``||r|| <= tol * ||b||`` for the true residual. With ``anorm``
    (an estimate of ``||A||``) it also stops once the normwise backward error
    ``||r|| / (||A|| ||x|| + ||b||)`` is below ``BACKWARD_FLOOR``: on badly
    conditioned systems the relative residual cannot go lower in double precision.

    Returns ``(x, iterations, rel_residual, converged)``.
    Raises :class:`NotSPDError` on a direction with ``p^T A p <= 0``.
    """
    n = b.shape[0]
    max_iter = max_iter or max(10 * n, 100)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        bnorm = 1.0
        if x0 is None:
            return x, 0, 0.0, True
    inv_d = None if diag is None else 1.0 / diag
    r = b - apply_a(x)
    res = float(np.linalg.norm(r))
    if res <= tol * bnorm:
        return x, 0, res / bnorm, True
    z = r if inv_d is None else inv_d * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iter + 1):
        ap = apply_a(p)
        curv = float(p @ ap)
        if curv <= 0:
            raise NotSPDError(f"nonpositive curvature {curv:.3e} in {label} at CG iteration {it}")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * ap
        res = float(np.linalg.norm(r))
        if res <= tol * bnorm:
            # guard against drift of the recursive residual
            r_true = b - apply_a(x)
            res = float(np.linalg.norm(r_true))
            if res <= tol * bnorm:
                return x, it, res / bnorm, True
            if anorm is not None and res <= BACKWARD_FLOOR * (anorm * np.linalg.norm(x) + bnorm):
                return x, it, res / bnorm, True
            r = r_true
        z = r if inv_d is None else inv_d * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iter, res / bnorm, False


def stiffness_matrix(xop: DiscreteXOperator, matrix_fn) -> sp.csr_matrix:
    """K = X^T diag(w a) X for a site-sampled symmetric coefficient field."""
    grid = xop.grid
    a = matrix_fn(grid.centers)
    w = grid.site_weights
    comps = [xop.component(j) for j in range(xop.m)]
    k = None
    for i in range(xop.m):
        for j in range(xop.m):
            wij = w * a[:, i, j]
            if not np.any(wij):
                continue
            term = comps[i].T @ sp.diags(wij) @ comps[j]
            k = term if k is None else k + term
    if k is None:
        k = sp.csr_matrix((grid.node_count, grid.node_count))
    k = sp.csr_matrix(k)
    # exact symmetry: the two triangular halves are assembled in different orders
    return ((k + k.T) * 0.5).tocsr()


def assemble_functional(prob: DiscreteProblem):
    """Return ``(value, gradient)`` as functions of the interior unknowns."""
    grid, xop, f, g = prob.grid, prob.xop, prob.f, prob.g
    sites, ws = grid.centers, grid.site_weights
    nodes, wn = grid.nodes, grid.quad_weights
    interior = prob.interior
    base = prob.boundary_values()

    def full(z):
        u = base.copy()
        u[interior] = z
        return u

    def value(z):
        u = full(z)
        val = float(ws @ f.value_fn(sites, xop.apply(u)))
        if g is not None:
            val += float(wn @ g.eval_fn(nodes, u))
        return val

    def gradient(z):
        u = full(z)
        mom = f.grad_fn(sites, xop.apply(u)) * ws[:, None]
        gr = xop.apply_t(mom)
        if g is not None:
            gr = gr + wn * g.dgrad_fn(nodes, u)
        return gr[interior]

    return value, gradient


def _quadratic_system(prob: DiscreteProblem):
    if not prob.f.is_quadratic:
        raise SolverError("solve_quadratic needs a quadratic integrand")
    g = prob.g
    if g is not None and not g.is_linear_quadratic:
        raise SolverError("solve_quadratic needs a lower-order term of the form mu s^2/2 - rhs s")
    grid = prob.grid
    k = stiffness_matrix(prob.xop, prob.f.matrix_fn)
    wn = grid.quad_weights
    mu = g.mu if g is not None else 0.0
    rhs = g.rhs_at(grid.nodes) if g is not None else np.zeros(grid.node_count)
    a_full = (k + sp.diags(mu * wn)).tocsr() if mu else k
    interior = prob.interior
    a_ii = a_full[interior][:, interior].tocsr()
    ub = prob.boundary_values()
    b = (wn * rhs - a_full @ ub)[interior]
    return a_ii, b


def solve_quadratic(prob: DiscreteProblem, tol: float = 1e-10, max_iter: Optional[int] = None,
                    precondition: bool = True, x0=None) -> SolveReport:
    """Solve (mu M + K) u = b on interior nodes by preconditioned CG."""
    t0 = time.perf_counter()
    a_ii, b = _quadratic_system(prob)
    diag = a_ii.diagonal() if precondition else None
    if diag is not None and np.any(diag <= 0):
        raise NotSPDError("reduced stiffness has a nonpositive diagonal entry")
    z0 = None if x0 is None else np.asarray(x0, dtype=float)[prob.interior]
    anorm = float(abs(a_ii).sum(axis=1).max()) if a_ii.shape[0] else 0.0
    z, iters, rel, ok = pcg(a_ii.dot, b, x0=z0, diag=diag, tol=tol, max_iter=max_iter,
                            label="reduced stiffness (mu M + K)_II", anorm=anorm)
    u = prob.full(z)
    value, _ = assemble_functional(prob)
    if not ok:
        msg = "CG stagnated before reaching the tolerance"
    elif rel > tol:
        msg = "converged to the roundoff floor (backward error below 1e-14)"
    else:
        msg = "converged"
    return SolveReport(minimizer=DiscreteField(u, prob.grid), min_value=value(z), iterations=iters,
                       final_grad_norm=rel, converged=ok, wall_time=time.perf_counter() - t0,
                       method="pcg", tolerance=tol, message=msg)


def minimize_convex(prob: DiscreteProblem, init=None, tol: float = 1e-8, max_iter: int = 5000,
                    memory: int = 10, armijo: float = 1e-4) -> SolveReport:
    """Limited-memory BFGS with backtracking Armijo line search.

    The gradient is measured in the mass-weighted dual norm
    ``sqrt(sum g_i^2 / w_i)``, which keeps ``tol`` meaningful across resolutions.
    Stops when that norm is at most ``tol * (1 + |value|)``.
    """
    t0 = time.perf_counter()
    value, gradient = assemble_functional(prob)
    interior = prob.interior
    w = prob.grid.quad_weights[interior]
    if init is None:
        z = prob.datum_extension()[interior]
    else:
        init = init.values if isinstance(init, DiscreteField) else np.asarray(init, dtype=float)
        z = init[interior].copy() if init.shape[0] == prob.grid.node_count else init.copy()

    def gnorm(gr):
        return float(np.sqrt(np.sum(gr * gr / w)))

    fz, gz = value(z), gradient(z)
    history = [fz]
    pairs: deque = deque(maxlen=memory)
    converged, message, it = False, "max_iter reached", 0
    while it < max_iter:
        gn = gnorm(gz)
        if gn <= tol * (1 + abs(fz)):
            converged, message = True, "converged"
            break
        # two-loop recursion, initial inverse Hessian gamma * M^{-1}
        q = gz.copy()
        alphas = []
        for s, y, rho in reversed(pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if pairs:
            s, y, _ = pairs[-1]
            gamma = (s @ y) / (y @ (y / w))
        else:
            gamma = 1.0 / max(gn, 1e-300)
        r = gamma * q / w
        for (s, y, rho), a in zip(pairs, reversed(alphas)):
            b = rho * (y @ r)
            r += (a - b) * s
        d = -r
        slope = float(gz @ d)
        if slope >= 0:
            pairs.clear()
            d = -gz / w / max(gn, 1e-300)
            slope = float(gz @ d)
        step = 1.0
        noise = 1e-13 * (1.0 + abs(fz))
        g_new = None
        while True:
            z_new = z + step * d
            f_new = value(z_new)
            if f_new <= fz + armijo * step * slope:
                break
            if abs(f_new - fz) <= noise:
                # values no longer resolve the decrease; fall back on the slope along d
                g_try = gradient(z_new)
                if abs(float(g_try @ d)) <= 0.9 * abs(slope):
                    g_new = g_try
                    break
            step *= 0.5
            if step < 1e-20:
                break
        if step < 1e-20:
            message = "line search failed"
            break
        if g_new is None:
            g_new = gradient(z_new)
        s, y = z_new - z, g_new - gz
        sy = float(s @ y)
        if sy > 1e-300:
            pairs.append((s, y, 1.0 / sy))
        z, fz, gz = z_new, f_new, g_new
        history.append(fz)
        it += 1
        if history[-1] > history[-2] + noise:
            raise SolverError("line search accepted an ascent step")
    else:
        if gnorm(gz) <= tol * (1 + abs(fz)):
            converged, message = True, "converged"
    return SolveReport(minimizer=DiscreteField(prob.full(z), prob.grid), min_value=fz,
                       iterations=it, final_grad_norm=gnorm(gz), converged=converged,
                       wall_time=time.perf_counter() - t0, method="lbfgs", tolerance=tol,
                       message=message, history=history)


def solve(prob: DiscreteProblem, tol: Optional[float] = None, **kw) -> SolveReport:
    """Dispatch to CG for quadratic problems and L-BFGS otherwise.

    Options the chosen method does not take, and options set to None, are ignored.
    """
    kw = {k: v for k, v in kw.items() if v is not None}
    quad = prob.f.is_quadratic and (prob.g is None or prob.g.is_linear_quadratic)
    if quad:
        return solve_quadratic(prob, tol=tol or 1e-10, **{k: v for k, v in kw.items()
                                                          if k in ("max_iter", "precondition", "x0")})
    return minimize_convex(prob, tol=tol or 1e-8, **{k: v for k, v in kw.items()
                                                     if k in ("init", "max_iter", "memory")})


# -- Poincare constant ------------------------------------------------------------


@dataclass
class PoincareResult:
    lambda_min: float
    eigenfield: DiscreteField
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)


def _laplacian_system(grid: Grid, frame: Frame, xop=None):
    xop = xop or build_x_operator(grid, frame)
    eye = OperatorCoefficients.constant(np.eye(frame.m), n=frame.n)
    k = stiffness_matrix(xop, eye.a)
    interior = grid.interior_index
    return xop, k[interior][:, interior].tocsr(), grid.quad_weights[interior]


def poincare_constant(grid: Grid, frame: Frame, tol: float = 1e-8, max_outer: int = 500,
                      shift: float = 0.0, xop=None, inner_tol: float = 1e-12) -> PoincareResult:
    """Smallest eigenvalue of K u = lambda M u on interior nodes.

    Shifted inverse iteration with CG inner solves; stops when the Rayleigh
    quotient changes by at most ``tol`` relative.
    """
    if grid.interior_index.size == 0:
        raise SolverError("grid has no interior nodes")
    xop, k, w = _laplacian_system(grid, frame, xop)
    a = (k - shift * sp.diags(w)).tocsr() if shift else k
    diag = a.diagonal()
    anorm = float(abs(a).sum(axis=1).max())
    v = np.ones(k.shape[0])
    v /= np.sqrt(v @ (w * v))
    lam_prev = np.inf
    history = []
    y = None
    for it in range(1, max_outer + 1):
        y, _, _, ok = pcg(a.dot, w * v, x0=y, diag=diag, tol=inner_tol, label="Poincare inner solve",
                          anorm=anorm)
        norm = np.sqrt(y @ (w * y))
        v = y / norm
        lam = float(v @ (k @ v))
        history.append(lam)
        if abs(lam - lam_prev) <= tol * abs(lam):
            break
        lam_prev = lam
        y = v / lam
    else:
        raise SolverError(f"inverse iteration did not converge in {max_outer} steps")
    full = np.zeros(grid.node_count)
    full[grid.interior_index] = v
    return PoincareResult(lambda_min=lam, eigenfield=DiscreteField(full, grid),
                          iterations=it, converged=True, history=history)


# -- coercivity -----------------------------------------------------------------


@dataclass
class CoercivityReport:
    passed: bool
    k1: float
    k2: float
    c: float
    poincare: float
    worst_margin: float
    n_probes: int
    surrogate: bool = False
    details: dict = field(default_factory=dict)


def _coercivity_constants(c, lam, p, norm_phi_p, norm_xphi_p):
    """k1, k2 with int|Xu|^p - c int|u|^p >= k1 (int|Xu|^p + int|u|^p) - k2 on u - phi zero-trace."""
    cp = max(c, 0.0)
    rho = cp / lam
    if rho >= 1:
        return 0.0, 0.0
    if norm_phi_p == 0 and norm_xphi_p == 0:
        grow, rest = 1.0, 0.0
    else:
        grow = (2.0 / (1.0 + rho)) ** 0.5  # (1 + delta)^(p-1)
        delta = grow ** (1.0 / (p - 1)) - 1.0
        inv = (1.0 + 1.0 / delta) ** (p - 1)
        rest = grow * inv / lam * norm_xphi_p + inv * norm_phi_p
    kappa = grow * grow / lam
    k1 = (1.0 - cp * kappa) / (1.0 + kappa)
    k2 = (1.0 - k1) * rest / kappa
    return k1, k2


def coercivity_margin(prob: DiscreteProblem, c: float, n_probes: int = 50, seed: int = 0,
                      poincare: Optional[PoincareResult] = None, k1: Optional[float] = None,
                      k2: Optional[float] = None) -> CoercivityReport:
    """Probe int|Xu|^p - c int|u|^p >= k1 (int|Xu|^p + int|u|^p) - k2 over u with u = phi on the boundary."""
    grid, xop, p = prob.grid, prob.xop, prob.f.p
    frame = xop.frame
    surrogate = p != 2
    if surrogate:
        warnings.warn("coercivity for p != 2 uses the p = 2 Poincare constant as a surrogate")
    if poincare is None:
        poincare = poincare_constant(grid, frame, xop=xop)
    lam = poincare.lambda_min
    ws, wn = grid.site_weights, grid.quad_weights

    def norms(u):
        xu = xop.apply(u)
        gx = float(ws @ np.sum(xu * xu, axis=1) ** (0.5 * p))
        gu = float(wn @ np.abs(u) ** p)
        return gx, gu

    phi = prob.boundary_values()
    nphi_x, nphi = norms(prob.datum_extension()) if np.any(phi) else (0.0, 0.0)
    auto_k1, auto_k2 = _coercivity_constants(c, lam, p, nphi, nphi_x)
    k1 = auto_k1 if k1 is None else k1
    k2 = auto_k2 if k2 is None else k2

    rng = np.random.default_rng(seed)
    interior = prob.interior
    probes = [np.zeros(interior.size)]
    eig = poincare.eigenfield.values[interior]
    for amp in (1.0, 1e2, 1e4):
        probes.append(amp * eig)
    while len(probes) < n_probes:
        amp = 10.0 ** rng.uniform(-2, 3)
        probes.append(amp * rng.normal(size=interior.size))
    margins = []
    for z in probes[:max(n_probes, 4)]:
        u = prob.full(z)
        gx, gu = norms(u)
        lhs = gx - c * gu
        rhs = k1 * (gx + gu) - k2
        margins.append((lhs - rhs) / (1.0 + abs(lhs) + abs(rhs)))
    worst = float(min(margins))
    passed = bool(worst >= -1e-9) and c < lam
    return CoercivityReport(passed=passed, k1=k1, k2=k2, c=c, poincare=lam, worst_margin=worst,
                            n_probes=len(margins), surrogate=surrogate,
                            details={"margins": margins})

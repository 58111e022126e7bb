"""Integrands f(x, eta) with analytic eta-gradients and their structural checks.

All evaluations are batched: ``x`` is ``(N, n)``, ``eta`` is ``(N, m)``; a
single point may be passed as 1-d arrays, in which case scalars/vectors come
back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .frame import Frame, dilate, periodic_reduce
from .mesh import GradientField, Grid, MeshError

__all__ = [
    "Integrand",
    "IntegrandError",
    "LowerOrderTerm",
    "OperatorCoefficients",
    "CheckReport",
    "quadratic",
    "p_power",
    "custom",
    "periodic_compose",
    "shift",
    "momentum_map",
    "linear_quadratic",
    "power_term",
    "check_growth",
    "check_hoelder_gradient",
    "check_local_lipschitz",
    "check_gradient",
    "check_convexity",
    "check_lower_order_growth",
]

Scalar = Union[float, Callable[[np.ndarray], np.ndarray]]


class IntegrandError(ValueError):
    pass


def _field(val: Scalar, x: np.ndarray) -> np.ndarray:
    if callable(val):
        return np.asarray(val(x), dtype=float).reshape(x.shape[0])
    return np.full(x.shape[0], float(val))


def _batch(x, eta):
    x = np.asarray(x, dtype=float)
    eta = np.asarray(eta, dtype=float)
    single = x.ndim == 1
    if single:
        x, eta = x[None, :], eta[None, :]
    return x, eta, single


@dataclass(frozen=True, eq=False)
class Integrand:
    n: int
    m: int
    p: float
    value_fn: Callable = field(repr=False)
    grad_fn: Callable = field(repr=False)
    c0: float
    c1: float
    a0: Scalar = 0.0
    a1: Scalar = 0.0
    kind: str = "custom"
    matrix_fn: Optional[Callable] = field(default=None, repr=False)
    params: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.p > 1:
            raise IntegrandError(f"exponent p must exceed 1, got {self.p}")
        if not (0 < self.c0 <= self.c1):
            raise IntegrandError(f"growth constants need 0 < c0 <= c1, got ({self.c0}, {self.c1})")

    @property
    def is_quadratic(self) -> bool:
        """True when f(x, eta) = 1/2 <A(x) eta, eta> with ``matrix_fn`` giving A."""
        return self.matrix_fn is not None

    def __call__(self, x, eta):
        x, eta, single = _batch(x, eta)
        out = self.value_fn(x, eta)
        return float(out[0]) if single else out

    def grad(self, x, eta):
        x, eta, single = _batch(x, eta)
        out = self.grad_fn(x, eta)
        return out[0] if single else out

    def a0_at(self, x) -> np.ndarray:
        return _field(self.a0, np.atleast_2d(x))

    def a1_at(self, x) -> np.ndarray:
        return _field(self.a1, np.atleast_2d(x))


@dataclass(frozen=True, eq=False)
class OperatorCoefficients:
    """Symmetric m x m coefficient field with c0|eta|^2 <= <a eta, eta> <= c1|eta|^2."""

    n: int
    m: int
    a: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    c0: float
    c1: float
    label: str = ""

    def __post_init__(self):
        if not (0 < self.c0 <= self.c1):
            raise IntegrandError(f"need 0 < c0 <= c1, got ({self.c0}, {self.c1})")
        pts = np.random.default_rng(0).uniform(-1, 1, size=(64, self.n))
        mats = self(pts)
        if np.max(np.abs(mats - np.swapaxes(mats, 1, 2))) > 1e-12:
            raise IntegrandError("coefficient matrix is not symmetric")

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.asarray(self.a(x), dtype=float)
        if out.shape != (x.shape[0], self.m, self.m):
            raise IntegrandError(f"coefficient field returned {out.shape}")
        return out

    @classmethod
    def constant(cls, matrix, n: Optional[int] = None, label: str = ""):
        mat = np.atleast_2d(np.asarray(matrix, dtype=float))
        if np.max(np.abs(mat - mat.T)) > 1e-12:
            raise IntegrandError("coefficient matrix is not symmetric")
        ev = np.linalg.eigvalsh(mat)
        return cls(n=n or mat.shape[0], m=mat.shape[0],
                   a=lambda x: np.broadcast_to(mat, (x.shape[0],) + mat.shape).copy(),
                   c0=float(ev[0]), c1=float(ev[-1]), label=label or "constant")

    @classmethod
    def scalar(cls, coef: Callable[[np.ndarray], np.ndarray], n: int, m: int,
               c0: float, c1: float, label: str = ""):
        eye = np.eye(m)
        return cls(n=n, m=m, a=lambda x: _field(coef, x)[:, None, None] * eye,
                   c0=c0, c1=c1, label=label)

    def check_bounds(self, points, n_eta: int = 16, seed: int = 0) -> dict:
        """Rayleigh-quotient probe of the ellipticity bounds at ``points``."""
        rng = np.random.default_rng(seed)
        mats = self(points)
        eta = rng.normal(size=(n_eta, self.m))
        q = np.einsum("ei,kij,ej->ke", eta, mats, eta) / np.sum(eta * eta, axis=1)
        lo, hi = float(q.min()), float(q.max())
        return {"min_rayleigh": lo, "max_rayleigh": hi,
                "passed": bool(lo >= self.c0 * (1 - 1e-12) and hi <= self.c1 * (1 + 1e-12))}


# -- constructors --------------------------------------------------------------


def quadratic(coeffs: OperatorCoefficients) -> Integrand:
    """f(x, eta) = 1/2 <a(x) eta, eta>."""
    a = coeffs

    def value(x, eta):
        return 0.5 * np.einsum("ki,kij,kj->k", eta, a(x), eta)

    def grad(x, eta):
        return np.einsum("kij,kj->ki", a(x), eta)

    return Integrand(n=coeffs.n, m=coeffs.m, p=2.0, value_fn=value, grad_fn=grad,
                     c0=0.5 * coeffs.c0, c1=0.5 * coeffs.c1, kind="quadratic",
                     matrix_fn=a, params={"coefficients": coeffs})


def p_power(c: Scalar, p: float, m: int, n: Optional[int] = None,
            c_bounds: Optional[tuple] = None) -> Integrand:
    """f(x, eta) = c(x) |eta|^p; the gradient at eta = 0 is taken to be 0."""
    if not p > 1:
        raise IntegrandError(f"exponent p must exceed 1, got {p}")
    if c_bounds is None:
        if callable(c):
            raise IntegrandError("a variable coefficient needs explicit c_bounds=(cmin, cmax)")
        c_bounds = (float(c), float(c))
    cmin, cmax = c_bounds
    if not cmin > 0:
        raise IntegrandError("p_power coefficient must be bounded below by a positive constant")

    def value(x, eta):
        return _field(c, x) * np.sum(eta * eta, axis=1) ** (0.5 * p)

    def grad(x, eta):
        r = np.sqrt(np.sum(eta * eta, axis=1))
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(r > 0, p * r ** (p - 2), 0.0)
        return (_field(c, x) * scale)[:, None] * eta

    return Integrand(n=n or m, m=m, p=float(p), value_fn=value, grad_fn=grad,
                     c0=cmin, c1=cmax, kind="p_power", params={"c": c, "p": p})


def custom(value, grad, n: int, m: int, p: float, c0: float, c1: float,
           a0: Scalar = 0.0, a1: Scalar = 0.0) -> Integrand:
    if grad is None:
        raise IntegrandError("custom integrands must provide an analytic gradient")
    return Integrand(n=n, m=m, p=p, value_fn=value, grad_fn=grad, c0=c0, c1=c1,
                     a0=a0, a1=a1, kind="custom")


def _compose_scalar(val: Scalar, mapping):
    return (lambda x: val(mapping(x))) if callable(val) else val


def periodic_compose(f: Integrand, frame: Frame, eps: float) -> Integrand:
    """f_eps(x, eta) = f(reduce(delta_{1/eps} x), eta) for f periodic in x."""
    if not eps > 0:
        raise IntegrandError("eps must be positive")
    if frame.n != f.n:
        raise IntegrandError("frame and integrand dimensions differ")

    def to_cell(x):
        return periodic_reduce(frame, dilate(1.0 / eps, x, frame))

    matrix_fn = None
    if f.matrix_fn is not None:
        base_matrix = f.matrix_fn
        matrix_fn = lambda x: base_matrix(to_cell(x))  # noqa: E731

    return Integrand(
        n=f.n, m=f.m, p=f.p,
        value_fn=lambda x, eta: f.value_fn(to_cell(x), eta),
        grad_fn=lambda x, eta: f.grad_fn(to_cell(x), eta),
        c0=f.c0, c1=f.c1,
        a0=_compose_scalar(f.a0, to_cell), a1=_compose_scalar(f.a1, to_cell),
        kind="periodic_composed", matrix_fn=matrix_fn,
        params={"base": f, "frame": frame, "eps": eps, "to_cell": to_cell},
    )


class _SiteLookup:
    """Exact lookup of per-site data by site coordinates."""

    def __init__(self, phi: GradientField):
        from scipy.spatial import cKDTree

        self.phi = phi
        self.tree = cKDTree(phi.sites)
        self.scale = 1e-12 * (1.0 + float(np.max(np.abs(phi.sites))))

    def __call__(self, x) -> np.ndarray:
        if x.shape == self.phi.sites.shape and (x is self.phi.sites or np.array_equal(x, self.phi.sites)):
            return self.phi.samples
        dist, idx = self.tree.query(x)
        if np.any(dist > self.scale):
            raise MeshError("shifted integrand evaluated away from the sites of its shift field")
        return self.phi.samples[idx]


def shift(f: Integrand, phi: GradientField) -> Integrand:
    """g(x, eta) = f(x, eta + Phi(x)) with Phi sampled on gradient sites.

    The growth class widens to (c0 2^(1-p), c1 2^(p-1)) with
    a0 + c0|Phi|^p and a1 + c1 2^(p-1) |Phi|^p.
    """
    if phi.m != f.m:
        raise IntegrandError("shift field has the wrong number of components")
    look = _SiteLookup(phi)
    p = f.p
    c3 = f.c1 * 2.0 ** (p - 1)

    def phi_pow(x):
        v = look(x)
        return np.sum(v * v, axis=1) ** (0.5 * p)

    return Integrand(
        n=f.n, m=f.m, p=p,
        value_fn=lambda x, eta: f.value_fn(x, eta + look(x)),
        grad_fn=lambda x, eta: f.grad_fn(x, eta + look(x)),
        c0=f.c0 * 2.0 ** (1 - p), c1=c3,
        a0=lambda x: _field(f.a0, x) + f.c0 * phi_pow(x),
        a1=lambda x: _field(f.a1, x) + c3 * phi_pow(x),
        kind="shifted", params={"base": f, "phi": phi},
    )


def momentum_map(f: Integrand, gf: GradientField) -> GradientField:
    """Per-site momenta grad_eta f(x, Xu(x))."""
    return gf.like(f.grad_fn(gf.sites, gf.samples))


# -- lower-order terms ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LowerOrderTerm:
    """g(x, s) with derivative in s and growth d0|s|^p - b0 <= g <= d1|s|^p + b1."""

    eval_fn: Callable = field(repr=False)
    dgrad_fn: Callable = field(repr=False)
    p: float
    d0: float
    d1: float
    b0: float = 0.0
    b1: float = 0.0
    kind: str = "custom"
    mu: Optional[float] = None
    rhs: Optional[Scalar] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.d1 > 0:
            raise IntegrandError("lower-order growth needs d1 > 0")
        if self.d0 > self.d1:
            raise IntegrandError("lower-order growth needs d0 <= d1")

    @property
    def is_linear_quadratic(self) -> bool:
        return self.kind == "linear_quadratic"

    def __call__(self, x, s):
        return self.eval_fn(np.atleast_2d(x), np.atleast_1d(s))

    def dgrad(self, x, s):
        return self.dgrad_fn(np.atleast_2d(x), np.atleast_1d(s))

    def rhs_at(self, x) -> np.ndarray:
        return _field(self.rhs if self.rhs is not None else 0.0, np.atleast_2d(x))


def linear_quadratic(mu: float, rhs: Scalar = 0.0, rhs_bound: Optional[float] = None,
                     delta: float = 0.5) -> LowerOrderTerm:
    """g(x, s) = mu s^2 / 2 - rhs(x) s.

    The growth constants come from Young's inequality |rhs s| <= delta s^2 + rhs^2/(4 delta).
    """
    if mu < 0:
        raise IntegrandError("mu must be nonnegative")
    if rhs_bound is None:
        rhs_bound = float("nan") if callable(rhs) else abs(float(rhs))
    b = rhs_bound ** 2 / (4 * delta)

    def value(x, s):
        return 0.5 * mu * s * s - _field(rhs, x) * s

    def dgrad(x, s):
        return mu * s - _field(rhs, x)

    return LowerOrderTerm(eval_fn=value, dgrad_fn=dgrad, p=2.0, d0=0.5 * mu - delta,
                          d1=0.5 * mu + delta, b0=b, b1=b, kind="linear_quadratic",
                          mu=float(mu), rhs=rhs)


def power_term(d: float, p: float) -> LowerOrderTerm:
    """g(x, s) = d |s|^p with d > 0."""

    def value(x, s):
        return d * np.abs(s) ** p

    def dgrad(x, s):
        return d * p * np.abs(s) ** (p - 1) * np.sign(s)

    return LowerOrderTerm(eval_fn=value, dgrad_fn=dgrad, p=p, d0=d, d1=d, kind="power")


# -- structural samplers ---------------------------------------------------------


@dataclass
class CheckReport:
    name: str
    passed: bool
    n_samples: int
    worst: float
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return self.passed


def _sample_x(f: Integrand, n: int, rng, points=None, grid: Optional[Grid] = None):
    if points is not None:
        pts = np.asarray(points, dtype=float)
        return pts[rng.integers(0, len(pts), size=n)]
    if grid is not None:
        lo = np.array([b[0] for b in grid.box])
        hi = np.array([b[1] for b in grid.box])
    else:
        lo, hi = -np.ones(f.n), np.ones(f.n)
    return rng.uniform(lo, hi, size=(n, f.n))


def _sample_eta(m: int, n: int, rng, rmin=1e-3, rmax=1e3):
    d = rng.normal(size=(n, m))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = np.exp(rng.uniform(np.log(rmin), np.log(rmax), size=n))
    return d * r[:, None]


def _norm(v):
    return np.sqrt(np.sum(v * v, axis=1))


def check_growth(f: Integrand, grid: Optional[Grid] = None, n_samples: int = 1000,
                 seed: int = 0, points=None, rtol: float = 1e-10) -> CheckReport:
    """Sample c0|eta|^p - a0(x) <= f(x, eta) <= c1|eta|^p + a1(x)."""
    rng = np.random.default_rng(seed)
    x = _sample_x(f, n_samples, rng, points, grid)
    eta = _sample_eta(f.m, n_samples, rng)
    val = f.value_fn(x, eta)
    r = _norm(eta) ** f.p
    lower = val - (f.c0 * r - _field(f.a0, x))
    upper = (f.c1 * r + _field(f.a1, x)) - val
    scale = 1.0 + np.abs(val) + f.c1 * r
    rel = np.minimum(lower, upper) / scale
    worst = int(np.argmin(rel))
    return CheckReport(
        name="growth", passed=bool(rel[worst] >= -rtol), n_samples=n_samples,
        worst=float(rel[worst]),
        details={"worst_lower_margin": float(lower.min()),
                 "worst_upper_margin": float(upper.min()),
                 "worst_eta": eta[worst].tolist(), "worst_x": x[worst].tolist()},
    )


def check_hoelder_gradient(f: Integrand, alpha: float, cbar: float, n_samples: int = 1000,
                           b: Scalar = 0.0, seed: int = 0, points=None,
                           grid: Optional[Grid] = None) -> CheckReport:
    """Worst ratio |Df(e1) - Df(e2)| / (|e1-e2|^alpha (|e1|+|e2|+b)^(p-1-alpha))."""
    if not 0 <= alpha <= min(1.0, f.p - 1):
        raise IntegrandError(f"alpha must lie in [0, min(1, p-1)], got {alpha}")
    rng = np.random.default_rng(seed)
    x = _sample_x(f, n_samples, rng, points, grid)
    e1 = _sample_eta(f.m, n_samples, rng, 1e-3, 1e2)
    e2 = _sample_eta(f.m, n_samples, rng, 1e-3, 1e2)
    num = _norm(f.grad_fn(x, e1) - f.grad_fn(x, e2))
    base = _norm(e1) + _norm(e2) + _field(b, x)
    den = _norm(e1 - e2) ** alpha * base ** (f.p - 1 - alpha)
    ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    worst = float(ratio.max())
    return CheckReport(name="hoelder_gradient", passed=bool(worst <= cbar * (1 + 1e-10)),
                       n_samples=n_samples, worst=worst, details={"alpha": alpha, "cbar": cbar})


def check_local_lipschitz(f: Integrand, n_samples: int = 1000, seed: int = 0,
                          points=None, grid: Optional[Grid] = None) -> CheckReport:
    """Empirical c2 in |f(e1) - f(e2)| <= c2 |e1-e2| (|e1|+|e2|+a^(1/p))^(p-1), a = a0 + a1."""
    rng = np.random.default_rng(seed)
    x = _sample_x(f, n_samples, rng, points, grid)
    e1 = _sample_eta(f.m, n_samples, rng, 1e-3, 1e2)
    e2 = _sample_eta(f.m, n_samples, rng, 1e-3, 1e2)
    a = _field(f.a0, x) + _field(f.a1, x)
    num = np.abs(f.value_fn(x, e1) - f.value_fn(x, e2))
    den = _norm(e1 - e2) * (_norm(e1) + _norm(e2) + np.maximum(a, 0.0) ** (1 / f.p)) ** (f.p - 1)
    ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    c2 = float(ratio.max())
    return CheckReport(name="local_lipschitz", passed=bool(np.isfinite(c2)), n_samples=n_samples,
                       worst=c2, details={"c2": c2})


def check_gradient(f: Integrand, n_samples: int = 1000, seed: int = 0, radius: float = 10.0,
                   rtol: Optional[float] = None, points=None,
                   grid: Optional[Grid] = None) -> CheckReport:
    """Central finite differences of f in eta against the analytic gradient."""
    if rtol is None:
        rtol = 1e-6 if f.p >= 2 else 1e-4
    rng = np.random.default_rng(seed)
    x = _sample_x(f, n_samples, rng, points, grid)
    eta = _sample_eta(f.m, n_samples, rng, 1e-8 if f.p < 2 else 1e-3, radius)
    if f.p < 2:
        # stay clear of the kink at 0
        eta = eta * np.maximum(1.0, 1e-2 / _norm(eta))[:, None]
    g = f.grad_fn(x, eta)
    fd = np.empty_like(g)
    step = 1e-5 * (1.0 + _norm(eta))
    for j in range(f.m):
        e = np.zeros(f.m)
        e[j] = 1.0
        de = step[:, None] * e
        fd[:, j] = (f.value_fn(x, eta + de) - f.value_fn(x, eta - de)) / (2 * step)
    err = _norm(fd - g) / np.maximum(_norm(g), 1.0)
    worst = float(err.max())
    return CheckReport(name="gradient", passed=bool(worst <= rtol), n_samples=n_samples,
                       worst=worst, details={"rtol": rtol})


def check_convexity(f: Integrand, n_samples: int = 1000, seed: int = 0, radius: float = 10.0,
                    atol: float = 1e-10, points=None, grid: Optional[Grid] = None) -> CheckReport:
    rng = np.random.default_rng(seed)
    x = _sample_x(f, n_samples, rng, points, grid)
    e1 = _sample_eta(f.m, n_samples, rng, 1e-3, radius)
    e2 = _sample_eta(f.m, n_samples, rng, 1e-3, radius)
    t = rng.uniform(0, 1, size=n_samples)
    mid = f.value_fn(x, t[:, None] * e1 + (1 - t)[:, None] * e2)
    chord = t * f.value_fn(x, e1) + (1 - t) * f.value_fn(x, e2)
    excess = mid - chord
    # roundoff scales with the magnitude of the values compared
    tol = atol + 1e-14 * np.abs(chord)
    worst = float(np.max(excess - tol))
    return CheckReport(name="convexity", passed=bool(worst <= 0), n_samples=n_samples,
                       worst=float(excess.max()))


def check_lower_order_growth(g: LowerOrderTerm, n_samples: int = 1000, seed: int = 0,
                             n: int = 1, points=None, smax: float = 1e3) -> CheckReport:
    rng = np.random.default_rng(seed)
    if points is not None:
        pts = np.asarray(points, dtype=float)
        x = pts[rng.integers(0, len(pts), size=n_samples)]
    else:
        x = rng.uniform(-1, 1, size=(n_samples, n))
    s = rng.choice([-1.0, 1.0], size=n_samples) * np.exp(rng.uniform(np.log(1e-3), np.log(smax), n_samples))
    val = g.eval_fn(x, s)
    b0, b1 = g.b0, g.b1
    if not np.isfinite(b0) and g.rhs is not None:
        r = np.max(np.abs(_field(g.rhs, x)))
        b0 = b1 = r * r / (4 * (g.d1 - (g.mu or 0.0) / 2))
    r = np.abs(s) ** g.p
    lower = val - (g.d0 * r - b0)
    upper = (g.d1 * r + b1) - val
    rel = np.minimum(lower, upper) / (1.0 + np.abs(val) + abs(g.d1) * r)
    worst = float(rel.min())
    return CheckReport(name="lower_order_growth", passed=bool(worst >= -1e-10),
                       n_samples=n_samples, worst=worst)

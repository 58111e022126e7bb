"""Vector-field frames X = (X_1, ..., X_m) on R^n and Heisenberg group operations.

A frame is described by its coefficient matrix C(x) (m x n): the j-th field is
X_j = sum_i C[j, i](x) d/dx_i, so that the X-gradient of u is C(x) Du(x).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np

__all__ = [
    "Frame",
    "HAffine",
    "euclidean",
    "heisenberg",
    "grushin",
    "custom",
    "from_table",
    "frame_from_tag",
    "eval_coefficients",
    "gram_matrix",
    "lic_report",
    "group_law",
    "group_inverse",
    "dilate",
    "h_periodic_reduce",
    "periodic_reduce",
    "h_affine_eval",
]


class FrameError(ValueError):
    """Raised for dimension mismatches and invalid frame parameters."""


@dataclass(frozen=True)
class Frame:
    """A family of ``m`` vector fields on ``R^n``.

    ``coeff`` maps an ``(N, n)`` array of points to an ``(N, m, n)`` array of
    coefficient matrices.
    """

    n: int
    m: int
    coeff: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    kind: str = "custom"
    s: Optional[int] = None
    lipschitz_bound: float = 0.0
    tag: str = ""

    def __post_init__(self):
        if self.n < 1 or not (1 <= self.m <= self.n):
            raise FrameError(f"invalid frame dimensions n={self.n}, m={self.m}")

    @property
    def is_heisenberg(self) -> bool:
        return self.kind == "heisenberg"

    def coefficients(self, x) -> np.ndarray:
        """Batched C(x): ``(N, n) -> (N, m, n)``."""
        pts = np.asarray(x, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.n:
            raise FrameError(f"expected points of shape (N, {self.n}), got {pts.shape}")
        out = np.asarray(self.coeff(pts), dtype=float)
        if out.shape != (pts.shape[0], self.m, self.n):
            raise FrameError(
                f"coefficient callback returned {out.shape}, "
                f"expected {(pts.shape[0], self.m, self.n)}"
            )
        return out


def _check_point(frame: Frame, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (frame.n,):
        raise FrameError(f"point has shape {x.shape}, frame needs ({frame.n},)")
    if not np.all(np.isfinite(x)):
        raise FrameError("point coordinates must be finite")
    return x


# -- built-in frames ---------------------------------------------------------


def euclidean(n: int, m: Optional[int] = None) -> Frame:
    m = n if m is None else m
    eye = np.eye(n)[:m]

    def coeff(pts):
        return np.broadcast_to(eye, (pts.shape[0], m, n)).copy()

    return Frame(n=n, m=m, coeff=coeff, kind="euclidean", lipschitz_bound=0.0,
                 tag=f"euclidean:{n}")


def heisenberg(s: int = 1) -> Frame:
    """Horizontal gradient of the Heisenberg group H^s (n = 2s+1, m = 2s)."""
    if s < 1:
        raise FrameError("Heisenberg rank s must be >= 1")
    n, m = 2 * s + 1, 2 * s

    def coeff(pts):
        c = np.zeros((pts.shape[0], m, n))
        idx = np.arange(m)
        c[:, idx, idx] = 1.0
        c[:, :s, -1] = -0.5 * pts[:, s:m]
        c[:, s:m, -1] = 0.5 * pts[:, :s]
        return c

    return Frame(n=n, m=m, coeff=coeff, kind="heisenberg", s=s,
                 lipschitz_bound=0.5, tag=f"heisenberg:{s}")


def grushin() -> Frame:
    """X_1 = d_1, X_2 = x_1 d_2 on R^2."""

    def coeff(pts):
        c = np.zeros((pts.shape[0], 2, 2))
        c[:, 0, 0] = 1.0
        c[:, 1, 1] = pts[:, 0]
        return c

    return Frame(n=2, m=2, coeff=coeff, kind="grushin", lipschitz_bound=1.0,
                 tag="grushin")


def custom(n: int, m: int, coeff: Callable[[np.ndarray], np.ndarray],
           lipschitz_bound: float = 0.0, tag: str = "custom") -> Frame:
    return Frame(n=n, m=m, coeff=coeff, kind="custom",
                 lipschitz_bound=lipschitz_bound, tag=tag)


def from_table(path) -> Frame:
    """Load a sampled coefficient table.

    The first line holds ``n m``; each following row is
    ``x_1 ... x_n c_11 ... c_1n c_21 ... c_mn``. Queries use the nearest sample.
    """
    from scipy.spatial import cKDTree

    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise FrameError(f"{path}: empty coefficient table")
    header = lines[0].split()
    if len(header) != 2:
        raise FrameError(f"{path}: header must be 'n m'")
    n, m = int(header[0]), int(header[1])
    data = np.array([[float(v) for v in ln.split()] for ln in lines[1:]], dtype=float)
    if data.ndim != 2 or data.shape[1] != n + m * n:
        raise FrameError(f"{path}: rows must have {n + m * n} columns")
    nodes = data[:, :n]
    table = data[:, n:].reshape(-1, m, n)
    tree = cKDTree(nodes)

    def coeff(pts):
        _, idx = tree.query(pts)
        return table[idx]

    return Frame(n=n, m=m, coeff=coeff, kind="custom", tag=f"custom:{path}")


def frame_from_tag(tag: str) -> Frame:
    """Build a frame from ``euclidean:n``, ``heisenberg:s``, ``grushin`` or ``custom:<path>``."""
    name, _, arg = tag.partition(":")
    if name == "euclidean":
        return euclidean(int(arg or 1))
    if name == "heisenberg":
        return heisenberg(int(arg or 1))
    if name == "grushin" and not arg:
        return grushin()
    if name == "custom" and arg:
        return from_table(arg)
    raise FrameError(f"unknown frame tag {tag!r}")


# -- pointwise operations ----------------------------------------------------


def eval_coefficients(frame: Frame, x) -> np.ndarray:
    x = _check_point(frame, x)
    return frame.coefficients(x[None, :])[0]


def gram_matrix(frame: Frame, x) -> Tuple[np.ndarray, float]:
    """Return ``B(x) = C(x) C(x)^T`` and its determinant."""
    c = eval_coefficients(frame, x)
    b = c @ c.T
    return b, float(np.linalg.det(b))


def lic_report(frame: Frame, points, threshold: float = 1e-12) -> dict:
    """Fraction of sample points where det B falls below ``threshold``.

    Linear independence is only required off a null set, so a nonzero
    fraction is reported rather than rejected.
    """
    c = frame.coefficients(points)
    dets = np.linalg.det(np.einsum("kji,kli->kjl", c, c))
    bad = dets < threshold
    return {
        "n_points": int(len(dets)),
        "fraction_degenerate": float(bad.mean()) if len(dets) else 0.0,
        "min_det": float(dets.min()) if len(dets) else float("nan"),
    }


# -- Heisenberg group --------------------------------------------------------


def _split(x, s=None):
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n % 2 == 0 or n < 3:
        raise FrameError(f"Heisenberg points need odd dimension >= 3, got {n}")
    if s is not None and n != 2 * s + 1:
        raise FrameError(f"dimension {n} does not match H^{s}")
    return x, (n - 1) // 2


def _omega(x, y, s):
    return 0.5 * np.sum(x[..., :s] * y[..., s:2 * s] - y[..., :s] * x[..., s:2 * s], axis=-1)


def group_law(x, y) -> np.ndarray:
    """Heisenberg product ``x . y``; works on single points or batches."""
    x, s = _split(x)
    y, s2 = _split(y)
    if s != s2:
        raise FrameError("group_law: dimension mismatch")
    out = x + y
    out[..., -1] += _omega(x, y, s)
    return out


def group_inverse(x) -> np.ndarray:
    x, _ = _split(x)
    return -x


def dilate(lam: float, x, frame: Optional[Frame] = None) -> np.ndarray:
    """Intrinsic dilation; plain scaling for non-Heisenberg frames."""
    if not lam > 0:
        raise FrameError("dilation factor must be positive")
    x = np.asarray(x, dtype=float)
    if frame is not None and not frame.is_heisenberg:
        return lam * x
    _split(x)
    out = lam * x
    out[..., -1] = lam * lam * x[..., -1]
    return out


def _wrap(v):
    """Integer shift k with v + 2k in [-1, 1)."""
    k = -np.floor((v + 1.0) / 2.0)
    r = v + 2.0 * k
    hi = r >= 1.0
    k = np.where(hi, k - 1.0, k)
    lo = r < -1.0
    k = np.where(lo, k + 1.0, k)
    return k


def h_periodic_reduce(x) -> Tuple[np.ndarray, np.ndarray]:
    """Representative of ``x`` modulo the lattice ``2Z^n`` acting on the left.

    Returns ``(r, k)`` with ``r = (2k) . x`` and every coordinate of ``r`` in
    ``[-1, 1)``. Horizontal coordinates are fixed first, then the vertical
    one using the already chosen horizontal shift.
    """
    x, s = _split(x)
    m = 2 * s
    k = np.zeros_like(x)
    k[..., :m] = _wrap(x[..., :m])
    shift = 2.0 * k
    partial = group_law(shift, x)
    k[..., -1] = _wrap(partial[..., -1])
    r = partial.copy()
    r[..., -1] += 2.0 * k[..., -1]
    return r, k.astype(np.int64)


def periodic_reduce(frame: Frame, x) -> np.ndarray:
    """Reduce points to the fundamental box [-1, 1)^n of the frame's lattice."""
    x = np.asarray(x, dtype=float)
    if frame.is_heisenberg:
        return h_periodic_reduce(x)[0]
    return x + 2.0 * _wrap(x)


@dataclass(frozen=True)
class HAffine:
    """``x -> <eta, pi_m(x)> + offset``."""

    eta: Tuple[float, ...]
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "eta", tuple(float(v) for v in np.atleast_1d(self.eta)))

    def __call__(self, x) -> np.ndarray:
        return h_affine_eval(self, x)


def h_affine_eval(l: HAffine, x):
    x = np.asarray(x, dtype=float)
    eta = np.asarray(l.eta)
    m = eta.shape[0]
    if x.shape[-1] < m:
        raise FrameError(f"point dimension {x.shape[-1]} smaller than slope dimension {m}")
    val = x[..., :m] @ eta + l.offset
    return float(val) if np.ndim(val) == 0 else val

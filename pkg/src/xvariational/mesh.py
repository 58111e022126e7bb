"""Tensor grids on boxes and the discrete X-gradient.

Nodes sit at cell corners and are ordered lexicographically with the first
axis varying slowest. Gradient samples live at cell centers: the Euclidean
gradient there is the average of forward differences over the cell edges
parallel to each axis, and the X-gradient is ``C(center) @ Du(center)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, reduce
from typing import Callable, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .frame import Frame, HAffine, h_affine_eval

__all__ = [
    "Grid",
    "DiscreteField",
    "GradientField",
    "DiscreteXOperator",
    "MeshError",
    "build_grid",
    "build_x_operator",
    "apply_x",
    "apply_x_transpose",
    "set_dirichlet",
    "integrate",
    "l2_norm",
]


class MeshError(ValueError):
    pass


def _trapezoid_1d(res: int, h: float) -> np.ndarray:
    w = np.full(res + 1, h)
    w[0] = w[-1] = 0.5 * h
    return w


@dataclass(frozen=True, eq=False)
class Grid:
    box: Tuple[Tuple[float, float], ...]
    res: Tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.res)

    @cached_property
    def h(self) -> np.ndarray:
        return np.array([(hi - lo) / r for (lo, hi), r in zip(self.box, self.res)])

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(r + 1 for r in self.res)

    @property
    def node_count(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_count(self) -> int:
        return int(np.prod(self.res))

    @property
    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.box]))

    @cached_property
    def axes(self) -> Tuple[np.ndarray, ...]:
        return tuple(np.linspace(lo, hi, r + 1) for (lo, hi), r in zip(self.box, self.res))

    @cached_property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([c.ravel() for c in mesh], axis=1)

    @cached_property
    def centers(self) -> np.ndarray:
        mids = [0.5 * (a[1:] + a[:-1]) for a in self.axes]
        mesh = np.meshgrid(*mids, indexing="ij")
        return np.stack([c.ravel() for c in mesh], axis=1)

    @cached_property
    def quad_weights(self) -> np.ndarray:
        ws = [_trapezoid_1d(r, h) for r, h in zip(self.res, self.h)]
        return reduce(np.multiply.outer, ws).ravel()

    @cached_property
    def site_weights(self) -> np.ndarray:
        return np.full(self.cell_count, float(np.prod(self.h)))

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        idx = np.indices(self.shape)
        mask = np.zeros(self.shape, dtype=bool)
        for d, r in enumerate(self.res):
            mask |= (idx[d] == 0) | (idx[d] == r)
        return mask.ravel()

    @cached_property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    @cached_property
    def interior_index(self) -> np.ndarray:
        return np.flatnonzero(self.interior_mask)

    def node_index(self, *ijk: int) -> int:
        return int(np.ravel_multi_index(ijk, self.shape))

    def nearest_node(self, x) -> int:
        x = np.asarray(x, dtype=float)
        ijk = [int(np.clip(round((xi - lo) / h), 0, r))
               for xi, (lo, _), h, r in zip(x, self.box, self.h, self.res)]
        return self.node_index(*ijk)


def build_grid(box, res) -> Grid:
    """Uniform tensor grid; ``box`` is ``(lo, hi)`` or a sequence of pairs."""
    box = np.asarray(box, dtype=float)
    if box.ndim == 1:
        box = box[None, :]
    if box.ndim != 2 or box.shape[1] != 2:
        raise MeshError(f"box must be a sequence of (lo, hi) pairs, got shape {box.shape}")
    res = np.atleast_1d(np.asarray(res, dtype=int))
    if res.size == 1 and box.shape[0] > 1:
        res = np.repeat(res, box.shape[0])
    if res.shape[0] != box.shape[0]:
        raise MeshError("res and box have different dimensions")
    if np.any(res < 2):
        raise MeshError(f"each resolution must be >= 2, got {res.tolist()}")
    if np.any(box[:, 1] <= box[:, 0]):
        raise MeshError("box needs lo < hi on every axis")
    return Grid(box=tuple((float(lo), float(hi)) for lo, hi in box),
                res=tuple(int(r) for r in res))


@dataclass(frozen=True, eq=False)
class DiscreteField:
    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.node_count,):
            raise MeshError(f"field has {v.shape} values, grid has {self.grid.node_count} nodes")
        if not np.all(np.isfinite(v)):
            raise MeshError("field values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray]):
        return cls(np.asarray(fn(grid.nodes), dtype=float).reshape(-1), grid)

    @classmethod
    def zeros(cls, grid: Grid):
        return cls(np.zeros(grid.node_count), grid)

    def __add__(self, other):
        return DiscreteField(self.values + other.values, self.grid)

    def __sub__(self, other):
        return DiscreteField(self.values - other.values, self.grid)

    def __mul__(self, c):
        return DiscreteField(self.values * c, self.grid)

    __rmul__ = __mul__

    def at(self, x) -> float:
        return float(self.values[self.grid.nearest_node(x)])


@dataclass(frozen=True, eq=False)
class GradientField:
    """Per-site m-vectors with site coordinates and quadrature weights."""

    samples: np.ndarray
    sites: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[0] != len(self.sites) or len(self.weights) != len(self.sites):
            raise MeshError("samples, sites and weights disagree in length")
        object.__setattr__(self, "samples", s)

    @property
    def m(self) -> int:
        return self.samples.shape[1]

    @classmethod
    def on_grid(cls, grid: Grid, samples):
        return cls(samples, grid.centers, grid.site_weights)

    def like(self, samples) -> "GradientField":
        return GradientField(samples, self.sites, self.weights)

    def __add__(self, other):
        _check_sites(self, other)
        return self.like(self.samples + other.samples)

    def __sub__(self, other):
        _check_sites(self, other)
        return self.like(self.samples - other.samples)

    def __neg__(self):
        return self.like(-self.samples)


def _check_sites(a: GradientField, b: GradientField):
    if a.sites.shape != b.sites.shape or not (a.sites is b.sites or np.array_equal(a.sites, b.sites)):
        raise MeshError("gradient fields live on different sites")


def _difference_1d(res: int, h: float) -> sp.csr_matrix:
    return sp.diags([-np.ones(res), np.ones(res)], [0, 1], shape=(res, res + 1), format="csr") / h


def _average_1d(res: int) -> sp.csr_matrix:
    return sp.diags([np.full(res, 0.5), np.full(res, 0.5)], [0, 1], shape=(res, res + 1), format="csr")


@dataclass(frozen=True, eq=False)
class DiscreteXOperator:
    """Sparse map from nodal values to X-gradient samples at cell centers.

    ``matrix`` stacks the m components block-wise: rows ``j*S:(j+1)*S``
    hold component ``j`` at the ``S`` sites.
    """

    matrix: sp.csr_matrix
    frame: Frame
    grid: Grid
    euclidean_blocks: Tuple[sp.csr_matrix, ...] = field(repr=False)

    @property
    def m(self) -> int:
        return self.frame.m

    @property
    def site_count(self) -> int:
        return self.grid.cell_count

    def component(self, j: int) -> sp.csr_matrix:
        s = self.site_count
        return self.matrix[j * s:(j + 1) * s]

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Raw ``(S, m)`` samples of Xu."""
        return (self.matrix @ values).reshape(self.m, self.site_count).T

    def apply_t(self, samples: np.ndarray) -> np.ndarray:
        """Plain matrix transpose applied to ``(S, m)`` samples (no weights)."""
        return self.matrix.T @ np.asarray(samples).T.ravel()


def build_x_operator(grid: Grid, frame: Frame) -> DiscreteXOperator:
    if frame.n != grid.n:
        raise MeshError(f"frame acts on R^{frame.n} but grid is {grid.n}-dimensional")
    diffs = [_difference_1d(r, h) for r, h in zip(grid.res, grid.h)]
    avgs = [_average_1d(r) for r in grid.res]
    blocks = []
    for d in range(grid.n):
        factors = [diffs[a] if a == d else avgs[a] for a in range(grid.n)]
        blocks.append(reduce(lambda a, b: sp.kron(a, b, format="csr"), factors).tocsr())
    coeff = frame.coefficients(grid.centers)
    rows = []
    for j in range(frame.m):
        comp = None
        for d in range(grid.n):
            cjd = coeff[:, j, d]
            if not np.any(cjd):
                continue
            term = sp.diags(cjd) @ blocks[d]
            comp = term if comp is None else comp + term
        if comp is None:
            comp = sp.csr_matrix((grid.cell_count, grid.node_count))
        rows.append(comp)
    matrix = sp.vstack(rows, format="csr")
    matrix.eliminate_zeros()
    return DiscreteXOperator(matrix=matrix, frame=frame, grid=grid,
                             euclidean_blocks=tuple(blocks))


def _field_values(op: DiscreteXOperator, u) -> np.ndarray:
    if isinstance(u, DiscreteField):
        if u.grid is not op.grid and (u.grid.box != op.grid.box or u.grid.res != op.grid.res):
            raise MeshError("field and operator live on different grids")
        return u.values
    v = np.asarray(u, dtype=float)
    if v.shape != (op.grid.node_count,):
        raise MeshError("nodal array length does not match the grid")
    return v


def apply_x(op: DiscreteXOperator, u) -> GradientField:
    return GradientField.on_grid(op.grid, op.apply(_field_values(op, u)))


def apply_x_transpose(op: DiscreteXOperator, phi: GradientField) -> DiscreteField:
    """Adjoint of X for the weighted site and nodal inner products.

    For u vanishing on the boundary,
    ``sum_sites w <Xu, phi> == sum_nodes w_node * u * (X^T phi)``.
    """
    samples = phi.samples if isinstance(phi, GradientField) else np.asarray(phi, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape != (op.site_count, op.m):
        raise MeshError(f"expected samples of shape {(op.site_count, op.m)}, got {samples.shape}")
    weighted = samples * op.grid.site_weights[:, None]
    return DiscreteField(op.apply_t(weighted) / op.grid.quad_weights, op.grid)


def set_dirichlet(u: DiscreteField, datum) -> DiscreteField:
    """Overwrite boundary values by ``datum`` (field, H-affine function, callable or constant)."""
    grid = u.grid
    mask = grid.boundary_mask
    values = u.values.copy()
    if isinstance(datum, DiscreteField):
        values[mask] = datum.values[mask]
    elif isinstance(datum, HAffine):
        values[mask] = h_affine_eval(datum, grid.nodes[mask])
    elif callable(datum):
        values[mask] = np.asarray(datum(grid.nodes[mask]), dtype=float)
    else:
        values[mask] = float(datum)
    return DiscreteField(values, grid)


def integrate(grid: Grid, samples: Union[np.ndarray, DiscreteField, GradientField]) -> float:
    """Trapezoid rule for nodal samples, midpoint rule for cell-center samples."""
    if isinstance(samples, DiscreteField):
        samples = samples.values
    if isinstance(samples, GradientField):
        samples = samples.samples
    v = np.asarray(samples, dtype=float)
    if v.ndim > 1:
        v = v.sum(axis=tuple(range(1, v.ndim)))
    if v.shape[0] == grid.node_count:
        return float(grid.quad_weights @ v)
    if v.shape[0] == grid.cell_count:
        return float(grid.site_weights @ v)
    raise MeshError(f"{v.shape[0]} samples match neither nodes nor cells of the grid")


def l2_norm(grid: Grid, samples) -> float:
    """Discrete L2 norm of nodal or site samples (vector samples use |.|^2)."""
    if isinstance(samples, DiscreteField):
        samples = samples.values
    if isinstance(samples, GradientField):
        samples = samples.samples
    v = np.asarray(samples, dtype=float)
    sq = v * v if v.ndim == 1 else np.sum(v * v, axis=tuple(range(1, v.ndim)))
    return float(np.sqrt(integrate(grid, sq)))

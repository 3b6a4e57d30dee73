"""Fractional kernel phi(s, t) = h(2h-1)|s-t|^(2h-2), its exact cell integrals,
and the inner products it induces on step functions.

Every double integral over a pair of cells is taken from the closed-form
antiderivative of |s-t|^(2h-2), so the diagonal singularity is never sampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import gammainc, gammaincc

from .errors import ContractError, ParameterError, SingularPointError


@dataclass(frozen=True)
class HurstParam:
    """Hurst index restricted to the open interval (1/2, 1)."""

    h: float

    def __post_init__(self):
        h = float(self.h)
        if not (0.5 < h < 1.0) or not np.isfinite(h):
            raise ParameterError(f"Hurst index must lie in (0.5, 1), got {self.h!r}")
        object.__setattr__(self, "h", h)

    def __float__(self):
        return self.h


def as_hurst(h) -> HurstParam:
    return h if isinstance(h, HurstParam) else HurstParam(h)


@dataclass(frozen=True)
class PhiKernel:
    hurst: HurstParam
    coefficient: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "hurst", as_hurst(self.hurst))
        h = self.hurst.h
        object.__setattr__(self, "coefficient", h * (2.0 * h - 1.0))

    @property
    def h(self) -> float:
        return self.hurst.h

    def __call__(self, s, t):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        d = np.abs(s - t)
        if np.any(d == 0.0):
            raise SingularPointError("phi(s, t) diverges at s == t")
        out = self.coefficient * d ** (2.0 * self.h - 2.0)
        return out.item() if out.ndim == 0 else out

    def _half_power(self, x):
        return 0.5 * np.abs(x) ** (2.0 * self.h)

    def cell_integral(self, a, b, c, d):
        """Exact integral of phi over [a, b] x [c, d] (broadcasts)."""
        a, b, c, d = (np.asarray(v, dtype=float) for v in (a, b, c, d))
        f = self._half_power
        out = f(b - c) + f(a - d) - f(b - d) - f(a - c)
        return out.item() if out.ndim == 0 else out

    def antiderivative(self, x):
        """G(x) = h sign(x)|x|^(2h-1); int_a^b phi(s, u) du = G(b - s) - G(a - s)."""
        x = np.asarray(x, dtype=float)
        return self.h * np.sign(x) * np.abs(x) ** (2.0 * self.h - 1.0)

    def row_integral(self, s, a, b):
        """int_a^b phi(s, u) du, finite for every s including s in [a, b]."""
        out = self.antiderivative(np.asarray(b) - s) - self.antiderivative(np.asarray(a) - s)
        return out.item() if np.ndim(out) == 0 else out

    def running_integral(self, t):
        """int_0^t phi(t, s) ds = h t^(2h-1)."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ContractError("running integral needs t >= 0")
        out = self.h * t ** (2.0 * self.h - 1.0)
        return out.item() if out.ndim == 0 else out

    def discounted_row_integral(self, t, a, b, rho: float):
        """int_a^b phi(s, t) exp(-rho max(s, t)) ds (broadcasts)."""
        t, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, a, b)))
        if rho == 0:
            return self.row_integral(t, a, b)
        lo_end = np.minimum(b, t)
        below = np.where(a < lo_end, self.row_integral(t, a, lo_end), 0.0) * np.exp(-rho * t)
        k = 2.0 * self.h - 1.0
        x1 = rho * np.clip(np.maximum(a, t) - t, 0.0, None)
        x2 = rho * np.clip(b - t, 0.0, None)
        above = (self.coefficient * np.exp(-rho * t) * rho ** (-k) * gamma_fn(k)
                 * (gammainc(k, x2) - gammainc(k, x1)))
        out = below + above
        return out.item() if out.ndim == 0 else out

    def cell_matrix(self, edges_row, edges_col=None):
        """Matrix of cell integrals between consecutive-edge cells."""
        er = np.asarray(edges_row, dtype=float)
        ec = er if edges_col is None else np.asarray(edges_col, dtype=float)
        return self.cell_integral(er[:-1, None], er[1:, None], ec[None, :-1], ec[None, 1:])

    def discounted_cell_matrix(self, edges, rho: float):
        """Cell integrals of phi(s, t) exp(-rho max(s, t)) over edges x edges.

        Closed form through the regularized incomplete gamma functions; rho = 0
        falls back to :meth:`cell_matrix`.
        """
        edges = np.asarray(edges, dtype=float)
        if rho < 0:
            raise ParameterError("discount must be non-negative")
        if rho == 0:
            return self.cell_matrix(edges)
        a, b = edges[:-1], edges[1:]
        n = a.size
        k = 2.0 * self.h
        scale = self.h * gamma_fn(k) * rho ** (-k)

        def weighted(lo, hi, c):
            # int_lo^hi exp(-rho s) (s - c)^(k-1) ds for lo >= c, without the h factor
            x1 = rho * (lo - c)
            x2 = rho * (hi - c)
            upper = x1 > k
            diff = np.where(upper, gammaincc(k, x1) - gammaincc(k, x2),
                            gammainc(k, x2) - gammainc(k, x1))
            return np.exp(-rho * c) * diff

        i, j = np.tril_indices(n, -1)
        out = np.zeros((n, n))
        lower = scale * (weighted(a[i], b[i], a[j]) - weighted(a[i], b[i], b[j]))
        out[i, j] = lower
        out[j, i] = lower
        out[np.arange(n), np.arange(n)] = 2.0 * scale * weighted(a, b, a)
        return out


def phi_eval(kernel: PhiKernel, s: float, t: float) -> float:
    return kernel(s, t)


def cell_integral(kernel: PhiKernel, a: float, b: float, c: float, d: float) -> float:
    if not (a < b and c < d):
        raise ContractError("cell integral needs a < b and c < d")
    return kernel.cell_integral(a, b, c, d)


def running_phi_integral(kernel: PhiKernel, t: float) -> float:
    return kernel.running_integral(t)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing partition of [0, t_max]; t_max stands in for infinity."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ContractError("a grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise ContractError("grid must start at 0")
        if not np.all(np.diff(nodes) > 0):
            raise ContractError("grid nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, t_max: float, n_nodes: int) -> "TimeGrid":
        if n_nodes < 2 or t_max <= 0:
            raise ContractError("uniform grid needs t_max > 0 and n_nodes >= 2")
        return cls(np.linspace(0.0, float(t_max), int(n_nodes)))

    @property
    def t_max(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @property
    def n_cells(self) -> int:
        return self.nodes.size - 1

    @cached_property
    def widths(self) -> np.ndarray:
        return np.diff(self.nodes)

    def index_of(self, t: float) -> int:
        """Index of the node equal (to rounding) to t."""
        i = int(np.argmin(np.abs(self.nodes - t)))
        if not np.isclose(self.nodes[i], t, rtol=1e-12, atol=1e-12 * max(1.0, self.t_max)):
            raise ContractError(f"t={t} is not a grid node")
        return i

    def subsample(self, stride: int) -> "TimeGrid":
        if (self.n_nodes - 1) % stride:
            raise ContractError("stride must divide the number of cells")
        return TimeGrid(self.nodes[::stride])

    def clipped_edges(self, t: float) -> np.ndarray:
        """Cell edges of the grid restricted to [0, t]."""
        if t > self.t_max * (1 + 1e-12):
            raise ContractError("t exceeds the grid horizon")
        keep = self.nodes[self.nodes < t]
        return np.append(keep, t) if keep.size else np.array([0.0, 0.0])

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash(self.nodes.tobytes())


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Step function on a grid: values[i] holds on [t_i, t_{i+1}).

    The last value only matters for point evaluation at t_max.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape[-1] != self.grid.n_nodes:
            raise ContractError("one value per grid node required")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: TimeGrid, c: float) -> "GridFunction":
        return cls(grid, np.full(grid.n_nodes, float(c)))

    @classmethod
    def from_callable(cls, grid: TimeGrid, fn) -> "GridFunction":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float) * np.ones(grid.n_nodes))

    @classmethod
    def indicator(cls, grid: TimeGrid, a: float, b: float) -> "GridFunction":
        t = grid.nodes
        return cls(grid, ((t >= a) & (t < b)).astype(float))

    @property
    def cell_values(self) -> np.ndarray:
        return self.values[..., :-1]

    def __call__(self, t):
        idx = np.searchsorted(self.grid.nodes, t, side="right") - 1
        idx = np.clip(idx, 0, self.grid.n_nodes - 1)
        return self.values[..., idx]

    def project(self, target: TimeGrid) -> "GridFunction":
        """Overlap-weighted cell averages on another grid over the same horizon."""
        src = self.grid.nodes
        dst = target.nodes
        lo = np.maximum(dst[:-1, None], src[None, :-1])
        hi = np.minimum(dst[1:, None], src[None, 1:])
        overlap = np.clip(hi - lo, 0.0, None)
        cells = overlap @ self.cell_values / target.widths
        return GridFunction(target, np.append(cells, cells[-1]))


def gram_matrix(kernel: PhiKernel, grid: TimeGrid, t: float | None = None) -> np.ndarray:
    """Cell Gram matrix of <., .>_{H,t}; cells beyond t are clipped or dropped."""
    edges = grid.nodes if t is None else grid.clipped_edges(t)
    return kernel.cell_matrix(edges)


def inner_product_phiT(kernel: PhiKernel, f: GridFunction, g: GridFunction,
                       t: float | None = None) -> float:
    """<f, g>_{H,t} for step functions, by exact product integration.

    Evaluated as ``f_cells @ (G @ g_cells)`` so that single-cell indicators
    return the cell integral bit for bit.
    """
    if f.grid != g.grid:
        raise ContractError("inner product needs functions on the same grid")
    t = f.grid.t_max if t is None else float(t)
    if t <= 0:
        return 0.0
    G = gram_matrix(kernel, f.grid, t)
    n = G.shape[0]
    return float(f.cell_values[:n] @ (G @ g.cell_values[:n]))


def norm_sq_running(kernel: PhiKernel, f: GridFunction) -> np.ndarray:
    """||f||^2_{H,t} at every grid node (the variance clock of int f dB)."""
    G = gram_matrix(kernel, f.grid)
    fc = f.cell_values
    # ||f 1_[0,t_k]||^2 = sum_{i,j<k} f_i G_ij f_j, accumulated along the anti-diagonal front
    w = fc[:, None] * G * fc[None, :]
    rows = np.cumsum(np.tril(w, -1).sum(axis=1))
    diag = np.cumsum(np.diag(w))
    return np.concatenate([[0.0], diag + 2.0 * rows])

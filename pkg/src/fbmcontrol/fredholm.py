"""Tikhonov-regularized solver for symmetric first-kind Fredholm equations

    int_0^T k(s, t) u(s) ds = g(t),   t in [0, T],

discretized by Galerkin projection on cell indicators, so every matrix entry
is a double integral of the kernel over a pair of cells.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .errors import ContractError
from .kernel import GridFunction, PhiKernel, TimeGrid

MAX_NODES = 2048
FIXED_MU = 1e-10
BOUNDARY_FRACTION = 0.1


@dataclass(frozen=True)
class PhiTerm:
    """weight * phi_h(s, t) * exp(-discount * max(s, t))."""

    kernel: PhiKernel
    weight: float = 1.0
    discount: float = 0.0

    def __call__(self, s, t):
        return self.weight * self.kernel(s, t) * np.exp(-self.discount * np.maximum(s, t))

    def matrix(self, edges) -> np.ndarray:
        return self.weight * self.kernel.discounted_cell_matrix(edges, self.discount)


@dataclass(frozen=True, eq=False)
class FredholmProblem:
    """One first-kind equation on a grid.

    ``kernel_fn`` is a sequence of :class:`PhiTerm` (assembled exactly) or a
    smooth symmetric callable k(s, t) (assembled by tensor Gauss-Legendre).
    The right-hand side enters through its cell integrals: ``load`` if given,
    else ``rhs`` integrated cell by cell (adaptive quadrature for callables,
    trapezoid for grid functions). ``scaling`` is an optional positive
    diagonal D; the solver then works with D K D and D g.
    """

    grid: TimeGrid
    kernel_fn: Sequence[PhiTerm] | Callable
    rhs: GridFunction | Callable | None = None
    load: np.ndarray | None = None
    scaling: np.ndarray | None = None

    def __post_init__(self):
        if self.grid.n_nodes > MAX_NODES:
            raise ContractError(f"Fredholm grids are capped at {MAX_NODES} nodes")
        if self.rhs is None and self.load is None:
            raise ContractError("need a right-hand side or a load vector")

    def cell_load(self) -> np.ndarray:
        if self.load is not None:
            load = np.asarray(self.load, dtype=float)
            if load.shape != (self.grid.n_cells,):
                raise ContractError("load needs one entry per cell")
            return load
        t = self.grid.nodes
        if isinstance(self.rhs, GridFunction):
            if self.rhs.grid != self.grid:
                raise ContractError("rhs lives on a different grid")
            v = self.rhs.values
            return 0.5 * (v[:-1] + v[1:]) * self.grid.widths
        return np.array([quad(self.rhs, a, b, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
                         for a, b in zip(t[:-1], t[1:])])


def assemble(problem: FredholmProblem, n_gauss: int = 8) -> np.ndarray:
    edges = problem.grid.nodes
    kf = problem.kernel_fn
    if not callable(kf) or isinstance(kf, PhiTerm):
        terms = [kf] if isinstance(kf, PhiTerm) else list(kf)
        n = problem.grid.n_cells
        K = np.zeros((n, n))
        for term in terms:
            K += term.matrix(edges)
        return K
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    pts = (half[:, None] * x[None, :] + 0.5 * (a + b)[:, None]).ravel()
    wts = (half[:, None] * w[None, :]).ravel()
    n = a.size
    K = np.empty((n, n))
    rows_per_chunk = max(1, 2_000_000 // (pts.size * n_gauss))
    for lo in range(0, n, rows_per_chunk):
        hi = min(n, lo + rows_per_chunk)
        sp = pts[lo * n_gauss:hi * n_gauss]
        sw = wts[lo * n_gauss:hi * n_gauss]
        vals = kf(sp[:, None], pts[None, :]) * sw[:, None] * wts[None, :]
        K[lo:hi] = vals.reshape(hi - lo, n_gauss, n, n_gauss).sum(axis=(1, 3))
    return 0.5 * (K + K.T)


@dataclass(frozen=True, eq=False)
class TikhonovSolution:
    u: GridFunction
    reg_param: float
    discrepancy: float
    residual_norm: float
    converged: bool = True

    @property
    def boundary_flags(self) -> np.ndarray:
        return boundary_layer(self.u.grid)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "u", "flag_boundary_layer"])
            for t, u, f in zip(self.u.grid.nodes, self.u.values, self.boundary_flags):
                w.writerow([repr(float(t)), repr(float(u)), int(f)])


def boundary_layer(grid: TimeGrid) -> np.ndarray:
    """True on nodes in the last 10% of the horizon (truncation-polluted)."""
    return grid.nodes > (1.0 - BOUNDARY_FRACTION) * grid.t_max


def _residual_norm(lam, coef, mu):
    return float(np.linalg.norm(mu * coef / (lam ** 2 + mu)))


def tikhonov(K: np.ndarray, load: np.ndarray, noise_level: float = 0.0,
             scaling: np.ndarray | None = None, mu: float | None = None):
    """Minimize ||K u - g||^2 + mu ||u||^2 (in the D-scaled variables).

    With ``noise_level`` > 0 the parameter follows the discrepancy principle
    ||K u - g|| = noise_level; otherwise ``mu`` (default 1e-10) is used.
    Returns (cell values, mu, discrepancy, residual norm, converged).
    """
    if noise_level < 0:
        raise ContractError("noise level must be non-negative")
    K = np.asarray(K, dtype=float)
    g = np.asarray(load, dtype=float)
    D = np.ones(g.size) if scaling is None else np.asarray(scaling, dtype=float)
    Ks = D[:, None] * K * D[None, :]
    gs = D * g
    lam, V = np.linalg.eigh(0.5 * (Ks + Ks.T))
    coef = V.T @ gs
    converged = True
    if noise_level == 0:
        mu = FIXED_MU if mu is None else mu
    else:
        top = float(np.max(lam ** 2))
        lo, hi = 1e-16 * top, 1e4 * top
        if _residual_norm(lam, coef, lo) > noise_level:
            mu, converged = lo, False
        elif _residual_norm(lam, coef, hi) < noise_level:
            mu = hi
        else:
            root = brentq(lambda x: _residual_norm(lam, coef, np.exp(x)) - noise_level,
                          np.log(lo), np.log(hi), xtol=1e-10)
            mu = float(np.exp(root))
    w = V @ (lam / (lam ** 2 + mu) * coef)
    u = D * w
    res = float(np.linalg.norm(Ks @ w - gs))
    return u, float(mu), res - noise_level, res, converged


def tikhonov_solve(problem: FredholmProblem, noise_level: float = 0.0,
                   mu: float | None = None) -> TikhonovSolution:
    K = assemble(problem)
    u, mu, disc, res, ok = tikhonov(K, problem.cell_load(), noise_level, problem.scaling, mu)
    values = np.append(u, u[-1])
    return TikhonovSolution(GridFunction(problem.grid, values), mu, disc, res, ok)


def residual_sweep(K: np.ndarray, load: np.ndarray, mus: Sequence[float],
                   scaling: np.ndarray | None = None) -> np.ndarray:
    """Residual norms for a list of regularization parameters."""
    return np.array([tikhonov(K, load, 0.0, scaling, mu)[3] for mu in mus])

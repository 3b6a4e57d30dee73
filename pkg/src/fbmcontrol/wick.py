"""Discrete Wick-Ito-Skorohod integration and the checks built on it.

Wick products against increments are realized with the first-order
correction

    F(t_i) <> dB_i = F(t_i) dB_i - int_{t_i}^{t_{i+1}} D^phi_s F(t_i) ds,

which is exact for the integrand families supported here (deterministic
integrands, affine functionals of the path, smooth functions of a Gaussian
diffusion with deterministic coefficients).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .errors import AccuracyError, ContractError
from .kernel import (GridFunction, HurstParam, PhiKernel, TimeGrid, as_hurst,
                     inner_product_phiT, norm_sq_running)
from .paths import FbmEnsemble

logger = logging.getLogger(__name__)

GH_START = 16
GH_MAX = 256
GH_RTOL = 1e-7


def _zero(t):
    return np.zeros_like(np.asarray(t, dtype=float))


def drift_at(spec, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.broadcast_to(np.asarray(spec.drift_b(t), dtype=float), t.shape)


def lower_cell_matrix(kernel: PhiKernel, grid: TimeGrid) -> np.ndarray:
    """C[i, j] = cell integral over cell i x cell j for j < i, zero elsewhere."""
    return np.tril(kernel.cell_matrix(grid.nodes), -1)


# --------------------------------------------------------------------------
# integrands and the Wick sum
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WickIntegrand:
    """Integrand F(t_i) together with its phi-derivative.

    ``values`` has shape (..., n_nodes). The phi-derivative is supplied either
    as ``corrections`` (already integrated over each cell, shape (..., n_cells))
    or as ``dphi(s, i, path)`` returning D^phi_s F(t_i) for an array of s; the
    latter is integrated per cell by Gauss-Legendre. Neither means the
    integrand is deterministic.
    """

    values: np.ndarray
    dphi: Callable | None = None
    corrections: np.ndarray | None = None

    @classmethod
    def deterministic(cls, f: GridFunction) -> "WickIntegrand":
        return cls(f.values)

    @classmethod
    def fbm(cls, paths: np.ndarray, kernel: PhiKernel, grid: TimeGrid,
            scale: float = 1.0) -> "WickIntegrand":
        """F(t) = scale * B_t, with D^phi_s B_t = int_0^t phi(s, u) du."""
        edges = grid.nodes
        corr = scale * kernel.cell_integral(edges[:-1], edges[1:], 0.0, edges[:-1])
        return cls(scale * np.asarray(paths), corrections=corr)

    def cell_corrections(self, grid: TimeGrid, n_gauss: int = 16) -> np.ndarray:
        if self.corrections is not None:
            return np.asarray(self.corrections)
        if self.dphi is None:
            return np.zeros(grid.n_cells)
        x, w = np.polynomial.legendre.leggauss(n_gauss)
        vals = np.atleast_2d(self.values)
        out = np.zeros(vals.shape[:-1] + (grid.n_cells,))
        for p in range(vals.shape[0]):
            for i in range(grid.n_cells):
                a, b = grid.nodes[i], grid.nodes[i + 1]
                s = 0.5 * (b - a) * x + 0.5 * (a + b)
                out[p, i] = 0.5 * (b - a) * np.dot(w, self.dphi(s, i, p))
        return out.reshape(np.shape(self.values)[:-1] + (grid.n_cells,))


def wis_integral(integrand: WickIntegrand, path, grid: TimeGrid):
    """Wick-Riemann sum of the integrand against one path or a stack of paths."""
    path = np.asarray(path, dtype=float)
    dB = np.diff(path, axis=-1)
    F = np.asarray(integrand.values)[..., :-1]
    terms = F * dB - integrand.cell_corrections(grid)
    out = np.sum(terms, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def plain_riemann_sum(values, path):
    return np.sum(np.asarray(values)[..., :-1] * np.diff(path, axis=-1), axis=-1)


def _z(stat, target, se):
    if se > 0:
        return (stat - target) / se
    return 0.0 if stat == target else float("inf")


@dataclass(frozen=True)
class MomentCheck:
    mean: float
    variance: float
    exact_variance: float
    se_mean: float
    se_variance: float
    z_mean: float
    z_variance: float

    @property
    def passed(self) -> bool:
        return abs(self.z_mean) < 4.0 and abs(self.z_variance) < 4.0


def wis_moments_check(f: GridFunction, ensemble: FbmEnsemble, noise: int = 0) -> MomentCheck:
    """Zero mean and variance ||f||_H^2 of the integral of a deterministic f."""
    kernel = PhiKernel(ensemble.hursts[noise])
    I = wis_integral(WickIntegrand.deterministic(f), ensemble.noise(noise), ensemble.grid)
    n = I.size
    mean = float(I.mean())
    var = float(I.var(ddof=1))
    exact = inner_product_phiT(kernel, f, f)
    se_mean = float(np.sqrt(var / n))
    m4 = float(np.mean((I - mean) ** 4))
    se_var = float(np.sqrt(max(m4 - var ** 2, 0.0) / n))
    return MomentCheck(mean, var, exact, se_mean, se_var,
                       _z(mean, 0.0, se_mean), _z(var, exact, se_var))


# --------------------------------------------------------------------------
# Gaussian diffusions eta_t = eta0 + b(t) + sum_k int sigma_k dB^{H_k}
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EtaSpec:
    """eta_t = eta0 + drift_b(t) + sum_k int_0^t sigma_k dB^{H_k}.

    ``sigma`` and ``hurst`` may be single objects or matching sequences (one
    per driving noise). With ``strict`` the variance clock ||sigma||^2_t must
    increase strictly along the grid.
    """

    eta0: float
    drift_b: Callable
    sigma: GridFunction | Sequence[GridFunction]
    hurst: HurstParam | Sequence[HurstParam]
    strict: bool = True
    _clock: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sig = (self.sigma,) if isinstance(self.sigma, GridFunction) else tuple(self.sigma)
        hur = self.hurst if isinstance(self.hurst, (list, tuple)) else (self.hurst,)
        hur = tuple(as_hurst(h) for h in hur)
        if len(sig) != len(hur):
            raise ContractError("one sigma per Hurst index required")
        if any(s.grid != sig[0].grid for s in sig):
            raise ContractError("all sigma must share a grid")
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "hurst", hur)
        object.__setattr__(self, "drift_b", self.drift_b if self.drift_b is not None else _zero)
        clock = sum(norm_sq_running(PhiKernel(h), s) for s, h in zip(sig, hur))
        object.__setattr__(self, "_clock", clock)
        if self.strict and not np.all(np.diff(clock) > 0):
            raise ContractError("variance clock ||sigma||_t^2 is not strictly increasing")

    @property
    def grid(self) -> TimeGrid:
        return self.sigma[0].grid

    @property
    def kernels(self) -> tuple:
        return tuple(PhiKernel(h) for h in self.hurst)

    @property
    def n_noises(self) -> int:
        return len(self.sigma)

    def variance_clock(self, t=None):
        """||sigma||^2_t summed over noises; at the nodes when t is None."""
        if t is None:
            return self._clock
        return sum(inner_product_phiT(k, s, s, t) for k, s in zip(self.kernels, self.sigma))

    def paths(self, ensemble: FbmEnsemble) -> np.ndarray:
        """eta at every node for every path, shape (n_paths, n_nodes)."""
        if ensemble.grid != self.grid or ensemble.n_noises < self.n_noises:
            raise ContractError("ensemble does not match the diffusion")
        t = self.grid.nodes
        eta = np.full((ensemble.n_paths, t.size), float(self.eta0)) + drift_at(self, t)
        for k, s in enumerate(self.sigma):
            inc = s.cell_values * ensemble.increments(k)
            eta[:, 1:] += np.cumsum(inc, axis=-1)
        return eta

    def sigma_hat(self, noise: int = 0) -> np.ndarray:
        """D^phi_t eta_t = int_0^t sigma_u phi(t, u) du at each node."""
        t = self.grid.nodes
        return dphi_eta(self, t, t, noise)

    def correction_matrix(self, noise: int = 0) -> np.ndarray:
        """Row i holds sigma_j * cell(i, j), j < i; row sums give int_cell_i D^phi eta_{t_i}."""
        C = lower_cell_matrix(self.kernels[noise], self.grid)
        return C * self.sigma[noise].cell_values[None, :]

    def on_grid(self, grid: TimeGrid) -> "EtaSpec":
        """Same diffusion with sigma sampled at the nodes of a coarser grid."""
        sig = tuple(GridFunction(grid, s(grid.nodes)) for s in self.sigma)
        return EtaSpec(self.eta0, self.drift_b, sig, self.hurst, self.strict)


def dphi_eta(spec: EtaSpec, s, t, noise: int = 0):
    """D^phi_s eta_t = int_0^t sigma_u phi(s, u) du, sigma a step function."""
    kernel = spec.kernels[noise]
    sig = spec.sigma[noise].cell_values
    a = spec.grid.nodes[:-1]
    b = spec.grid.nodes[1:]
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0) or np.any(t < 0):
        raise ContractError("dphi_eta needs s, t >= 0")
    s_, t_ = np.broadcast_arrays(s, t)
    hi = np.minimum(b, t_[..., None])
    active = a < t_[..., None]
    G = kernel.antiderivative
    rows = np.where(active, G(hi - s_[..., None]) - G(a - s_[..., None]), 0.0)
    out = rows @ sig
    return out.item() if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# Ito formula residual
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarField:
    """f(t, x) and the partial derivatives the Ito formula needs."""

    f: Callable
    f_t: Callable
    f_x: Callable
    f_xx: Callable


def ito_residual(fn: ScalarField, spec: EtaSpec, paths, grid: TimeGrid | None = None) -> np.ndarray:
    """Pathwise residual of the fractional Ito formula on the grid.

    ``paths`` is an ensemble or an array (n_paths, n_noises, n_nodes) of fBm
    values. Returns f(T, eta_T) - f(0, eta0) minus the discretized right-hand
    side, one value per path.
    """
    if isinstance(paths, FbmEnsemble):
        paths = paths.paths
    grid = spec.grid if grid is None else grid
    if grid != spec.grid:
        raise ContractError("paths grid must match the diffusion grid")
    paths = np.asarray(paths, dtype=float)
    t = grid.nodes
    dt = grid.widths
    eta = np.full((paths.shape[0], t.size), float(spec.eta0)) + drift_at(spec, t)
    for k, s in enumerate(spec.sigma):
        eta[:, 1:] += np.cumsum(s.cell_values * np.diff(paths[:, k, :], axis=-1), axis=-1)
    ti = t[:-1]
    ei = eta[:, :-1]
    fx = fn.f_x(ti, ei)
    fxx = fn.f_xx(ti, ei)
    rhs = fn.f_t(ti, ei) * dt + fx * np.diff(drift_at(spec, t))
    for k, s in enumerate(spec.sigma):
        sig = s.cell_values
        dB = np.diff(paths[:, k, :], axis=-1)
        wick_corr = spec.correction_matrix(k).sum(axis=1)
        rhs = rhs + fx * sig * dB - fxx * sig * wick_corr
        rhs = rhs + fxx * sig * spec.sigma_hat(k)[:-1] * dt
    return fn.f(t[-1], eta[:, -1]) - fn.f(0.0, float(spec.eta0)) - rhs.sum(axis=-1)


def ito_refinement(fn: ScalarField, spec: EtaSpec, ensemble: FbmEnsemble,
                   strides: Sequence[int] = (4, 2, 1)) -> list[tuple[int, float]]:
    """Mean |Ito residual| on nested sub-grids of one fine ensemble.

    Returns (n_nodes, mean |residual|) pairs from coarse to fine and logs the
    empirical order between consecutive levels.
    """
    out = []
    for stride in strides:
        sub = ensemble.subsample(stride)
        sub_spec = spec.on_grid(sub.grid) if stride != 1 else spec
        r = ito_residual(fn, sub_spec, sub.paths, sub.grid)
        out.append((sub.grid.n_nodes, float(np.mean(np.abs(r)))))
    for (n0, e0), (n1, e1) in zip(out, out[1:]):
        if e0 > 0 and e1 > 0:
            order = np.log(e0 / e1) / np.log((n1 - 1) / (n0 - 1))
            logger.info("Ito residual %d -> %d nodes: %.3g -> %.3g (order %.2f)", n0, n1, e0, e1, order)
    return out


# --------------------------------------------------------------------------
# quasi-conditional expectation via the heat semigroup
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _gauss_hermite(n: int):
    x, w = hermegauss(n)
    return x, w / np.sqrt(2.0 * np.pi)


def heat_semigroup(fn: Callable, v: float, x, rtol: float = GH_RTOL):
    """P_v fn(x) = E[fn(x + sqrt(v) Z)], Z standard normal.

    Gauss-Hermite with node counts doubled from 16 to 256 until the relative
    change drops below ``rtol``.
    """
    x = np.asarray(x, dtype=float)
    if v < 0:
        raise ContractError("semigroup time must be non-negative")
    if v == 0:
        out = np.asarray(fn(x), dtype=float) * np.ones_like(x)
        return out.item() if out.ndim == 0 else out
    sd = np.sqrt(v)
    prev = None
    n = GH_START
    while n <= GH_MAX:
        z, w = _gauss_hermite(n)
        arg = x[..., None] + sd * z
        vals = np.broadcast_to(np.asarray(fn(arg), dtype=float), arg.shape)
        cur = vals @ w
        scale = np.abs(vals) @ w
        if prev is not None:
            change = np.abs(cur - prev)
            if np.all(change <= rtol * np.maximum(scale, 1e-300)):
                return cur.item() if cur.ndim == 0 else cur
        prev = cur
        n *= 2
    raise AccuracyError(f"Gauss-Hermite did not converge to {rtol} with {GH_MAX} nodes (v={v})")


def quasi_cond_exp(h_fn: Callable, spec: EtaSpec, t: float, x_t, T: float):
    """E~[h(eta_T) | F_t] given eta_t = x_t, i.e. P_v h(x_t + b_T - b_t),
    with v = ||sigma||^2_T - ||sigma||^2_t."""
    if t > T:
        raise ContractError("quasi-conditional expectation needs t <= T")
    v = spec.variance_clock(T) - spec.variance_clock(t)
    if v < -1e-14:
        raise ContractError("variance clock decreased")
    shift = float(drift_at(spec, T) - drift_at(spec, t))
    return heat_semigroup(h_fn, max(v, 0.0), np.asarray(x_t, dtype=float) + shift)


@dataclass(frozen=True)
class ZeroCheck:
    quasi_value: float
    statistic: float
    exact: float
    std_error: float
    z: float
    z_exact: float


def quasi_cond_integral_zero_check(f: GridFunction, ensemble: FbmEnsemble, t: float,
                                   weight: str = "constant", noise: int = 0) -> ZeroCheck:
    """Check E~[int_t^T f dB | F_t] = 0 and contrast it with a plain moment.

    ``quasi_value`` is the largest |E~[Y | F_t]| over paths, Y the future
    integral, computed through the semigroup representation of
    eta_s = int_0^s f 1_[t,T] dB. ``statistic`` is the sample mean of W * Y for
    an F_t-measurable weight W: ``"constant"`` (W = 1, exact value 0) or
    ``"fbm"`` (W = B_t, exact value <1_[0,t], f 1_[t,T]>_H, which is not zero
    because fBm increments are correlated). ``z`` is taken against 0,
    ``z_exact`` against the exact value.
    """
    grid = ensemble.grid
    i = grid.index_of(t)
    fut = f.values * (grid.nodes >= grid.nodes[i])
    fut_f = GridFunction(grid, fut)
    B = ensemble.noise(noise)
    Y = wis_integral(WickIntegrand.deterministic(fut_f), B, grid)
    kernel = PhiKernel(ensemble.hursts[noise])
    if np.any(fut_f.cell_values != 0):
        spec = EtaSpec(0.0, None, fut_f, ensemble.hursts[noise], strict=False)
        eta_t = spec.paths(ensemble)[:, i]
        q = quasi_cond_exp(lambda x: x, spec, t, eta_t, grid.t_max) - eta_t
        quasi = float(np.max(np.abs(q)))
    else:
        quasi = 0.0
    if weight == "constant":
        W = np.ones_like(Y)
        exact = 0.0
    elif weight == "fbm":
        W = B[:, i]
        exact = inner_product_phiT(kernel, GridFunction.indicator(grid, 0.0, t), fut_f)
    else:
        raise ContractError(f"unknown weight {weight!r}")
    prod = W * Y
    stat = float(prod.mean())
    se = float(prod.std(ddof=1) / np.sqrt(prod.size)) if prod.size > 1 else 0.0
    return ZeroCheck(quasi, stat, exact, se, _z(stat, 0.0, se), _z(stat, exact, se))


# --------------------------------------------------------------------------
# Clark-Hausmann-Ocone reconstruction
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClarkOconeResult:
    kind: str
    rms_relative_error: float
    max_abs_error: float


def clark_ocone_check(kind: str, ensemble_or_paths, grid: TimeGrid | None = None,
                      h=None, noise: int = 0) -> ClarkOconeResult:
    """Rebuild F = E[F] + int E~[D_t F | F_t] dB from the Wick sum.

    ``kind`` is ``"linear"`` (F = B_T, integrand 1) or ``"square"``
    (F = B_T^2, E[F] = T^2h, integrand 2 B_t). The error is reported as
    RMS(F_rebuilt - F) / RMS(F).
    """
    if isinstance(ensemble_or_paths, FbmEnsemble):
        ens = ensemble_or_paths
        B = ens.noise(noise)
        grid = ens.grid
        h = ens.hursts[noise]
    else:
        B = np.atleast_2d(np.asarray(ensemble_or_paths, dtype=float))
        if grid is None or h is None:
            raise ContractError("raw paths need a grid and a Hurst index")
    if B.shape[0] == 0:
        raise ContractError("Clark-Ocone check needs at least one path")
    kernel = PhiKernel(h)
    T = grid.t_max
    BT = B[:, -1]
    if kind == "linear":
        F = BT
        rebuilt = wis_integral(WickIntegrand(np.ones_like(B)), B, grid)
    elif kind == "square":
        F = BT ** 2
        rebuilt = T ** (2 * kernel.h) + wis_integral(WickIntegrand.fbm(B, kernel, grid, 2.0), B, grid)
    else:
        raise ContractError(f"unsupported functional {kind!r}")
    err = rebuilt - F
    denom = np.sqrt(np.mean(F ** 2))
    rms = float(np.sqrt(np.mean(err ** 2)) / denom) if denom > 0 else float(np.sqrt(np.mean(err ** 2)))
    return ClarkOconeResult(kind, rms, float(np.max(np.abs(err))))

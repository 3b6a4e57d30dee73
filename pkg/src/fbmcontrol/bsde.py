"""Infinite-horizon fractional BSDEs on a truncated grid.

Two independent solvers are provided:

* :func:`solve_linear` evaluates the closed-form solution of the linear
  equation dp = [alpha + b p + c q] dt + q dB, lim p = 0, as a discounted
  integral of quasi-conditional expectations of alpha.
* :func:`solve_iterative` steps a general Lipschitz/monotone driver backwards
  on increasing horizons, using the heat-semigroup representation at every
  step.

Processes adapted to eta are represented through their Markov form
Y_t = v(t, eta_t): v is tabulated on an x-lattice and splined, and
Z_t = sigma_t * d/dx v(t, eta_t).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline

from .errors import ConfigurationError, ContractError, DriverError, ParameterError
from .fredholm import FredholmProblem, PhiTerm, TikhonovSolution, tikhonov_solve
from .kernel import GridFunction, PhiKernel, TimeGrid, as_hurst, inner_product_phiT
from .paths import FbmEnsemble
from .wick import GH_MAX, GH_RTOL, GH_START, EtaSpec, _gauss_hermite, drift_at

logger = logging.getLogger(__name__)

PICARD_TOL = 1e-10
PICARD_MAX = 200
N_LATTICE = 161


def lambda_gate(lam: float, mu: float, K: float) -> None:
    if not lam > 2.0 * mu + 2.0 * K ** 2:
        raise ParameterError(
            f"discount gate lambda > 2*mu + 2*K^2 violated: lambda={lam}, mu={mu}, K={K}")


# --------------------------------------------------------------------------
# integrating factor and Girsanov kernel
# --------------------------------------------------------------------------

def integrating_factor(b_coef: Callable, t: float) -> float:
    """beta(t) = exp(-int_0^t b(s) ds)."""
    if t == 0:
        return 1.0
    val, _ = quad(b_coef, 0.0, t, epsabs=1e-14, epsrel=1e-13, limit=200)
    return float(np.exp(-val))


def cumulative_integral(fn: Callable, grid: TimeGrid) -> np.ndarray:
    """int_0^{t_k} fn at every node."""
    t = grid.nodes
    cells = [quad(fn, a, b, epsabs=1e-14, epsrel=1e-13, limit=200)[0] for a, b in zip(t[:-1], t[1:])]
    return np.concatenate([[0.0], np.cumsum(cells)])


@dataclass(frozen=True, eq=False)
class GirsanovShift:
    """Kernel c_hat with int_0^T c_hat(s) phi(s, t) ds = c(t)."""

    c_hat: GridFunction
    norm_sq: float
    solution: TikhonovSolution | None

    exponent: str = "-int_0^T c_hat dB - 0.5 * ||c_hat||_H^2"

    @property
    def converged(self) -> bool:
        return self.solution is None or self.solution.converged

    def density(self, paths) -> np.ndarray:
        """dP^/dP along each path: exp(-sum c_hat_i dB_i - ||c_hat||^2 / 2)."""
        dB = np.diff(np.asarray(paths, dtype=float), axis=-1)
        return np.exp(-(dB @ self.c_hat.cell_values) - 0.5 * self.norm_sq)


def girsanov_shift(c_coef: Callable, hurst, grid: TimeGrid, noise_level: float = 0.0,
                   load: np.ndarray | None = None) -> GirsanovShift:
    """Solve the first-kind equation for the fractional Girsanov kernel."""
    kernel = PhiKernel(as_hurst(hurst))
    probe = np.asarray(c_coef(grid.nodes), dtype=float) * np.ones(grid.n_nodes)
    if load is None and not np.any(probe):
        mid = 0.5 * (grid.nodes[:-1] + grid.nodes[1:])
        if not np.any(np.asarray(c_coef(mid), dtype=float)):
            zero = GridFunction(grid, np.zeros(grid.n_nodes))
            return GirsanovShift(zero, 0.0, None)
    problem = FredholmProblem(grid, [PhiTerm(kernel)], rhs=c_coef, load=load)
    sol = tikhonov_solve(problem, noise_level)
    c_hat = sol.u
    return GirsanovShift(c_hat, inner_product_phiT(kernel, c_hat, c_hat), sol)


# --------------------------------------------------------------------------
# specs
# --------------------------------------------------------------------------

def _sup_on_grid(fn, grid: TimeGrid) -> np.ndarray:
    t = np.linspace(0.0, grid.t_max, 4 * grid.n_nodes)
    return np.broadcast_to(np.asarray(fn(t), dtype=float), t.shape)


@dataclass(frozen=True, eq=False)
class LinearBsdeSpec:
    """dp = [alpha(t, eta_t) + b(t) p + c(t) q] dt + q dB,  p(t) -> 0.

    alpha must be a function of (t, eta_t); general adapted alpha is out of
    reach of the semigroup representation. The discount gate uses the
    induced driver g(t, y, z) = -(alpha + b y + c z), whose monotonicity
    constant is mu = sup(-b) and Lipschitz constant K = sup|c|.
    """

    alpha: Callable
    b_coef: Callable
    c_coef: Callable
    eta: EtaSpec
    lam: float
    mu: float = field(init=False)
    K: float = field(init=False)

    def __post_init__(self):
        grid = self.eta.grid
        b = _sup_on_grid(self.b_coef, grid)
        c = _sup_on_grid(self.c_coef, grid)
        object.__setattr__(self, "mu", float(np.max(-b)))
        object.__setattr__(self, "K", float(np.max(np.abs(c))))
        lambda_gate(self.lam, self.mu, self.K)

    @property
    def grid(self) -> TimeGrid:
        return self.eta.grid


@dataclass(frozen=True, eq=False)
class DriverSpec:
    """Driver g(t, y, z) (or g(t, x, y, z) with ``state_dependent``).

    Construction enforces lambda > 2 mu + 2 K^2 and spot-checks monotonicity
    in y and the Lipschitz bound in z on a fixed sample.
    """

    g: Callable
    mu: float
    K: float
    lam: float
    state_dependent: bool = False

    def __post_init__(self):
        if self.K < 0:
            raise ParameterError("Lipschitz constant K must be non-negative")
        lambda_gate(self.lam, self.mu, self.K)
        self.spot_check()

    def __call__(self, t, x, y, z):
        if self.state_dependent:
            return self.g(t, x, y, z)
        return self.g(t, y, z)

    def spot_check(self, n: int = 256, seed: int = 7) -> None:
        rng = np.random.default_rng(seed)
        t = rng.uniform(0.0, 10.0, n)
        x = rng.normal(0.0, 2.0, n)
        y, y2, z, z2 = rng.normal(0.0, 3.0, (4, n))
        gy = np.asarray(self(t, x, y, z), dtype=float)
        gy2 = np.asarray(self(t, x, y2, z), dtype=float)
        gz2 = np.asarray(self(t, x, y, z2), dtype=float)
        tol = 1e-9 * (1.0 + np.abs(gy))
        if np.any((y - y2) * (gy - gy2) > self.mu * (y - y2) ** 2 + tol):
            raise ParameterError("driver is not monotone in y with the declared mu")
        if np.any(np.abs(gy - gz2) > self.K * np.abs(z - z2) + tol):
            raise ParameterError("driver is not K-Lipschitz in z")


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """p (n_paths, n_nodes), q (n_paths, n_noises, n_nodes) on the grid."""

    grid: TimeGrid
    p: np.ndarray
    q: np.ndarray
    tail_bound: float
    p_xx: np.ndarray | None = None
    horizon: float | None = None

    def to_csv(self, path) -> None:
        m = self.q.shape[1]
        qcols = ["q"] if m == 1 else [f"q{k + 1}" for k in range(m)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "t", "p", *qcols])
            for i in range(self.p.shape[0]):
                for j, t in enumerate(self.grid.nodes):
                    w.writerow([i, repr(float(t)), repr(float(self.p[i, j])),
                                *(repr(float(self.q[i, k, j])) for k in range(m))])


def write_key_values(path, values: dict) -> None:
    """Report file with columns key, value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for k, v in values.items():
            w.writerow([k, repr(float(v)) if isinstance(v, (float, np.floating)) else v])


# --------------------------------------------------------------------------
# lattice helpers
# --------------------------------------------------------------------------

def _lattice(eta_paths: np.ndarray, spread: float, n: int = N_LATTICE) -> np.ndarray:
    lo = float(eta_paths.min()) - 6.0 * spread - 1.0
    hi = float(eta_paths.max()) + 6.0 * spread + 1.0
    return np.linspace(lo, hi, n)


def _semigroup_block(fn: Callable, v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """out[j, a] = E[fn(j, x[j, a] + sqrt(v[j]) Z)] by adaptive Gauss-Hermite."""
    sd = np.sqrt(np.maximum(v, 0.0))[:, None, None]
    prev = None
    n = GH_START
    while n <= GH_MAX:
        z, w = _gauss_hermite(n)
        arg = x[..., None] + sd * z
        vals = np.broadcast_to(np.asarray(fn(arg), dtype=float), arg.shape)
        cur = vals @ w
        if prev is not None:
            scale = np.abs(vals) @ w
            if np.all(np.abs(cur - prev) <= GH_RTOL * np.maximum(scale, 1e-300)):
                return cur
        prev = cur
        n *= 2
    from .errors import AccuracyError
    raise AccuracyError("Gauss-Hermite block did not converge")


def _eval_spline(xs, ys, x, fd_step: float | None = None):
    """Value, first and second x-derivative of the lattice function at x.

    Derivatives are central finite differences on the spline with step
    fd_step * max(1, |x|).
    """
    sp = CubicSpline(xs, ys, extrapolate=True)
    val = sp(x)
    h = (1e-4 if fd_step is None else fd_step) * np.maximum(1.0, np.abs(x))
    up, dn = sp(x + h), sp(x - h)
    return val, (up - dn) / (2 * h), (up - 2 * val + dn) / h ** 2


# --------------------------------------------------------------------------
# linear solver
# --------------------------------------------------------------------------

def solve_linear(spec: LinearBsdeSpec, ensemble: FbmEnsemble,
                 tail_bound: float | None = None) -> BsdeSolution:
    """Closed-form solution on [0, t_max]:

        p(t) = -int_t^{t_max} exp(-int_t^s b) E~[alpha(s) | F_t] ds,

    with the quasi-conditional expectation from the heat semigroup and the
    s-integral by composite Simpson (grid nodes plus cell midpoints). The
    ensemble supplies the paths of the noise under which the
    quasi-conditional expectation is taken (the shifted fBm when c is not
    zero).
    """
    eta_spec = spec.eta
    grid = eta_spec.grid
    if ensemble.grid != grid:
        raise ContractError("ensemble and spec grids differ")
    t = grid.nodes
    n = t.size
    eta = eta_spec.paths(ensemble)
    clock = eta_spec.variance_clock()
    xs = _lattice(eta, np.sqrt(clock[-1]))

    # fine abscissae: node i sits at 2i, the midpoint of cell i at 2i + 1
    mid = 0.5 * (t[:-1] + t[1:])
    s_f = np.empty(2 * n - 1)
    s_f[0::2], s_f[1::2] = t, mid
    clock_f = np.empty_like(s_f)
    clock_f[0::2] = clock
    clock_f[1::2] = [eta_spec.variance_clock(m) for m in mid]
    drift_f = drift_at(eta_spec, s_f)
    Bn = cumulative_integral(spec.b_coef, grid)
    Bc_f = np.empty_like(s_f)
    Bc_f[0::2] = Bn
    Bc_f[1::2] = Bn[:-1] + [quad(spec.b_coef, a, m, epsabs=1e-14, epsrel=1e-13)[0]
                            for a, m in zip(t[:-1], mid)]
    simpson = np.empty(2 * n - 1)

    table = np.zeros((n, xs.size))
    for i in range(n - 1):
        J = np.arange(2 * i, 2 * n - 1)
        v = clock_f[J] - clock_f[2 * i]
        shift = drift_f[J] - drift_f[2 * i]
        sj = s_f[J][:, None, None]
        vals = _semigroup_block(lambda arg: spec.alpha(sj, arg), v,
                                xs[None, :] + shift[:, None])
        weights = np.exp(-(Bc_f[J] - Bc_f[2 * i]))
        h = grid.widths[i:] / 6.0
        w = simpson[: J.size]
        w[:] = 0.0
        w[0:-1:2] += h
        w[1::2] += 4.0 * h
        w[2::2] += h
        table[i] = -(w * weights) @ vals

    p = np.empty_like(eta)
    px = np.empty_like(eta)
    pxx = np.empty_like(eta)
    for i in range(n):
        p[:, i], px[:, i], pxx[:, i] = _eval_spline(xs, table[i], eta[:, i])
    sig = np.stack([s.values for s in eta_spec.sigma])  # (m, n)
    q = px[:, None, :] * sig[None, :, :]

    if tail_bound is None:
        inf_b = float(np.min(_sup_on_grid(spec.b_coef, grid)))
        if inf_b <= 0:
            raise ConfigurationError(
                "b is not bounded away from 0; supply tail_bound for the truncated tail")
        a_T = np.broadcast_to(np.asarray(spec.alpha(t[-1], eta[:, -1]), dtype=float), eta[:, -1].shape)
        tail_bound = float(np.max(np.abs(a_T)) / inf_b)
    return BsdeSolution(grid, p, q, float(tail_bound), pxx, grid.t_max)


@dataclass(frozen=True)
class ForwardCheck:
    mean: np.ndarray
    std_error: np.ndarray
    allowance: np.ndarray
    max_excess_z: float
    passed: bool


def forward_residual(sol: BsdeSolution, alpha: Callable, b_coef: Callable,
                     eta_spec: EtaSpec, ensemble: FbmEnsemble) -> np.ndarray:
    """Per-path, per-cell residual of dp - (alpha + b p) dt - q <> dB.

    The drift is integrated by the trapezoid rule; the Wick correction uses
    D^phi q = sigma * p_xx * D^phi eta.
    """
    grid = sol.grid
    t = grid.nodes
    dt = grid.widths
    eta = eta_spec.paths(ensemble)
    a = np.broadcast_to(np.asarray(alpha(t[None, :], eta), dtype=float), eta.shape)
    b = np.broadcast_to(np.asarray(b_coef(t), dtype=float), t.shape)
    drift = a + b[None, :] * sol.p
    r = np.diff(sol.p, axis=1) - 0.5 * (drift[:, :-1] + drift[:, 1:]) * dt
    for k in range(sol.q.shape[1]):
        dB = ensemble.increments(k)
        r = r - sol.q[:, k, :-1] * dB
        if sol.p_xx is not None:
            sig = eta_spec.sigma[k].cell_values
            corr = eta_spec.correction_matrix(k).sum(axis=1)
            r = r + sig * sol.p_xx[:, :-1] * corr
    return r


def trapezoid_truncation(drift: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """Local error estimate dt^3 |f''| / 12 of the trapezoid rule per cell,
    with f'' from second differences of the node values."""
    sec = np.abs(np.diff(drift, 2))
    per_cell = np.concatenate([sec[:1], sec]) if sec.size else np.zeros(widths.size)
    return per_cell * widths / 12.0


def forward_check(sol: BsdeSolution, alpha: Callable, b_coef: Callable, eta_spec: EtaSpec,
                  ensemble: FbmEnsemble, atol: float = 1e-12) -> ForwardCheck:
    """Cell-wise test that the ensemble-mean forward residual is within
    4 SE of zero.

    The drift integral is a trapezoid rule, so the residual of even the exact
    solution carries its local truncation error; twice the a-posteriori
    estimate of that error is added to the allowance, together with a
    rounding floor ``atol`` for deterministic instances.
    """
    residual = forward_residual(sol, alpha, b_coef, eta_spec, ensemble)
    n = residual.shape[0]
    mean = residual.mean(axis=0)
    se = residual.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(residual.shape[1])
    t = sol.grid.nodes
    eta = eta_spec.paths(ensemble)
    a = np.broadcast_to(np.asarray(alpha(t[None, :], eta), dtype=float), eta.shape)
    b = np.broadcast_to(np.asarray(b_coef(t), dtype=float), t.shape)
    drift = (a + b[None, :] * sol.p).mean(axis=0)
    allowance = 2.0 * trapezoid_truncation(drift, sol.grid.widths) + atol
    excess = np.abs(mean) - allowance
    z = np.where(se > 0, excess / np.where(se > 0, se, 1.0), np.where(excess > 0, np.inf, 0.0))
    return ForwardCheck(mean, se, allowance, float(np.max(z)), bool(np.all(excess <= 4.0 * se)))


# --------------------------------------------------------------------------
# iterative solver
# --------------------------------------------------------------------------

def default_horizons(t_max: float) -> list[float]:
    return [t_max / 4, t_max / 2, 3 * t_max / 4, t_max]


def solve_iterative(driver: DriverSpec, xi_fn: Callable, horizons: Sequence[float],
                    ensemble: FbmEnsemble, eta_spec: EtaSpec) -> list[BsdeSolution]:
    """Solutions Y^n of the horizon-n problems, one per horizon.

    For t <= n: Y_t = E~[xi | F_n] + int_t^n g ds - int_t^n Z dB, stepped back
    node by node with the trapezoid rule in time (Z explicit, Y implicit via
    Picard iteration). For t > n: Y_t = E~[xi | F_t] and Z_t = sigma_t times
    its x-derivative. The terminal value xi = xi_fn(eta_{t_max}).
    """
    if eta_spec.n_noises != 1:
        raise ContractError("the iterative solver handles one driving noise")
    grid = eta_spec.grid
    if ensemble.grid != grid:
        raise ContractError("ensemble and spec grids differ")
    t = grid.nodes
    n = t.size
    horizons = list(horizons)
    if any(h1 >= h2 for h1, h2 in zip(horizons, horizons[1:])) or horizons[-1] > grid.t_max * (1 + 1e-12):
        raise ContractError("horizons must increase and stay within t_max")
    eta = eta_spec.paths(ensemble)
    clock = eta_spec.variance_clock()
    drift = drift_at(eta_spec, t)
    sig = eta_spec.sigma[0].values
    xs = _lattice(eta, np.sqrt(clock[-1]))
    T = n - 1

    # xi_t = E~[xi | F_t] on the lattice, for every node
    xi_table = _semigroup_block(lambda arg: xi_fn(arg), clock[T] - clock,
                                xs[None, :] + (drift[T] - drift)[:, None])

    out = []
    for horizon in horizons:
        N = int(np.argmin(np.abs(t - horizon)))
        Y = xi_table.copy()
        for i in range(N - 1, -1, -1):
            sp = CubicSpline(xs, Y[i + 1], extrapolate=True)
            dsp = sp.derivative()
            v = np.array([clock[i + 1] - clock[i]])
            x_shift = (xs + drift[i + 1] - drift[i])[None, :]
            e_next = _semigroup_block(lambda arg: sp(arg), v, x_shift)[0]
            t1 = t[i + 1]
            g_next = _semigroup_block(
                lambda arg: driver(t1, arg, sp(arg), sig[i + 1] * dsp(arg)), v, x_shift)[0]
            z_i = sig[i] * CubicSpline(xs, e_next).derivative()(xs)
            dt = t[i + 1] - t[i]
            base = e_next + 0.5 * dt * g_next
            y = base.copy()
            prev_step = np.inf
            for it in range(PICARD_MAX):
                y_new = base + 0.5 * dt * np.asarray(driver(t[i], xs, y, z_i), dtype=float)
                step = float(np.max(np.abs(y_new - y)))
                y = y_new
                if step <= PICARD_TOL * (1.0 + float(np.max(np.abs(y)))):
                    break
                if it > 3 and step > prev_step:
                    raise DriverError(f"Picard iteration diverges at t={t[i]:.4g}; "
                                      "check the driver constants")
                prev_step = step
            else:
                raise DriverError(f"Picard iteration did not converge at t={t[i]:.4g}")
            Y[i] = y
        p = np.empty_like(eta)
        px = np.empty_like(eta)
        pxx = np.empty_like(eta)
        for i in range(n):
            p[:, i], px[:, i], pxx[:, i] = _eval_spline(xs, Y[i], eta[:, i])
        q = (px * sig[None, :])[:, None, :]
        out.append(BsdeSolution(grid, p, q, 0.0, pxx, float(t[N])))
    return out


# --------------------------------------------------------------------------
# a-priori estimate
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AprioriReport:
    horizons: list
    lhs: list
    rhs: float
    ratios: list
    cauchy: list  # (n, m, distance)

    @property
    def finite(self) -> bool:
        return all(np.isfinite(r) for r in self.ratios)

    @property
    def bounded(self) -> bool:
        """Finite ratios whose successive increments do not grow."""
        if not self.finite:
            return False
        inc = np.abs(np.diff(self.ratios))
        return bool(np.all(inc[1:] <= inc[:-1] * (1 + 1e-9) + 1e-15))

    @property
    def cauchy_decreasing(self) -> bool:
        """At least two (n, 2n) distances, strictly decreasing in n."""
        d = [c[2] for c in self.cauchy]
        return len(d) >= 2 and all(b < a for a, b in zip(d, d[1:]))

    def rows(self) -> list[tuple[str, float]]:
        out = [("rhs", self.rhs)]
        for h, l, r in zip(self.horizons, self.lhs, self.ratios):
            out += [(f"lhs[{h:g}]", l), (f"ratio[{h:g}]", r)]
        for n, m, d in self.cauchy:
            out.append((f"cauchy[{n:g},{m:g}]", d))
        return out


def _weighted_norm(grid: TimeGrid, lam: float, Y, Z) -> float:
    w = np.exp(lam * grid.nodes)
    integrand = w * (Y ** 2 + np.sum(Z ** 2, axis=1))
    return float(np.mean(np.trapezoid(integrand, grid.nodes, axis=-1)))


def apriori_check(solutions: Sequence[BsdeSolution], driver: DriverSpec, xi_fn: Callable,
                  eta_spec: EtaSpec, ensemble: FbmEnsemble, lam: float | None = None) -> AprioriReport:
    """Monte Carlo version of the weighted a-priori estimate.

    lhs_n = E int e^{lam s}(|Y^n|^2 + |Z^n|^2) ds and
    rhs = E[e^{lam T}|xi|^2 + int e^{lam s}|g(s, 0, 0)|^2 ds]; the Cauchy
    distances are taken between horizons n and 2n when both are present
    (horizons sit on grid nodes, so the match is to within one cell).
    """
    lam = driver.lam if lam is None else lam
    grid = eta_spec.grid
    t = grid.nodes
    eta = eta_spec.paths(ensemble)
    xi = np.asarray(xi_fn(eta[:, -1]), dtype=float) * np.ones(eta.shape[0])
    g0 = np.broadcast_to(np.asarray(driver(t[None, :], eta, 0.0, 0.0), dtype=float), eta.shape)
    rhs = float(np.mean(np.exp(lam * t[-1]) * xi ** 2
                        + np.trapezoid(np.exp(lam * t) * g0 ** 2, t, axis=-1)))
    lhs = [_weighted_norm(grid, lam, s.p, s.q) for s in solutions]
    ratios = [0.0 if (l == 0 and rhs == 0) else (l / rhs if rhs > 0 else float("inf")) for l in lhs]
    horizons = [s.horizon for s in solutions]
    cauchy = []
    for i, a in enumerate(horizons):
        for j, b in enumerate(horizons):
            if abs(b - 2 * a) <= 1.01 * float(np.max(grid.widths)):
                d = _weighted_norm(grid, lam, solutions[j].p - solutions[i].p,
                                   solutions[j].q - solutions[i].q)
                cauchy.append((a, b, d))
    return AprioriReport(horizons, lhs, rhs, ratios, cauchy)


def c0_report(eta_spec: EtaSpec) -> float:
    """inf_s sigma_hat_s / sigma_s over interior nodes (reported, not used)."""
    s_hat = eta_spec.sigma_hat(0)[1:]
    sig = eta_spec.sigma[0].values[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(sig != 0, s_hat / sig, np.inf)
    return float(np.min(r))

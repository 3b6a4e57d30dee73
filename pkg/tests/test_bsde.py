import numpy as np
import pytest

from fbmcontrol.bsde import (AprioriReport, DriverSpec, LinearBsdeSpec, apriori_check, c0_report,
                             default_horizons, forward_check, girsanov_shift, integrating_factor,
                             lambda_gate, solve_iterative, solve_linear, trapezoid_truncation,
                             write_key_values)
from fbmcontrol.errors import ConfigurationError, ContractError, DriverError, ParameterError
from fbmcontrol.fredholm import boundary_layer
from fbmcontrol.kernel import GridFunction, PhiKernel, TimeGrid
from fbmcontrol.paths import sample_ensemble
from fbmcontrol.wick import EtaSpec


def const(c):
    return lambda t: np.full_like(np.asarray(t, dtype=float), c)


def unit_eta(grid, h=0.7, drift=None):
    return EtaSpec(0.0, drift, GridFunction.constant(grid, 1.0), h)


@pytest.fixture(scope="module")
def small():
    g = TimeGrid.uniform(3.0, 31)
    return g, sample_ensemble(g, 0.7, 300, seed=11)


# --------------------------------------------------------------------------
# integrating factor and Girsanov kernel
# --------------------------------------------------------------------------

@pytest.mark.parametrize("b,t,expect", [(const(0.0), 1.0, 1.0), (const(1.0), 1.0, np.exp(-1)),
                                        (lambda s: s, 2.0, np.exp(-2))])
def test_integrating_factor(b, t, expect):
    assert integrating_factor(b, t) == pytest.approx(expect, rel=1e-10)


def test_girsanov_zero():
    g = TimeGrid.uniform(5.0, 33)
    shift = girsanov_shift(const(0.0), 0.7, g)
    assert shift.norm_sq == 0.0 and not np.any(shift.c_hat.values) and shift.converged
    assert np.allclose(shift.density(np.zeros((2, 33))), 1.0)


def test_girsanov_manufactured_constant():
    g = TimeGrid.uniform(10.0, 129)
    k = PhiKernel(0.7)
    load = k.cell_matrix(g.nodes).sum(axis=1)
    shift = girsanov_shift(lambda t: k.row_integral(t, 0.0, 10.0), 0.7, g, load=load)
    interior = ~boundary_layer(g)
    assert np.max(np.abs(shift.c_hat.values[interior] - 1.0)) < 1e-4
    assert shift.norm_sq == pytest.approx(10.0 ** 1.4, rel=1e-6)


def test_girsanov_constant_self_convergence():
    def solve(n):
        return girsanov_shift(const(1.0), 0.7, TimeGrid.uniform(10.0, n)).c_hat
    coarse = solve(129)
    fine = solve(513).project(coarse.grid)
    mid = 0.5 * (coarse.grid.nodes[:-1] + coarse.grid.nodes[1:])
    # both ends carry the |t|^(1/2 - h) singularity of first-kind solutions
    keep = (mid > 1.0) & (mid < 9.0)
    rms = np.sqrt(np.mean((coarse.cell_values - fine.cell_values)[keep] ** 2))
    assert rms < 1e-3


def test_girsanov_density_has_unit_mean():
    g = TimeGrid.uniform(1.0, 33)
    ens = sample_ensemble(g, 0.7, 20000, seed=2)
    shift = girsanov_shift(const(0.5), 0.7, g)
    dens = shift.density(ens.noise(0))
    assert abs(dens.mean() - 1.0) < 4 * dens.std(ddof=1) / np.sqrt(dens.size)


# --------------------------------------------------------------------------
# gates
# --------------------------------------------------------------------------

def test_lambda_gate():
    lambda_gate(1.51, 0.5, 0.5)
    with pytest.raises(ParameterError, match="lambda"):
        lambda_gate(1.5, 0.5, 0.5)
    g = TimeGrid.uniform(1.0, 5)
    with pytest.raises(ParameterError):
        LinearBsdeSpec(lambda t, x: 0 * x, const(-1.0), const(0.0), unit_eta(g), 1.9)
    with pytest.raises(ParameterError):
        DriverSpec(lambda t, y, z: -y, mu=0.0, K=1.0, lam=2.0)


def test_driver_spot_checks():
    with pytest.raises(ParameterError, match="monotone"):
        DriverSpec(lambda t, y, z: 3.0 * y, mu=1.0, K=0.0, lam=3.0)
    with pytest.raises(ParameterError, match="Lipschitz"):
        DriverSpec(lambda t, y, z: 2.0 * z, mu=0.0, K=1.0, lam=3.0)
    with pytest.raises(ParameterError):
        DriverSpec(lambda t, y, z: 0 * y, mu=0.0, K=-1.0, lam=3.0)
    d = DriverSpec(lambda t, y, z: -y + 0.5 * np.sin(z), mu=-1.0, K=0.5, lam=0.0)
    assert d(0.0, 1.0, 2.0, 0.0) == pytest.approx(-2.0)


def test_missing_tail_bound(small):
    g, ens = small
    spec = LinearBsdeSpec(lambda t, x: np.exp(-t) + 0 * x, const(0.0), const(0.0), unit_eta(g), 0.5)
    with pytest.raises(ConfigurationError):
        solve_linear(spec, ens)


# --------------------------------------------------------------------------
# linear solver
# --------------------------------------------------------------------------

def test_exponential_alpha(small):
    g, ens = small
    alpha = lambda t, x: np.exp(-t) + 0 * x
    spec = LinearBsdeSpec(alpha, const(0.0), const(0.0), unit_eta(g), 0.5)
    sol = solve_linear(spec, ens, tail_bound=np.exp(-3.0))
    exact = -(np.exp(-g.nodes) - np.exp(-3.0))
    assert np.max(np.abs(sol.p - exact)) < 1e-6
    assert np.max(np.abs(sol.q)) < 1e-6
    assert abs(sol.p[:, -1]).max() <= sol.tail_bound
    assert forward_check(sol, alpha, const(0.0), spec.eta, ens).passed


def test_zero_alpha(small):
    g, ens = small
    spec = LinearBsdeSpec(lambda t, x: 0 * x, const(1.0), const(0.0), unit_eta(g), 0.5)
    sol = solve_linear(spec, ens)
    assert not np.any(sol.p) and not np.any(sol.q) and sol.tail_bound == 0.0


def test_state_alpha_closed_form(small):
    # alpha = eta, b = 1: p = -eta_t (1 - e^{-(T - t)}), q = -(1 - e^{-(T - t)})
    g, ens = small
    eta = unit_eta(g)
    alpha = lambda t, x: x + 0 * t
    spec = LinearBsdeSpec(alpha, const(1.0), const(0.0), eta, 0.5)
    sol = solve_linear(spec, ens)
    x = eta.paths(ens)
    factor = -(1.0 - np.exp(-(3.0 - g.nodes)))
    assert np.max(np.abs(sol.p - factor * x)) < 1e-6
    assert np.max(np.abs(sol.q[:, 0, :] - factor)) < 1e-5
    assert sol.tail_bound == pytest.approx(np.max(np.abs(x[:, -1])))
    assert forward_check(sol, alpha, const(1.0), eta, ens).passed


def test_forward_check_detects_wrong_sign(small):
    g, ens = small
    eta = unit_eta(g)
    alpha = lambda t, x: np.exp(-t) * (1 + x)
    spec = LinearBsdeSpec(alpha, const(1.0), const(0.0), eta, 0.5)
    sol = solve_linear(spec, ens)
    assert forward_check(sol, alpha, const(1.0), eta, ens).passed
    flipped = type(sol)(g, -sol.p, -sol.q, sol.tail_bound, -sol.p_xx)
    assert not forward_check(flipped, alpha, const(1.0), eta, ens).passed


def test_trapezoid_truncation_on_parabola():
    t = np.linspace(0, 1, 11)
    est = trapezoid_truncation(t ** 2, np.diff(t))
    # exact local trapezoid error of t^2 is dt^3 / 6 = dt^3 |f''| / 12
    assert np.allclose(est, np.diff(t) ** 3 / 6)


def test_solution_csv(small, tmp_path):
    g, ens = small
    spec = LinearBsdeSpec(lambda t, x: np.exp(-t) * x, const(1.0), const(0.0), unit_eta(g), 0.5)
    sol = solve_linear(spec, ens)
    f = tmp_path / "s.csv"
    type(sol)(g, sol.p[:2], sol.q[:2], sol.tail_bound).to_csv(f)
    data = np.genfromtxt(f, delimiter=",", names=True)
    assert data.dtype.names == ("path_id", "t", "p", "q")
    assert np.array_equal(data["p"].reshape(2, -1), sol.p[:2])
    kv = tmp_path / "kv.csv"
    write_key_values(kv, {"a": 0.1, "b": 2})
    assert kv.read_text().splitlines() == ["key,value", "a,0.1", "b,2"]


# --------------------------------------------------------------------------
# iterative solver and a-priori estimate
# --------------------------------------------------------------------------

def test_iterative_semigroup_identity(small):
    g, ens = small
    drift = lambda t: 0.5 * np.asarray(t)
    eta = unit_eta(g, drift=drift)
    d = DriverSpec(lambda t, y, z: 0 * y, mu=0.0, K=0.0, lam=0.1)
    (sol,) = solve_iterative(d, lambda x: x, [3.0], ens, eta)
    x = eta.paths(ens)
    assert np.max(np.abs(sol.p - (x + 1.5 - drift(g.nodes)))) < 1e-8
    assert np.max(np.abs(sol.q - 1.0)) < 1e-6


def test_iterative_zero(small):
    g, ens = small
    d = DriverSpec(lambda t, y, z: -1.0 * y, mu=-1.0, K=0.0, lam=0.1)
    sols = solve_iterative(d, lambda x: 0 * x, default_horizons(3.0), ens, unit_eta(g))
    assert all(not np.any(s.p) for s in sols)
    rep = apriori_check(sols, d, lambda x: 0 * x, unit_eta(g), ens)
    assert rep.rhs == 0 and rep.ratios == [0.0] * 4 and rep.bounded
    assert not rep.cauchy_decreasing  # all distances are zero


def test_cross_solver_and_apriori(small):
    g, ens = small
    eta = unit_eta(g)
    alpha = lambda t, x: np.exp(-t) * (1 + x)
    lin = solve_linear(LinearBsdeSpec(alpha, const(1.0), const(0.0), eta, 0.5), ens)
    d = DriverSpec(lambda t, x, y, z: -(alpha(t, x) + y), mu=-1.0, K=0.0, lam=0.5,
                   state_dependent=True)
    horizons = default_horizons(3.0)
    sols = solve_iterative(d, lambda x: 0 * x, horizons, ens, eta)
    assert [s.horizon for s in sols] == pytest.approx(horizons, abs=0.05)
    assert np.sqrt(np.mean((sols[-1].p - lin.p) ** 2)) < 1e-3
    rep = apriori_check(sols, d, lambda x: 0 * x, eta, ens)
    assert isinstance(rep, AprioriReport)
    assert rep.finite and rep.bounded and rep.cauchy_decreasing
    assert len(rep.cauchy) == 2 and rep.rows()[0][0] == "rhs"


def test_picard_divergence_is_reported():
    g = TimeGrid.uniform(1.0, 9)
    ens = sample_ensemble(g, 0.7, 20, seed=1)
    d = DriverSpec(lambda t, y, z: 100.0 * y, mu=100.0, K=0.0, lam=201.0)
    with pytest.raises(DriverError):
        solve_iterative(d, lambda x: x, [1.0], ens, unit_eta(g))


def test_iterative_contracts(small):
    g, ens = small
    d = DriverSpec(lambda t, y, z: 0 * y, mu=0.0, K=0.0, lam=0.1)
    with pytest.raises(ContractError):
        solve_iterative(d, lambda x: x, [2.0, 1.0], ens, unit_eta(g))
    with pytest.raises(ContractError):
        solve_iterative(d, lambda x: x, [4.0], ens, unit_eta(g))


def test_c0_report():
    g = TimeGrid.uniform(1.0, 11)
    # sigma = 1: sigma_hat_s = h s^(2h-1), smallest at the first interior node
    assert c0_report(unit_eta(g)) == pytest.approx(0.7 * 0.1 ** 0.4)

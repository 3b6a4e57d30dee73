import numpy as np
import pytest
from scipy.integrate import dblquad, quad

from fbmcontrol.errors import AccuracyError, ContractError
from fbmcontrol.kernel import GridFunction, PhiKernel, TimeGrid
from fbmcontrol.paths import sample_ensemble
from fbmcontrol.wick import (EtaSpec, ScalarField, WickIntegrand, clark_ocone_check, dphi_eta,
                             heat_semigroup, ito_refinement, ito_residual, plain_riemann_sum,
                             quasi_cond_exp, quasi_cond_integral_zero_check, wis_integral,
                             wis_moments_check)

pytestmark = pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")


def phi(h, s, u):
    return h * (2 * h - 1) * abs(s - u) ** (2 * h - 2)


SQUARE = ScalarField(f=lambda t, x: x ** 2, f_t=lambda t, x: 0 * x,
                     f_x=lambda t, x: 2 * x, f_xx=lambda t, x: 2 + 0 * x)


def test_deterministic_integral_is_plain_sum():
    g = TimeGrid.uniform(1.0, 5)
    f = GridFunction(g, [1.0, 2.0, -1.0, 0.5, 0.0])
    path = np.array([0.0, 0.1, -0.3, 0.2, 0.4])
    assert wis_integral(WickIntegrand.deterministic(f), path, g) == pytest.approx(
        plain_riemann_sum(f.values, path))


def test_fbm_corrections_match_quadrature():
    g = TimeGrid([0.0, 0.3, 0.7, 1.2])
    k = PhiKernel(0.7)
    corr = WickIntegrand.fbm(np.zeros((1, 4)), k, g).corrections
    assert corr[0] == 0.0
    for i in (1, 2):
        a, b, ti = g.nodes[i], g.nodes[i + 1], g.nodes[i]
        exact = dblquad(lambda u, s: phi(0.7, s, u), a, b, 0.0, ti)[0]
        assert corr[i] == pytest.approx(exact, rel=1e-7)


def test_dphi_callable_matches_closed_corrections():
    g = TimeGrid.uniform(1.0, 9)
    k = PhiKernel(0.7)
    B = sample_ensemble(g, 0.7, 3, seed=4).noise(0)
    closed = WickIntegrand.fbm(B, k, g)
    nodes = g.nodes
    by_quad = WickIntegrand(B, dphi=lambda s, i, p: k.row_integral(s, 0.0, nodes[i]))
    # Gauss-Legendre meets an |s - t_i|^(2h-1) endpoint cusp, hence the loose tolerance
    assert np.allclose(wis_integral(closed, B, g), wis_integral(by_quad, B, g), atol=1e-4)


def test_moments_of_step_integrand(grid64, ens64):
    f = GridFunction.from_callable(grid64, lambda t: np.sin(3 * t) + 0.5)
    chk = wis_moments_check(f, ens64)
    assert chk.passed, chk


def test_dphi_eta_matches_quadrature():
    g = TimeGrid.uniform(2.0, 9)
    sig = GridFunction.from_callable(g, lambda t: 1.0 + t)
    spec = EtaSpec(0.0, None, sig, 0.65)
    for s, t in [(0.4, 1.5), (1.5, 0.4), (1.25, 2.0)]:
        exact = quad(lambda u: sig(u) * phi(0.65, s, u), 0.0, t,
                     points=[s] + list(g.nodes[1:-1]), limit=400)[0]
        assert dphi_eta(spec, s, t) == pytest.approx(exact, rel=1e-7)
    with pytest.raises(ContractError):
        dphi_eta(spec, -1.0, 1.0)


def test_eta_spec_contracts():
    g = TimeGrid.uniform(1.0, 5)
    with pytest.raises(ContractError):
        EtaSpec(0.0, None, GridFunction(g, [1, 0, 1, 1, 1]), 0.7)
    with pytest.raises(ContractError):
        EtaSpec(0.0, None, [GridFunction.constant(g, 1.0)], [0.6, 0.7])
    spec = EtaSpec(0.0, None, GridFunction.constant(g, 1.0), 0.7)
    assert np.allclose(spec.variance_clock(), g.nodes ** 1.4)


def test_wick_square_identity(grid64, ens64):
    # B_T^2 - 2 int B dB - T^2h is exactly mean zero
    k = PhiKernel(0.7)
    B = ens64.noise(0)
    resid = B[:, -1] ** 2 - wis_integral(WickIntegrand.fbm(B, k, grid64, 2.0), B, grid64) - 1.0
    assert abs(resid.mean()) < 4 * resid.std(ddof=1) / np.sqrt(resid.size)


def test_ito_residual_mean_is_riemann_bias(grid64, ens64):
    # E[residual] reduces to the left Riemann errors of the drift and of d(t^2h)/dt
    spec = EtaSpec(0.3, lambda t: 0.5 * t, GridFunction.constant(grid64, 1.0), 0.7)
    r = ito_residual(SQUARE, spec, ens64)
    t, dt = grid64.nodes[:-1], grid64.widths
    bias = (0.8 ** 2 - 0.3 ** 2 + 1.0) - np.sum((0.3 + 0.5 * t) * dt) - np.sum(1.4 * t ** 0.4 * dt)
    assert abs(r.mean() - bias) < 4 * r.std(ddof=1) / np.sqrt(r.size)


def test_ito_refinement_decreases():
    g = TimeGrid.uniform(1.0, 257)
    ens = sample_ensemble(g, 0.7, 400, seed=8)
    spec = EtaSpec(0.0, None, GridFunction.constant(g, 1.0), 0.7)
    levels = ito_refinement(SQUARE, spec, ens)
    assert [n for n, _ in levels] == [65, 129, 257]
    errs = [e for _, e in levels]
    assert errs[0] > errs[1] > errs[2]


@pytest.mark.parametrize("v", [0.0, 0.3, 2.0])
def test_heat_semigroup_closed_forms(v):
    x = np.linspace(-2, 2, 7)
    assert np.allclose(heat_semigroup(lambda y: y ** 2, v, x), x ** 2 + v, rtol=1e-10)
    assert np.allclose(heat_semigroup(np.exp, v, x), np.exp(x + v / 2), rtol=1e-7)
    assert heat_semigroup(np.cos, v, 0.0) == pytest.approx(np.exp(-v / 2), rel=1e-7)


def test_heat_semigroup_errors():
    with pytest.raises(ContractError):
        heat_semigroup(np.exp, -1.0, 0.0)
    with pytest.raises(AccuracyError):
        heat_semigroup(lambda y: np.sign(np.sin(50 * y)) * np.exp(y), 5.0, 0.0)


def test_quasi_conditional_expectation():
    g = TimeGrid.uniform(1.0, 11)
    spec = EtaSpec(0.0, lambda t: 2.0 * t, GridFunction.constant(g, 1.0), 0.7)
    x = np.array([-1.0, 0.0, 0.5])
    got = quasi_cond_exp(lambda y: y ** 2, spec, 0.4, x, 1.0)
    v = 1.0 - 0.4 ** 1.4
    assert np.allclose(got, (x + 1.2) ** 2 + v)
    with pytest.raises(ContractError):
        quasi_cond_exp(np.exp, spec, 0.8, x, 0.4)


def test_future_integral_vanishes(grid64, ens64):
    f = GridFunction.from_callable(grid64, lambda t: 1.0 + t)
    const = quasi_cond_integral_zero_check(f, ens64, grid64.nodes[32])
    assert const.quasi_value < 1e-12
    assert abs(const.z) < 4
    corr = quasi_cond_integral_zero_check(f, ens64, grid64.nodes[32], weight="fbm")
    assert abs(corr.z_exact) < 4
    assert corr.exact > 0 and corr.z > 4
    with pytest.raises(ContractError):
        quasi_cond_integral_zero_check(f, ens64, grid64.nodes[32], weight="bogus")


def test_clark_ocone(grid64, ens64):
    lin = clark_ocone_check("linear", ens64)
    assert lin.rms_relative_error < 1e-12
    sq = clark_ocone_check("square", ens64)
    assert sq.rms_relative_error < 0.1
    fine = sample_ensemble(TimeGrid.uniform(1.0, 257), 0.7, 2000, seed=9)
    errs = [clark_ocone_check("square", fine.subsample(s)).rms_relative_error for s in (4, 2, 1)]
    assert errs[0] > errs[1] > errs[2]
    with pytest.raises(ContractError):
        clark_ocone_check("square", np.empty((0, 64)), grid64, 0.7)
    with pytest.raises(ContractError):
        clark_ocone_check("cube", ens64)
    with pytest.raises(ContractError):
        clark_ocone_check("square", ens64.noise(0))

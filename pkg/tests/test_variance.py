import math

import numpy as np
import pytest

from ergosim.models import (FunctionalSpec, builtin_model, centralize,
                            invariant_density_1d)
from ergosim.poisson1d import solve_poisson_1d
from ergosim.variance import (SingularCovarianceError, VarianceError,
                              CovarianceCurve, mf_autocorrelation_form,
                              mf_gradient_form, optimal_control, rate_function)

SQRT2 = math.sqrt(2.0)


@pytest.fixture(scope="module")
def ou_pipeline():
    m = builtin_model("ou", dict(kappa=1.0, mu=0.0, sigma=SQRT2))
    pi = invariant_density_1d(m)
    f = centralize(FunctionalSpec.from_polynomial([0.0, 1.0]), pi)
    sol = solve_poisson_1d(m, pi, f, 0.0, m.default_probe_grid(81))
    return m, pi, f, sol


@pytest.fixture(scope="module")
def cir_pipeline():
    m = builtin_model("cir", dict(kappa=1.0, mu=1.0, sigma=1.0))
    pi = invariant_density_1d(m)
    f = centralize(FunctionalSpec.from_polynomial([0.0, 1.0]), pi)
    sol = solve_poisson_1d(m, pi, f, 0.0, m.default_probe_grid(81))
    return m, pi, f, sol


def test_gradient_form_ou(ou_pipeline):
    m, pi, f, sol = ou_pipeline
    # u' = 1, a = 2: integral of 2 against pi
    mf = mf_gradient_form(m, pi, sol)
    assert abs(mf.values[0] - 2.0) < 1e-8


def test_gradient_form_cir(cir_pipeline):
    m, pi, f, sol = cir_pipeline
    # u' = 1, a = x, Gamma(2,2) mean 1: M_f = 1
    mf = mf_gradient_form(m, pi, sol)
    assert abs(mf.values[0] - 1.0) < 1e-8


def test_gradient_form_scaling(ou_pipeline):
    # replacing f by c*f scales M_f by c^2 (u scales linearly)
    m, pi, f, sol = ou_pipeline
    c = 3.0
    fc = centralize(FunctionalSpec.from_polynomial([0.0, c]), pi)
    solc = solve_poisson_1d(m, pi, fc, 0.0, m.default_probe_grid(81))
    m1 = mf_gradient_form(m, pi, sol).values[0]
    m2 = mf_gradient_form(m, pi, solc).values[0]
    assert abs(m2 - c * c * m1) < 1e-6


def test_autocorrelation_ou(ou_pipeline):
    m, pi, f, _ = ou_pipeline
    mf = mf_autocorrelation_form(m, pi, f, n_paths=30_000, horizon=10.0, master_seed=1)
    assert abs(mf.values[0] - 2.0) < max(0.05 * 2.0, 3.0 * mf.std_error[0])


def test_autocorrelation_zero_functional(ou_pipeline):
    m, pi, _, _ = ou_pipeline
    f0 = FunctionalSpec(value=lambda t, x: np.zeros_like(np.asarray(x, float)),
                        growth_p0=0.0, centralized=True)
    mf = mf_autocorrelation_form(m, pi, f0, n_paths=500, horizon=2.0, master_seed=1)
    assert mf.values[0] == 0.0
    assert mf.std_error[0] == 0.0


def test_autocorrelation_requires_centralized(ou_pipeline):
    m, pi, _, _ = ou_pipeline
    with pytest.raises(VarianceError, match="centralized"):
        mf_autocorrelation_form(m, pi, FunctionalSpec.from_polynomial([1.0, 1.0]))


def test_cross_route_agreement_quadratic(ou_pipeline):
    # f = x^2 - 1: autocorrelation route must agree with the gradient route
    m, pi, _, _ = ou_pipeline
    f2 = centralize(FunctionalSpec.from_polynomial([0.0, 0.0, 1.0]), pi)
    sol2 = solve_poisson_1d(m, pi, f2, 0.0, m.default_probe_grid(81))
    grad = mf_gradient_form(m, pi, sol2).values[0]
    auto = mf_autocorrelation_form(m, pi, f2, n_paths=30_000, horizon=10.0,
                                   master_seed=2)
    assert abs(auto.values[0] - grad) < max(0.05 * grad, 3.0 * auto.std_error[0])


def test_gradient_tail_guard(ou_pipeline):
    # growth too fast for the working range: integrand alive at the edges
    m, pi, _, _ = ou_pipeline
    fast = FunctionalSpec(
        value=lambda t, x: np.exp(0.26 * np.asarray(x, float) ** 2) - 6.7114,
        growth_p0=2.0, centralized=True,
    )
    sol = solve_poisson_1d(m, pi, fast, 0.0, np.linspace(-4, 4, 41))
    with pytest.raises(VarianceError):
        mf_gradient_form(m, pi, sol)


# ------------------------------------------------------------- rate paths


def constant_curve(value):
    return CovarianceCurve(t_grid=np.array([0.0, 1.0]),
                           values=np.array([value, value]), method="test")


def test_rate_closed_form():
    path = rate_function(constant_curve(2.0), [0.0, 1.0], [0.0, 1.5])
    assert abs(path.rate - 1.5**2 / 4.0) < 1e-14


def test_rate_piecewise():
    # slopes +-1 on half-length segments, M = 2:
    # I = (1/2)(1/2 * 0.5 + 1/2 * 0.5) = 1/4
    path = rate_function(constant_curve(2.0), [0.0, 0.5, 1.0], [0.0, 0.5, 0.0])
    assert abs(path.rate - 0.25) < 1e-14


def test_rate_nonnegative_zero_iff_flat():
    assert rate_function(constant_curve(1.0), [0.0, 1.0], [0.0, 0.0]).rate == 0.0
    assert rate_function(constant_curve(1.0), [0.0, 0.3, 1.0], [0.0, 0.1, 0.0]).rate > 0


def test_rate_scaling_in_path():
    # quadratic form: doubling the path quadruples the action
    base = rate_function(constant_curve(2.0), [0.0, 1.0], [0.0, 1.0]).rate
    quad = rate_function(constant_curve(2.0), [0.0, 1.0], [0.0, 2.0]).rate
    assert abs(quad - 4.0 * base) < 1e-12


def test_rate_varying_covariance_log_form():
    # M(s) = 1 + s on [0,1], slope 1: I = (1/2) ln 2
    curve = CovarianceCurve(t_grid=np.array([0.0, 1.0]),
                            values=np.array([1.0, 2.0]), method="test")
    path = rate_function(curve, [0.0, 1.0], [0.0, 1.0])
    assert abs(path.rate - 0.5 * math.log(2.0)) < 1e-12


def test_rate_path_validation():
    with pytest.raises(VarianceError, match="start at 0"):
        rate_function(constant_curve(1.0), [0.0, 1.0], [0.5, 1.0])
    with pytest.raises(VarianceError, match="strictly increasing"):
        rate_function(constant_curve(1.0), [0.0, 0.0], [0.0, 1.0])


def test_singular_covariance_rejected():
    with pytest.raises(SingularCovarianceError):
        rate_function(constant_curve(0.0), [0.0, 1.0], [0.0, 1.0])


# -------------------------------------------------------- optimal control


def test_control_cost_identity_ou(ou_pipeline):
    m, pi, f, sol = ou_pipeline
    mf = mf_gradient_form(m, pi, sol)
    path = rate_function(mf, [0.0, 0.4, 1.0], [0.0, 0.8, 1.5])
    ctrl = optimal_control(m, pi, sol, mf, path)
    assert abs(ctrl.l2_cost - 2.0 * path.rate) / (2.0 * path.rate) < 1e-3


def test_control_cost_identity_cir(cir_pipeline):
    m, pi, f, sol = cir_pipeline
    mf = mf_gradient_form(m, pi, sol)
    path = rate_function(mf, [0.0, 1.0], [0.0, 1.0])
    ctrl = optimal_control(m, pi, sol, mf, path)
    assert abs(ctrl.l2_cost - 2.0 * path.rate) / (2.0 * path.rate) < 1e-3


def test_control_feedback_shape(ou_pipeline):
    m, pi, f, sol = ou_pipeline
    mf = mf_gradient_form(m, pi, sol)
    path = rate_function(mf, [0.0, 1.0], [0.0, 1.0])
    ctrl = optimal_control(m, pi, sol, mf, path)
    # psi = sigma u' xi_dot / M = sqrt(2)*1*1/2 everywhere for OU f=x
    val = ctrl.psi(np.array([0.3]), 0.5)
    assert abs(float(val[0]) - SQRT2 / 2.0) < 1e-8


def test_curve_json_roundtrip(tmp_path, ou_pipeline):
    import json
    m, pi, f, sol = ou_pipeline
    mf = mf_gradient_form(m, pi, sol)
    p = tmp_path / "mf.json"
    mf.to_json(str(p))
    data = json.loads(p.read_text())
    assert data["method"] == "gradient_form"
    assert abs(data["values"][0] - 2.0) < 1e-8

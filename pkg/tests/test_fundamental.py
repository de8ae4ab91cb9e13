import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdgreen import SingularityError, eval_g, eval_jet, eval_weights, frozen_residual, hat_coords
from cdgreen.fundamental import frozen_residual_scale

from oracles import JET_FIELDS, jet_errors, random_offsets


@pytest.mark.parametrize("eps", [1.0, 0.1, 0.02])
def test_jet_matches_finite_differences(eps):
    rng = np.random.default_rng(7)
    errs = jet_errors(*random_offsets(rng, 200, eps), eps)
    assert set(errs) == set(JET_FIELDS)
    assert max(errs.values()) <= 1e-6, errs


def test_kernel_value_closed_form():
    x = np.array([0.5, 0.5, 0.5])
    xi = np.array([0.6, 0.5, 0.5])
    # on the downstream axis the exponent vanishes
    assert eval_g(hat_coords(x, xi, 0.01), 1.0, 0.01) == pytest.approx(1 / (4 * np.pi * 0.01 * 0.1))
    xi = np.array([0.4, 0.5, 0.5])
    assert eval_g(hat_coords(x, xi, 0.01), 1.0, 0.01) == pytest.approx(np.exp(-20) / (4 * np.pi * 0.01 * 0.1))


def test_frozen_residual_vanishes():
    rng = np.random.default_rng(3)
    for eps in (1.0, 0.1, 0.01):
        x, xi, q = random_offsets(rng, 100, eps)
        res = frozen_residual(x, xi, q, eps)
        assert np.max(np.abs(res) / frozen_residual_scale(x, xi, q, eps)) <= 1e-8


def test_xi1_second_derivative_identity():
    rng = np.random.default_rng(5)
    eps = 0.05
    x, xi, q = random_offsets(rng, 100, eps)
    J = eval_jet(hat_coords(x, xi, eps), q, eps)
    rhs = -J.d2_xi2xi2 - J.d2_xi3xi3 + 2 * q / eps * J.d_xi1
    scale = np.abs(J.d2_xi2xi2) + np.abs(J.d2_xi3xi3) + np.abs(2 * q / eps * J.d_xi1)
    assert np.max(np.abs(J.d2_xi1xi1 - rhs) / scale) <= 1e-12


def test_shifted_kernel_residual():
    x = np.array([[0.3, 0.5, 0.5]])
    xi = np.array([[0.35, 0.52, 0.49]])
    shift = -0.3
    res = frozen_residual(x, xi, 1.0, 0.05, shift=shift)
    assert abs(res) <= 1e-8 * frozen_residual_scale(x, xi, 1.0, 0.05, shift=shift)


def test_singular_point_raises():
    x = np.array([0.5, 0.5, 0.5])
    with pytest.raises(SingularityError):
        eval_g(hat_coords(x, x, 0.1), 1.0, 0.1)
    with pytest.raises(SingularityError):
        eval_jet(hat_coords(x, x, 0.1), 1.0, 0.1)


def test_gradient_in_x_is_minus_gradient_in_xi():
    rng = np.random.default_rng(11)
    x, xi, q = random_offsets(rng, 10, 0.1)
    J = eval_jet(hat_coords(x, xi, 0.1), q, 0.1, second=False)
    np.testing.assert_array_equal(J.grad_x, -J.grad_xi)
    assert J.d2_xi1xi1 is None


def test_log_weight_multiplies_jet():
    rng = np.random.default_rng(2)
    x, xi, q = random_offsets(rng, 20, 0.1)
    h = hat_coords(x, xi, 0.1)
    J0, J1 = eval_jet(h, q, 0.1), eval_jet(h, q, 0.1, log_weight=np.log(3.0))
    for k in JET_FIELDS:
        np.testing.assert_allclose(getattr(J1, k), 3.0 * getattr(J0, k), rtol=1e-13)


def test_weights_guard_overflow():
    w = eval_weights(0.5, 1.0, 1e-3)
    assert w.saturated
    assert np.isfinite(w.lambda_plus)
    assert w.log_lambda_plus == pytest.approx(3000.0)
    w = eval_weights(0.25, 0.5, 0.1)
    assert not w.saturated
    assert w.lambda_ == pytest.approx(np.exp(2 * 0.5 * (0.25 - 1) / 0.1))
    assert w.p == pytest.approx(np.exp(-2 * 0.5 * 0.25 / 0.1))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.2, 2.0), st.floats(0.05, 3.0), st.floats(-1, 1), st.floats(-1, 1))
def test_kernel_positive_and_bounded_by_axis_value(eps, q, r, c2, c3):
    x = np.array([0.5, 0.5, 0.5])
    d = np.array([1.0, c2, c3])
    d /= np.linalg.norm(d)
    g = eval_g(hat_coords(x, x + eps * r * d, eps), q, eps)
    assert 0 < g <= 1 / (4 * np.pi * eps * eps * r) * (1 + 1e-12)

import numpy as np
import pytest

from hcdelab.odeint import SolverConfig, solve_ivp
from hcdelab.paths import (
    derivative_weights,
    eval_path,
    fit_natural_cubic,
    second_derivative_matrix,
    value_weights,
)
from hcdelab.tape import Tensor


def test_hand_solved_three_knot_spline():
    # knots (0,0), (1,1), (2,0): interior equation gives M1 = -3
    path = fit_natural_cubic([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
    assert path.second_derivs[0, 1] == pytest.approx(-3.0, abs=1e-12)
    value, deriv = eval_path(path, 0.5)
    assert value[0] == pytest.approx(0.6875, abs=1e-12)
    assert deriv[0] == pytest.approx(1.125, abs=1e-12)


def test_collinear_knots_give_exact_line():
    t = np.array([0.0, 0.7, 1.3, 2.9])
    y = 2.0 * t - 1.0
    path = fit_natural_cubic(t, y)
    assert np.max(np.abs(path.second_derivs)) < 1e-12
    for tq in np.linspace(0.0, 2.9, 17):
        value, deriv = eval_path(path, tq)
        assert value[0] == pytest.approx(2.0 * tq - 1.0, abs=1e-12)
        assert deriv[0] == pytest.approx(2.0, abs=1e-12)


def test_two_knots_degenerate_to_linear_segment():
    path = fit_natural_cubic([0.0, 2.0], [1.0, 5.0])
    assert np.all(path.second_derivs == 0.0)
    _, d_a = eval_path(path, 0.3)
    _, d_b = eval_path(path, 1.7)
    assert d_a[0] == d_b[0] == pytest.approx(2.0)


def test_rejects_bad_knots():
    with pytest.raises(ValueError):
        fit_natural_cubic([0.0], [1.0])
    with pytest.raises(ValueError):
        fit_natural_cubic([0.0, 0.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        fit_natural_cubic([0.0, 1.0], [[1.0, 2.0, 3.0]])


def test_exact_interpolation_at_knots(rng):
    t = np.sort(rng.uniform(0.0, 10.0, size=12))
    y = rng.normal(size=(3, 12))
    path = fit_natural_cubic(t, y)
    for i, ti in enumerate(t):
        value, _ = eval_path(path, ti)
        assert np.array_equal(value, y[:, i])


def test_time_channel_value_and_derivative_exact(rng):
    t = np.linspace(0.0, 1.0, 9)
    y = rng.normal(size=(2, 9))
    path = fit_natural_cubic(t, y, append_time=True)
    assert path.n_channels == 3
    for tq in rng.uniform(0.0, 1.0, size=100):
        value, deriv = eval_path(path, tq)
        assert value[-1] == tq
        assert deriv[-1] == 1.0


def test_derivative_matches_finite_differences(rng):
    t = np.sort(rng.uniform(0.0, 5.0, size=10))
    y = rng.normal(size=(2, 10))
    path = fit_natural_cubic(t, y)
    h = 1e-6
    for tq in rng.uniform(t[0] + 2 * h, t[-1] - 2 * h, size=100):
        _, deriv = eval_path(path, tq)
        vp, _ = eval_path(path, tq + h)
        vm, _ = eval_path(path, tq - h)
        fd = (vp - vm) / (2 * h)
        denom = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(deriv - fd) / denom) < 1e-6


def test_c1_continuity_at_interior_knots(rng):
    # closed-form one-sided derivatives from the two adjacent segments
    t = np.sort(rng.uniform(0.0, 4.0, size=8))
    y = rng.normal(size=(1, 8))
    path = fit_natural_cubic(t, y)
    m = path.second_derivs[0]
    v = path.values[0]
    for k in range(1, 7):
        h_l = t[k] - t[k - 1]
        h_r = t[k + 1] - t[k]
        d_left = (v[k] - v[k - 1]) / h_l + h_l * (2 * m[k] + m[k - 1]) / 6.0
        d_right = (v[k + 1] - v[k]) / h_r - h_r * (2 * m[k] + m[k + 1]) / 6.0
        assert abs(d_left - d_right) < 1e-10


def test_clamped_extrapolation_warns_and_is_constant():
    path = fit_natural_cubic([0.0, 1.0], [0.0, 1.0])
    with pytest.warns(UserWarning):
        value, deriv = eval_path(path, 2.0)
    assert value[0] == 1.0
    assert deriv[0] == 0.0


def test_weight_vectors_reproduce_eval(rng):
    t = np.sort(rng.uniform(0.0, 3.0, size=7))
    y = rng.normal(size=(4, 7))
    path = fit_natural_cubic(t, y)
    dmat = second_derivative_matrix(t)
    for tq in rng.uniform(t[0], t[-1], size=25):
        value, deriv = eval_path(path, tq)
        wv = value_weights(t, dmat, tq)
        wd = derivative_weights(t, dmat, tq)
        assert np.max(np.abs(y @ wv - value)) < 1e-10
        assert np.max(np.abs(y @ wd - deriv)) < 1e-10


def test_stieltjes_integral_consistency(rng):
    # integrating X'(t) dt across the span must telescope to X(t1) - X(t0)
    t = np.linspace(0.0, 2.0, 11)
    y = rng.normal(size=(3, 11))
    path = fit_natural_cubic(t, y)

    def field(z, tq):
        _, deriv = eval_path(path, tq)
        return Tensor(deriv)

    # checkpoints at the knots keep every step inside one cubic piece,
    # matching how control paths are integrated downstream
    res = solve_ivp(field, Tensor(np.zeros(3)), list(t),
                    SolverConfig(rtol=1e-6, atol=1e-9))
    total = res.states[-1].data
    expect = y[:, -1] - y[:, 0]
    assert np.max(np.abs(total - expect)) < 1e-6

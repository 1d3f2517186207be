import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from delaynet.delays import DelayBounds, InsufficientHistory, TimestampedMeasurement
from delaynet.models import lateral_model
from delaynet.predictor import (
    TABLE2_L,
    TABLE2_LQR_K,
    TABLE2_PROPOSED_K,
    Gains,
    PowerTable,
    PredictorObserver,
    PredictorState,
    artstein_oracle,
    compute_F,
    control_input,
    matrix_power,
    omega_bar,
    phi,
    predict_arrival_state,
    predictor_step,
    y_bar,
)
from delaynet.simulation import run_closed_loop
from delaynet.stability import spectral_margins

from helpers import exact_config, transformed_states


def _hist(*u):
    """History rows: first argument is u(k-1), then u(k-2), ..."""
    return np.array(u, dtype=float).reshape(-1, 1)


def test_matrix_power_examples():
    assert np.array_equal(matrix_power(np.diag([2.0, 3.0]), 0), np.eye(2))
    assert matrix_power([[2.0]], -2)[0, 0] == 0.25
    with pytest.raises(np.linalg.LinAlgError):
        matrix_power([[0.0, 1.0], [0.0, 0.0]], -1)


@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_matrix_power_inverse_product(n, seed):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    A = Q @ np.diag(rng.uniform(0.5, 2.0, n))
    np.testing.assert_allclose(matrix_power(A, 3) @ matrix_power(A, -3), np.eye(n), atol=1e-10)


def test_power_table_matches_and_warns():
    A = lateral_model().A
    table = PowerTable(A, 6)
    np.testing.assert_allclose(table(-4), matrix_power(A, -4), rtol=1e-12)
    with pytest.raises(IndexError):
        table(7)
    with pytest.warns(RuntimeWarning):
        PowerTable(np.diag([1.0, 1e-3]), 3)


def test_compute_F_examples():
    model = lateral_model()
    np.testing.assert_array_equal(compute_F(model.A, model.B, 0, 0), model.B)
    assert compute_F([[2.0]], [[1.0]], 1, 2)[0, 0] == pytest.approx(0.375)
    np.testing.assert_allclose(compute_F(model.A, model.B, 3, 3), matrix_power(model.A, -3) @ model.B)


def test_phi_examples():
    A, B = [[2.0]], [[1.0]]
    assert phi(_hist(0, 0, 0), 2, A, B)[0] == 0.0
    assert phi(_hist(5, 6), 0, A, B)[0] == 0.0
    assert phi(_hist(8, 4), 2, A, B)[0] == pytest.approx(2.0)
    with pytest.raises(InsufficientHistory):
        phi(_hist(1.0), 2, A, B)


def test_omega_bar_examples():
    A, B = [[1.0]], [[1.0]]
    assert omega_bar(_hist(1, 2, 3), 0, 0, 0, A, B)[0] == 0.0
    assert omega_bar(_hist(0, 0, 0, 0), 2, 1, 1, A, B)[0] == 0.0
    assert omega_bar(_hist(3, 9), 1, 0, 0, A, B)[0] == pytest.approx(3.0)


def _scalar_state(model, bounds, u_hist, z=0.0):
    st = PredictorState.initial(model, bounds, [z])
    hist = st.history.copy()
    hist[: len(u_hist), 0] = u_hist
    return PredictorState(z_hat=st.z_hat, history=hist)


def test_y_bar_examples(scalar_model):
    model = scalar_model(A=1.0)
    bounds = DelayBounds(0, 0, 0, 1)
    zero = PredictorState.initial(model, bounds)
    y = TimestampedMeasurement(np.array([5.0]), origin_step=9)
    assert y_bar(y, 10, zero, model, bounds)[0] == 5.0
    y0 = TimestampedMeasurement(np.array([5.0]), origin_step=10)
    assert y_bar(y0, 10, zero, model, bounds)[0] == 5.0
    st = _scalar_state(model, bounds, [3.0])
    assert y_bar(y, 10, st, model, bounds)[0] == pytest.approx(8.0)


def test_y_bar_rejects_out_of_bound_age(scalar_model):
    model = scalar_model()
    bounds = DelayBounds(0, 0, 2, 3)
    y = TimestampedMeasurement(np.array([1.0]), origin_step=9)
    with pytest.raises(ValueError, match="outside output-delay bounds"):
        y_bar(y, 10, PredictorState.initial(model, bounds), model, bounds)


def test_predictor_step_examples(scalar_model):
    model = scalar_model(A=1.0)
    bounds = DelayBounds(0, 0, 0, 0)
    g = Gains.build(model, bounds, [[0.0]], [[0.5]])
    st = PredictorState.initial(model, bounds, [2.0])
    assert predictor_step(st, [1.0], np.array([4.0]), 0, model, g).z_hat[0] == pytest.approx(4.0)
    nxt = predictor_step(PredictorState.initial(model, bounds), [0.0], np.zeros(1), 0, model, g)
    assert nxt.z_hat[0] == 0.0
    g0 = Gains.build(model, bounds, [[0.0]], [[0.0]])
    nxt = predictor_step(st, [1.5], np.array([100.0]), 0, model, g0)
    assert nxt.z_hat[0] == pytest.approx(1.0 * 2.0 + 1.5)
    assert nxt.history[0, 0] == 1.5


def test_control_input_examples():
    model = lateral_model()
    st = PredictorState.initial(model, DelayBounds(0, 0, 0, 0))
    assert control_input(st, TABLE2_PROPOSED_K)[0] == 0.0
    e4 = PredictorState(z_hat=np.array([0, 0, 0, 1.0]), history=st.history)
    assert control_input(e4, TABLE2_PROPOSED_K)[0] == pytest.approx(-0.1810)
    assert control_input(PredictorState(np.array([3.0]), np.zeros((2, 1))), [[-2.0]])[0] == -6.0


def test_table2_fixture_values():
    assert TABLE2_LQR_K[0].tolist() == [-0.0309, -0.0210, -0.5149, -0.1810]
    assert TABLE2_PROPOSED_K[0].tolist() == [-0.0303, -0.0221, -0.696, -0.1810]
    assert TABLE2_L.shape == (4, 4)


def test_predict_arrival_examples(scalar_model):
    model = lateral_model()
    z = np.array([0.1, -0.2, 0.3, 0.4])
    np.testing.assert_allclose(predict_arrival_state(z, model, DelayBounds(0, 0, 0, 0)), z)
    np.testing.assert_allclose(
        predict_arrival_state(z, model, DelayBounds(3, 3, 0, 0)), matrix_power(model.A, 3) @ z,
        rtol=1e-12,
    )
    s = scalar_model(A=2.0)
    assert predict_arrival_state(np.array([3.0]), s, DelayBounds(1, 2, 0, 0))[0] == pytest.approx(8.0)


def test_artstein_oracle_examples(scalar_model):
    model = scalar_model(A=2.0)
    assert artstein_oracle([1.0], _hist(0, 0, 0), DelayBounds(2, 2, 0, 0), model)[0] == 1.0
    assert artstein_oracle([1.0], _hist(8, 4), DelayBounds(0, 0, 0, 0), model)[0] == 1.0
    assert artstein_oracle([1.0], _hist(8, 4), DelayBounds(2, 2, 0, 0), model)[0] == pytest.approx(5.0)


@given(st.integers(0, 6), st.integers(0, 3))
def test_F_matches_bounds_invariant(h1, span):
    model = lateral_model()
    b = DelayBounds(h1, h1 + span, 0, 0)
    g = Gains.build(model, b, TABLE2_LQR_K, TABLE2_L)
    assert g.matches(model, b)
    if span or h1:
        assert not g.matches(model, DelayBounds(h1 + 1, h1 + span + 1, 0, 0))


@given(st.integers(0, 6), st.integers(0, 3))
def test_lifted_gain_similar_to_state_feedback(h1, span):
    model = lateral_model()
    b = DelayBounds(h1, h1 + span, 0, 0)
    g = Gains.from_state_feedback(model, b, TABLE2_LQR_K, TABLE2_L)
    lifted = np.sort_complex(np.linalg.eigvals(model.A + g.F @ g.K))
    direct = np.sort_complex(np.linalg.eigvals(model.A + model.B @ TABLE2_LQR_K))
    np.testing.assert_allclose(lifted, direct, atol=1e-9)


def test_observer_requires_square_output():
    model = lateral_model(C=np.eye(4)[2:])
    b = DelayBounds(0, 0, 0, 0)
    with pytest.raises(ValueError, match="p == n"):
        PredictorObserver(model, Gains.build(model, b, TABLE2_LQR_K, np.zeros((4, 2))), b)


def test_observer_rejects_stale_gains():
    model = lateral_model()
    g = Gains.build(model, DelayBounds(1, 1, 0, 0), TABLE2_LQR_K, TABLE2_L)
    with pytest.raises(ValueError, match="F does not match"):
        PredictorObserver(model, g, DelayBounds(2, 2, 0, 0))


def test_measurement_init_lifts_first_reading():
    model = lateral_model()
    b = DelayBounds(0, 0, 0, 0)
    obs = PredictorObserver(model, Gains.build(model, b, TABLE2_LQR_K, TABLE2_L), b)
    y0 = np.array([0.1, 0.2, 0.3, 0.4])
    obs.update(TimestampedMeasurement(y0, 0), 0)
    np.testing.assert_allclose(obs.last_z, y0)


# Averaging bound on the unknown input delay: replacing u(k-d) by the mean of
# the two bound samples costs at most tau/2 times the largest step change.
def _averaging_violations(u, h1, h2):
    hist = _hist(*u)
    D = max(abs(hist[f - 1, 0] - hist[f, 0]) for f in range(1, h2 + 1)) if h2 > 0 else 0.0
    half = 0.5 * (hist[h1 - 1, 0] + hist[h2 - 1, 0])
    bad = 0
    for d in range(h1, h2 + 1):
        if abs(hist[d - 1, 0] - half) > 0.5 * (h2 - h1) * D + 1e-12:
            bad += 1
    return bad


def test_averaging_bound_fuzz():
    rng = np.random.default_rng(2024)
    violations = 0
    for _ in range(1000):
        h1 = int(rng.integers(1, 6))
        h2 = h1 + int(rng.integers(0, 5))
        u = rng.standard_normal(h2 + 1) * rng.uniform(0.01, 10)
        violations += _averaging_violations(u, h1, h2)
    assert violations == 0


@given(st.integers(1, 5), st.integers(0, 4), arrays(float, 12, elements=st.floats(-1e3, 1e3)))
def test_averaging_bound_property(h1, span, u):
    assert _averaging_violations(u[: h1 + span + 1], h1, h1 + span) == 0


@given(st.integers(0, 5), st.integers(0, 6))
def test_exact_compensation_error_dynamics(h_I, h_O):
    cfg = exact_config(h_I, h_O, horizon=120)
    log = run_closed_loop(cfg, controller="proposed")
    model = cfg.model()
    g = cfg.gains(model)
    M = model.A - g.L @ matrix_power(model.A, h_O) @ model.C @ matrix_power(model.A, -h_O)
    e = transformed_states(log, cfg) - log.zhat
    # e(k+1) = (A - L A^d C A^-d) e(k) once every delivered reading is post-start
    e = e[h_O:]
    for k in range(len(e) - 1):
        np.testing.assert_allclose(e[k + 1], M @ e[k], atol=1e-10 * max(1.0, np.abs(e[k]).max()))
    rho_obs = spectral_margins(model, g, cfg.bounds, h_O)[1]
    assert np.linalg.norm(e[-1]) <= np.linalg.norm(e[0]) * 10 * (rho_obs + 1e-6) ** (len(e) - 1) + 1e-12


@given(st.integers(0, 5), st.integers(0, 6))
def test_prediction_matches_arrival_state(h_I, h_O):
    cfg = exact_config(h_I, h_O, horizon=200)
    log = run_closed_loop(cfg, controller="proposed")
    for k in range(120, 200 - h_I):
        np.testing.assert_allclose(log.xpred[k], log.x[k + h_I], atol=1e-8)

"""Predictor-observer delay compensation.

The controller never sees the input delay. It observes the transformed state

    Z(k) = x(k) + Phi_k(h1) + Phi_k(h2)

with a Luenberger-type observer driven by a delay-corrected output ``ybar``,
and applies ``u(k) = K Zhat(k)``. The output delay is read from each
measurement's timestamp.

Input histories are arrays whose row ``j - 1`` holds ``u(k - j)``.
"""

from dataclasses import dataclass, field, replace
import warnings

import numpy as np

from ._validation import as_matrix
from .delays import InsufficientHistory

__all__ = [
    "TABLE2_LQR_K",
    "TABLE2_PROPOSED_K",
    "TABLE2_L",
    "FIELD_TEST_K",
    "FIELD_TEST_L",
    "PowerTable",
    "Gains",
    "PredictorState",
    "PredictorObserver",
    "matrix_power",
    "compute_F",
    "arrival_map",
    "lift_state_gain",
    "phi",
    "omega_bar",
    "y_bar",
    "predictor_step",
    "control_input",
    "predict_arrival_state",
    "artstein_oracle",
    "history_length",
]

# Simulation gains. The LQR entry is printed as "\-0.0309" in the source table.
TABLE2_LQR_K = np.array([[-0.0309, -0.0210, -0.5149, -0.1810]])
TABLE2_PROPOSED_K = np.array([[-0.0303, -0.0221, -0.696, -0.1810]])
TABLE2_L = np.array(
    [
        [-0.5483, -0.006, 0.0, 0.0],
        [0.0197, -0.6681, 0.0, 0.0],
        [0.0011, 0.0184, 0.25, 0.0],
        [0.1275, 0.0474, 0.25, 0.25],
    ]
)
# Field-test gains for the 3-state model (side slip dropped).
FIELD_TEST_K = np.array([[-0.0249, -0.7709, -0.2594]])
FIELD_TEST_L = np.array(
    [
        [-0.6545, 0.0, 0.0],
        [-0.0141, 0.3, 0.0],
        [0.0492, 0.1500, 0.3000],
    ]
)

COND_WARN = 1e8


def matrix_power(A, j):
    """``A**j`` for any integer ``j``; negative powers invert first."""
    A = np.asarray(A, dtype=float)
    j = int(j)
    if j >= 0:
        return np.linalg.matrix_power(A, j)
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"A is singular; A^{j} undefined") from exc
    return np.linalg.matrix_power(Ainv, -j)


class PowerTable:
    """Precomputed ``A^j`` for ``-depth <= j <= depth``.

    Warns when ``cond(A^depth)`` exceeds 1e8, the point where negative
    powers start to amplify rounding noticeably.
    """

    def __init__(self, A, depth):
        A = np.asarray(A, dtype=float)
        self.depth = int(depth)
        n = A.shape[0]
        Ainv = np.linalg.inv(A)
        pos = [np.eye(n)]
        neg = [np.eye(n)]
        for _ in range(self.depth):
            pos.append(pos[-1] @ A)
            neg.append(neg[-1] @ Ainv)
        self._pos = pos
        self._neg = neg
        self.cond = float(np.linalg.cond(pos[-1]))
        if self.cond > COND_WARN:
            warnings.warn(
                f"cond(A^{self.depth}) = {self.cond:.3g}; negative powers are ill-conditioned",
                RuntimeWarning,
                stacklevel=2,
            )

    def __call__(self, j):
        j = int(j)
        if abs(j) > self.depth:
            raise IndexError(f"power {j} outside precomputed range +/-{self.depth}")
        return self._pos[j] if j >= 0 else self._neg[-j]


def _power(A, powers, j):
    return powers(j) if powers is not None else matrix_power(A, j)


def compute_F(A, B, h1_I, h2_I):
    """Input matrix of the transformed dynamics: ``(A^-h1 + A^-h2) B / 2``."""
    return (matrix_power(A, -h1_I) + matrix_power(A, -h2_I)) @ np.asarray(B, float) / 2.0


def arrival_map(A, h1_I, h2_I):
    """``2 (A^-h1 + A^-h2)^-1``: maps Z to the state expected at actuation time."""
    S = matrix_power(A, -h1_I) + matrix_power(A, -h2_I)
    try:
        return 2.0 * np.linalg.inv(S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("A^-h1 + A^-h2 is singular") from exc


def lift_state_gain(K_x, A, h1_I, h2_I):
    """Express a state-feedback gain in transformed coordinates.

    ``u = K_x xpred`` with ``xpred = arrival_map @ Z`` is ``u = (K_x @ arrival_map) Z``.
    The nominal closed loop ``A + F K`` is then similar to ``A + B K_x``.
    """
    return np.asarray(K_x, float) @ arrival_map(A, h1_I, h2_I)


def history_length(bounds):
    """Input-history rows kept by the predictor (deepest lookup is d_O + h2_I)."""
    return bounds.h2_O + bounds.h2_I + 2


def _u(history, j):
    if j < 1 or j > history.shape[0]:
        raise InsufficientHistory(f"need u(k-{j}) but history holds {history.shape[0]} steps")
    return history[j - 1]


def phi(history, h_f, A, B, powers=None):
    """``1/2 sum_{i=0}^{h_f-1} A^{-i-1} B u(k - h_f + i)``."""
    history = np.atleast_2d(np.asarray(history, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    out = np.zeros(B.shape[0])
    for i in range(int(h_f)):
        out += _power(A, powers, -i - 1) @ (B @ _u(history, h_f - i))
    return 0.5 * out


def omega_bar(history, d_O, h1_I, h2_I, A, B, powers=None):
    """Output-delay window prediction with the unknown input delay replaced by
    the average of its two bounds."""
    history = np.atleast_2d(np.asarray(history, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    out = np.zeros(B.shape[0])
    for i in range(int(d_O)):
        Ap = _power(A, powers, d_O - i - 1)
        u_sum = _u(history, d_O - i + h1_I) + _u(history, d_O - i + h2_I)
        out += Ap @ (B @ u_sum)
    return 0.5 * out


def _omega_measured(history, d_O, past_input_delays, A, B, powers=None):
    """Exact window prediction when every past input delay is known.

    ``past_input_delays(s)`` returns the input delay applied at step ``s``
    (relative index ``s = -d_O + i`` counted back from the current step).
    Only used to reproduce the comparison controller that measures input delay.
    """
    history = np.atleast_2d(np.asarray(history, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    out = np.zeros(B.shape[0])
    for i in range(int(d_O)):
        d_in = past_input_delays(-d_O + i)
        out += _power(A, powers, d_O - i - 1) @ (B @ _u(history, d_O - i + d_in))
    return out


@dataclass(frozen=True)
class Gains:
    """Controller gain ``K`` (m x n), observer gain ``L`` (n x p) and derived ``F``."""

    K: np.ndarray
    L: np.ndarray
    F: np.ndarray

    @classmethod
    def build(cls, model, bounds, K, L):
        K = as_matrix(np.atleast_2d(np.asarray(K, dtype=float)), "K", (model.m, model.n))
        L = as_matrix(L, "L", (model.n, model.p))
        F = compute_F(model.A, model.B, bounds.h1_I, bounds.h2_I)
        return cls(K=K, L=L, F=F)

    @classmethod
    def from_state_feedback(cls, model, bounds, K_x, L):
        """Gains whose control acts on the predicted arrival state."""
        K_x = np.atleast_2d(np.asarray(K_x, dtype=float))
        return cls.build(model, bounds, lift_state_gain(K_x, model.A, bounds.h1_I, bounds.h2_I), L)

    def matches(self, model, bounds, atol=1e-12):
        return np.allclose(self.F, compute_F(model.A, model.B, bounds.h1_I, bounds.h2_I), atol=atol)


@dataclass(frozen=True)
class PredictorState:
    z_hat: np.ndarray
    history: np.ndarray
    last_ybar: np.ndarray = field(default=None, compare=False)
    last_prediction: np.ndarray = field(default=None, compare=False)

    @classmethod
    def initial(cls, model, bounds, z0=None):
        z0 = np.zeros(model.n) if z0 is None else np.asarray(z0, dtype=float).reshape(-1)
        return cls(z_hat=z0, history=np.zeros((history_length(bounds), model.m)))


def _check_square_output(model):
    if model.p != model.n:
        raise ValueError(
            "the predictor-observer innovation A^d ybar - C Zhat needs p == n "
            f"(got p={model.p}, n={model.n})"
        )


def y_bar(y, k, st, model, bounds, powers=None, past_input_delays=None):
    """Delay-corrected output for the measurement ``y`` delivered at step ``k``."""
    d_O = y.age(k)
    if not bounds.h1_O <= d_O <= bounds.h2_O:
        raise ValueError(
            f"measurement age {d_O} outside output-delay bounds [{bounds.h1_O}, {bounds.h2_O}]"
        )
    A, B, C = model.A, model.B, model.C
    h1, h2 = bounds.h1_I, bounds.h2_I
    corr = phi(st.history, h1, A, B, powers) + phi(st.history, h2, A, B, powers)
    if past_input_delays is None:
        corr = corr + omega_bar(st.history, d_O, h1, h2, A, B, powers)
    else:
        corr = corr + _omega_measured(st.history, d_O, past_input_delays, A, B, powers)
    return np.asarray(y.value, dtype=float).reshape(-1) + C @ (_power(A, powers, -d_O) @ corr)


def predictor_step(st, u_k, ybar, d_O, model, gains, powers=None):
    """Observer update ``Zhat+ = A Zhat + F u + L (A^d ybar - C Zhat)``; records ``u_k``."""
    _check_square_output(model)
    u_k = np.asarray(u_k, dtype=float).reshape(-1)
    innovation = _power(model.A, powers, d_O) @ ybar - model.C @ st.z_hat
    z_next = model.A @ st.z_hat + gains.F @ u_k + gains.L @ innovation
    history = np.vstack([u_k[None, :], st.history[:-1]])
    return replace(st, z_hat=z_next, history=history, last_ybar=np.asarray(ybar))


def control_input(st, K):
    return np.atleast_2d(K) @ st.z_hat


def predict_arrival_state(st, model, bounds):
    """``2 (A^-h1 + A^-h2)^-1 Zhat``: the state expected when ``u(k)`` reaches the plant."""
    z_hat = st.z_hat if isinstance(st, PredictorState) else np.asarray(st, dtype=float)
    return arrival_map(model.A, bounds.h1_I, bounds.h2_I) @ z_hat


def artstein_oracle(x, history, bounds, model):
    """Ground-truth transformed state ``x + Phi(h1) + Phi(h2)`` (test oracle)."""
    A, B = model.A, model.B
    return (
        np.asarray(x, dtype=float).reshape(-1)
        + phi(history, bounds.h1_I, A, B)
        + phi(history, bounds.h2_I, A, B)
    )


class PredictorObserver:
    """Stateful controller wrapper used by the simulator.

    Each :meth:`update` consumes the measurement delivered at step ``k`` and
    returns ``u(k)``. The measured output delay comes from the timestamp only.

    Parameters
    ----------
    init : {"measurement", "zero"}
        ``Zhat(0)`` from the first measurement lifted by ``pinv(C)``, or zero.
    feedforward_in_history : bool
        Whether the feed-forward part of ``u`` enters the input history. By
        default only ``K Zhat`` does: the feed-forward and the exogenous
        term it offsets are left out together, since they roughly cancel.
    """

    def __init__(self, model, gains, bounds, init="measurement", feedforward_in_history=False):
        _check_square_output(model)
        if init not in ("measurement", "zero"):
            raise ValueError(f"unknown init {init!r}")
        if not gains.matches(model, bounds):
            raise ValueError("gains.F does not match the model and input-delay bounds")
        self.model = model
        self.gains = gains
        self.bounds = bounds
        self.init = init
        self.feedforward_in_history = bool(feedforward_in_history)
        self.powers = PowerTable(model.A, bounds.h2_O + bounds.h2_I + 1)
        self.arrival = arrival_map(model.A, bounds.h1_I, bounds.h2_I)
        self._C_pinv = np.linalg.pinv(model.C)
        self.state = None
        self.last_z = None
        self.last_prediction = None

    def reset(self):
        self.state = None
        self.last_z = None
        self.last_prediction = None

    def predicted_state(self):
        return self.arrival @ self.state.z_hat

    def update(self, meas, k, feedforward=0.0, past_input_delays=None):
        if self.state is None:
            st = PredictorState.initial(self.model, self.bounds)
            if self.init == "measurement":
                st = replace(st, z_hat=self._C_pinv @ np.asarray(meas.value, float).reshape(-1))
            self.state = st
        st = self.state
        ybar = y_bar(meas, k, st, self.model, self.bounds, self.powers, past_input_delays)
        u_fb = control_input(st, self.gains.K)
        u = u_fb + feedforward
        prediction = self.arrival @ st.z_hat
        recorded = u if self.feedforward_in_history else u_fb
        nxt = predictor_step(st, recorded, ybar, meas.age(k), self.model, self.gains, self.powers)
        self.state = replace(nxt, last_prediction=prediction)
        self.last_z = st.z_hat
        self.last_prediction = prediction
        return u

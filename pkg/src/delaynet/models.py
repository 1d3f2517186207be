"""Plant models for the lateral tracking task.

Continuous single-track error dynamics, their zero-order-hold discretization,
the norm-bounded uncertain linear truth model and a tire-saturating nonlinear
surrogate used as the "high-fidelity" plant in closed-loop experiments.

State ordering throughout is ``[beta, r, psi_L, y_L]``: side-slip angle, yaw
rate, heading error and lateral offset at the preview distance. The scalar
input is the front steering angle and ``rho`` is the reference curvature.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.linalg import expm

from ._validation import as_matrix, check_positive, check_square

__all__ = [
    "LateralParams",
    "ContinuousLti",
    "DiscreteLti",
    "UncertaintyModel",
    "NonlinearTruthParams",
    "TABLE1_PARAMS",
    "FIELD_TEST_PARAMS",
    "build_lateral_continuous",
    "discretize_zoh",
    "lateral_model",
    "sample_uncertainty",
    "step_linear_truth",
    "step_nonlinear_truth",
]


@dataclass(frozen=True)
class LateralParams:
    """Single-track vehicle parameters (SI units, stiffness in N/rad)."""

    c_f: float
    c_r: float
    l_f: float
    l_r: float
    l_s: float
    m: float
    I_z: float
    v: float

    def __post_init__(self):
        for name in ("c_f", "c_r", "l_f", "l_r", "l_s", "m", "I_z", "v"):
            check_positive(getattr(self, name), name)


# Simulation vehicle (A-class hatchback).
TABLE1_PARAMS = LateralParams(
    c_f=35696.0, c_r=32299.0, l_f=1.1, l_r=1.25, l_s=2.5, m=850.8, I_z=750.0, v=5.0
)

# Field-test SUV. Only used as a parameter fixture.
FIELD_TEST_PARAMS = LateralParams(
    c_f=121100.0, c_r=199831.0, l_f=1.17, l_r=1.48, l_s=3.0, m=1570.0, I_z=2700.0, v=3.5
)


@dataclass(frozen=True)
class ContinuousLti:
    A_c: np.ndarray
    B_c: np.ndarray
    P_rc: np.ndarray

    def __post_init__(self):
        A_c = check_square(as_matrix(self.A_c, "A_c"), "A_c")
        n = A_c.shape[0]
        B_c = as_matrix(self.B_c, "B_c", (n, None))
        P_rc = as_matrix(self.P_rc, "P_rc", (n, 1))
        for name, arr in (("A_c", A_c), ("B_c", B_c), ("P_rc", P_rc)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self):
        return self.A_c.shape[0]


def _rank(M, tol=None):
    return int(np.linalg.matrix_rank(M, tol=tol))


@dataclass(frozen=True)
class DiscreteLti:
    """Discrete plant ``x+ = A x + B u + P_r rho``, ``y = C x``.

    ``A`` must be invertible: the predictor uses negative powers of it. The
    pair (A, B) must be controllable and (A, C) observable unless
    ``check_structure=False``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    P_r: np.ndarray
    T_c: float
    check_structure: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        check_positive(self.T_c, "T_c")
        A = check_square(as_matrix(self.A, "A"), "A")
        n = A.shape[0]
        B = as_matrix(self.B, "B", (n, None))
        # 1-D C is read as a single output row
        C = as_matrix(np.atleast_2d(np.asarray(self.C, dtype=float)), "C", (None, n))
        P_r = as_matrix(self.P_r, "P_r", (n, 1))
        if np.linalg.cond(A) > 1e12:
            raise ValueError("discrete A is (numerically) singular; the predictor needs A^-1")
        if self.check_structure:
            ctrb = np.hstack([np.linalg.matrix_power(A, i) @ B for i in range(n)])
            if _rank(ctrb) < n:
                raise ValueError("(A, B) is not controllable")
            obsv = np.vstack([C @ np.linalg.matrix_power(A, i) for i in range(n)])
            if _rank(obsv) < n:
                raise ValueError("(A, C) is not observable")
        for name, arr in (("A", A), ("B", B), ("C", C), ("P_r", P_r)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "T_c", float(self.T_c))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def p(self):
        return self.C.shape[0]


def build_lateral_continuous(p):
    """Continuous lateral error dynamics for the parameters ``p``."""
    c_f, c_r, l_f, l_r, l_s, m, I_z, v = (
        p.c_f, p.c_r, p.l_f, p.l_r, p.l_s, p.m, p.I_z, p.v,
    )
    if v <= 0:
        raise ValueError("longitudinal speed must be positive; the model is singular at v=0")
    A_c = np.array(
        [
            [-(c_f + c_r) / (m * v), -1.0 + (c_r * l_r - c_f * l_f) / (m * v**2), 0.0, 0.0],
            [(c_r * l_r - c_f * l_f) / I_z, -(c_f * l_f**2 + c_r * l_r**2) / (v * I_z), 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [v, l_s, v, 0.0],
        ]
    )
    B_c = np.array([[c_f / (m * v)], [c_f * l_f / I_z], [0.0], [0.0]])
    P_rc = np.array([[0.0], [0.0], [-v], [-v * l_s]])
    return ContinuousLti(A_c, B_c, P_rc)


def discretize_zoh(c, C=None, T_c=0.05, check_structure=True):
    """Zero-order-hold discretization through one augmented matrix exponential.

    ``exp([[A_c, B_c, P_rc], [0, 0, 0]] * T_c)`` carries ``A`` in its leading
    block and the held-input integrals for ``B`` and ``P_r`` in the columns
    to the right of it.
    """
    T_c = check_positive(T_c, "T_c")
    n, m = c.B_c.shape
    aug = np.zeros((n + m + 1, n + m + 1))
    aug[:n, :n] = c.A_c
    aug[:n, n : n + m] = c.B_c
    aug[:n, n + m :] = c.P_rc
    E = expm(aug * T_c)
    if not np.all(np.isfinite(E)):
        raise FloatingPointError("matrix exponential did not converge to finite values")
    C = np.eye(n) if C is None else C
    return DiscreteLti(
        A=E[:n, :n],
        B=E[:n, n : n + m],
        C=C,
        P_r=E[:n, n + m :],
        T_c=T_c,
        check_structure=check_structure,
    )


def lateral_model(params=TABLE1_PARAMS, T_c=0.05, C=None):
    """Shortcut: continuous build from physical parameters followed by ZOH."""
    return discretize_zoh(build_lateral_continuous(params), C=C, T_c=T_c)


@dataclass(frozen=True)
class UncertaintyModel:
    """Norm-bounded uncertainty ``(dA, dB) = gamma * E * Delta(k) * (H_A, H_B)``.

    ``gamma_tilde``/``E_tilde`` describe the averaged uncertainty over an
    output-delay window; they default to ``gamma``/``E``.
    """

    gamma: float
    E: np.ndarray
    H_A: np.ndarray
    H_B: np.ndarray
    gamma_tilde: float = None
    E_tilde: np.ndarray = None

    def __post_init__(self):
        check_positive(self.gamma, "gamma", strict=False)
        E = as_matrix(self.E, "E")
        H_A = as_matrix(self.H_A, "H_A", (None, E.shape[0]))
        H_B = as_matrix(self.H_B, "H_B", (H_A.shape[0], None))
        g_t = self.gamma if self.gamma_tilde is None else self.gamma_tilde
        check_positive(g_t, "gamma_tilde", strict=False)
        E_t = E if self.E_tilde is None else as_matrix(self.E_tilde, "E_tilde", (E.shape[0], None))
        for name, arr in (("E", E), ("H_A", H_A), ("H_B", H_B), ("E_tilde", E_t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "gamma_tilde", float(g_t))

    @classmethod
    def default(cls, n, m, gamma=0.02):
        """E = I, H_A = I, H_B = 0. Not taken from any experiment."""
        return cls(gamma=gamma, E=np.eye(n), H_A=np.eye(n), H_B=np.zeros((n, m)))

    @classmethod
    def none(cls, n, m):
        return cls.default(n, m, gamma=0.0)


def sample_uncertainty(unc, k, rng):
    """Draw ``(dA, dB)`` for step ``k``; ``Delta(k)`` has spectral norm <= 1.

    Draws are i.i.d. across steps, so ``k`` only documents the call site.
    """
    r = unc.E.shape[1]
    q = unc.H_A.shape[0]
    n, m = unc.E.shape[0], unc.H_B.shape[1]
    if unc.gamma == 0.0:
        return np.zeros((n, n)), np.zeros((n, m))
    delta = rng.standard_normal((r, q))
    smax = np.linalg.norm(delta, 2)
    if smax > 0:
        delta = delta / smax
    delta *= rng.uniform(0.0, 1.0)
    G = unc.gamma * unc.E @ delta
    return G @ unc.H_A, G @ unc.H_B


def step_linear_truth(model, x, u, rho, unc=None, k=0, rng=None):
    """One step of the (possibly uncertain) linear plant.

    ``u`` is the input already delayed by the caller's input channel.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    A, B = model.A, model.B
    if unc is not None and unc.gamma > 0.0:
        if rng is None:
            raise ValueError("an RNG is required when gamma > 0")
        dA, dB = sample_uncertainty(unc, k, rng)
        A = A + dA
        B = B + dB
    return A @ x + B @ u + model.P_r[:, 0] * float(rho)


@dataclass(frozen=True)
class NonlinearTruthParams:
    """Single-track surrogate with arctangent tire saturation.

    Axle force is ``c * alpha_sat * atan(alpha / alpha_sat)``; ``alpha_sat`` in
    rad. ``substeps`` RK4 steps are taken per sample period.
    """

    lateral: LateralParams
    alpha_sat: float = 0.08
    substeps: int = 20

    def __post_init__(self):
        check_positive(self.alpha_sat, "alpha_sat")
        if int(self.substeps) < 1:
            raise ValueError("substeps must be >= 1")


def _single_track_rhs(x, delta, rho, p, a_sat):
    beta, r, psi, _ = x
    v = p.v
    alpha_f = delta - beta - p.l_f * r / v
    alpha_r = -beta + p.l_r * r / v
    fy_f = p.c_f * a_sat * math.atan(alpha_f / a_sat)
    fy_r = p.c_r * a_sat * math.atan(alpha_r / a_sat)
    return (
        (fy_f + fy_r) / (p.m * v) - r,
        (p.l_f * fy_f - p.l_r * fy_r) / p.I_z,
        r - v * rho,
        v * beta + p.l_s * r + v * psi - v * p.l_s * rho,
    )


def step_nonlinear_truth(x, u, rho, p, T_c=0.05):
    """Advance the nonlinear surrogate over one held-input period ``T_c``."""
    delta = float(np.asarray(u, dtype=float).reshape(-1)[0])
    rho = float(rho)
    lat, a_sat = p.lateral, p.alpha_sat
    h = T_c / int(p.substeps)
    s = tuple(float(v) for v in np.asarray(x, dtype=float).reshape(-1))
    f = _single_track_rhs
    for _ in range(int(p.substeps)):
        k1 = f(s, delta, rho, lat, a_sat)
        k2 = f(tuple(a + 0.5 * h * b for a, b in zip(s, k1)), delta, rho, lat, a_sat)
        k3 = f(tuple(a + 0.5 * h * b for a, b in zip(s, k2)), delta, rho, lat, a_sat)
        k4 = f(tuple(a + h * b for a, b in zip(s, k3)), delta, rho, lat, a_sat)
        s = tuple(
            a + h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
            for a, b1, b2, b3, b4 in zip(s, k1, k2, k3, k4)
        )
    return np.array(s)

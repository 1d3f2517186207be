"""Delay-free interconnected representation of the closed loop and its
matrix-inequality stability test.

The closed loop (plant, delay channels, predictor-observer) is rewritten as a
nominal system ``M_s`` in feedback with a block-diagonal, norm-bounded
operator ``Delta_bar``::

    Xb(k+1) = Ab Xb(k) + Bb Wb(k)
    Yb(k)   = Cb Xb(k) + Db Wb(k)
    Wb(k)   = Delta_bar(k) Yb(k)

with state ``Xb = [Z; x(k-1); u(k-1); e]``. Stability with decay rate
``beta`` is certified by a symmetric ``P > 0`` making the block matrix
assembled in :func:`mi_matrix` negative definite.
"""

from dataclasses import dataclass, field
import json

import numpy as np
from scipy.linalg import solve_discrete_lyapunov
from scipy.optimize import minimize_scalar

from ._validation import check_symmetric, check_positive
from .predictor import matrix_power

__all__ = [
    "InterconnectedSystem",
    "StabilityCertificate",
    "hinf_norm_poly",
    "mu_values",
    "build_interconnected",
    "build_all",
    "mi_matrix",
    "check_mi",
    "search_feasible_P",
    "spectral_margins",
]

DEFAULT_GRID = 1024

W_NAMES = ("w_delta", "w_d", "w_d_tilde", "w_p", "w1", "w2", "w3", "w4", "w5", "w6", "w7")
Y_NAMES = ("y_delta", "v", "v_tilde", "y_p", "v1", "v2", "v3", "v4", "v5", "v6", "q")


def _sigma_max(coeffs, theta):
    """Largest singular value of ``sum_f M_f exp(-i theta f)`` at each angle."""
    fs = np.array([f for f, _ in coeffs], dtype=float)
    mats = np.stack([np.atleast_2d(np.asarray(M, dtype=float)) for _, M in coeffs])
    phase = np.exp(-1j * np.outer(np.atleast_1d(theta), fs))
    G = np.einsum("tf,fab->tab", phase, mats)
    if G.shape[1] == 1 or G.shape[2] == 1:
        return np.sqrt(np.sum(np.abs(G) ** 2, axis=(1, 2)))
    return np.linalg.svd(G, compute_uv=False)[:, 0]


def hinf_norm_poly(coeffs, n_grid=DEFAULT_GRID, refine=True):
    """H-infinity norm of the matrix polynomial ``sum_f M_f z^-f`` on |z| = 1.

    Evaluated on ``n_grid`` equispaced angles (including theta = 0). With
    ``refine`` the best few grid points are polished by a bounded scalar
    search on the neighbouring grid cell; the result never drops below the
    grid maximum, and gains below floating-point resolution are discarded.

    Parameters
    ----------
    coeffs : list of (int, array_like)
        ``(f, M_f)`` pairs with ``f >= 0``. Repeated ``f`` are summed.
    """
    coeffs = [(int(f), M) for f, M in coeffs]
    if not coeffs:
        return 0.0
    if any(f < 0 for f, _ in coeffs):
        raise ValueError("polynomial powers must be non-negative")
    n_grid = int(n_grid)
    if n_grid < 1:
        raise ValueError("n_grid must be positive")
    theta = 2.0 * np.pi * np.arange(n_grid) / n_grid
    vals = _sigma_max(coeffs, theta)
    best = float(vals.max())
    if not refine or max(f for f, _ in coeffs) == 0:
        return best
    width = 2.0 * np.pi / n_grid
    grid_best = best
    for idx in np.argsort(vals)[::-1][:3]:
        t0 = theta[idx]
        res = minimize_scalar(
            lambda t: -float(_sigma_max(coeffs, t)[0]),
            bounds=(t0 - width, t0 + width),
            method="bounded",
            options={"xatol": 1e-12},
        )
        if -float(res.fun) > grid_best * (1.0 + 16 * np.finfo(float).eps):
            best = max(best, -float(res.fun))
    return best


def _binom1(n):
    # first-order binomial coefficient C(n, 1)
    return float(n)


def _check_structure(model, unc):
    n, m = model.n, model.m
    if model.p != n:
        raise ValueError("the interconnected form needs a square output matrix (p == n)")
    if unc.H_A.shape != (n, n) or unc.H_B.shape != (n, m):
        raise ValueError(
            "the interconnected form needs H_A n x n and H_B n x m "
            f"(got {unc.H_A.shape}, {unc.H_B.shape})"
        )


def mu_values(model, unc, bounds, d_O, n_grid=DEFAULT_GRID):
    """The seven operator-norm bounds ``mu_1 .. mu_7`` for output delay ``d_O``."""
    A, B = model.A, model.B
    H_A, H_B = unc.H_A, unc.H_B
    hs = (bounds.h1_I, bounds.h2_I)
    d = int(d_O)

    c1 = [(f, 0.5) for h in hs for f in range(1, h)]
    c2 = [
        (f, 0.5 * matrix_power(A, -i - 1) @ B)
        for h in hs
        for i in range(h + 1)
        for f in range(1, h - i)
    ]

    def window(h, left):
        return [
            (f, left(i))
            for i in range(d)
            for f in range(1, d + h - i)
        ]

    hb = lambda i: matrix_power(A, d - i - 1) @ H_B  # noqa: E731
    hab = lambda i: matrix_power(A, d - i - 2) @ H_A @ B  # noqa: E731
    c3 = window(bounds.h1_I, hb)
    c4 = window(bounds.h1_I, hab)
    c5 = window(bounds.h2_I, hb)
    c6 = window(bounds.h2_I, hab)
    c7 = [(f, 1.0) for f in range(d)]
    return np.array([hinf_norm_poly(c, n_grid) for c in (c1, c2, c3, c4, c5, c6, c7)])


@dataclass(frozen=True)
class InterconnectedSystem:
    """Nominal part ``M_s`` of the interconnection plus the data used to build it.

    ``w_blocks``/``y_blocks`` list ``(name, size)`` pairs; block ``i`` of
    ``Wb`` is driven by block ``i`` of ``Yb`` through a unit-norm operator.
    """

    A_bar: np.ndarray
    B_bar: np.ndarray
    C_bar: np.ndarray
    D_bar: np.ndarray
    w_blocks: tuple
    y_blocks: tuple
    x_blocks: tuple = ()
    mu: np.ndarray = None
    beta1: np.ndarray = None
    beta2: np.ndarray = None
    beta3: np.ndarray = None
    upsilon: np.ndarray = None
    d_O: int = None

    def __post_init__(self):
        N = self.A_bar.shape[0]
        W = sum(s for _, s in self.w_blocks)
        Y = sum(s for _, s in self.y_blocks)
        if len(self.w_blocks) != len(self.y_blocks):
            raise ValueError("w_blocks and y_blocks must pair up one to one")
        shapes = {
            "A_bar": (self.A_bar.shape, (N, N)),
            "B_bar": (self.B_bar.shape, (N, W)),
            "C_bar": (self.C_bar.shape, (Y, N)),
            "D_bar": (self.D_bar.shape, (Y, W)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")
        if self.x_blocks and sum(s for _, s in self.x_blocks) != N:
            raise ValueError("x_blocks do not add up to the state dimension")

    @classmethod
    def from_matrices(cls, A_bar, B_bar, C_bar, D_bar, w_blocks=None, y_blocks=None):
        """Wrap raw matrices; by default the whole of W and Y form one block."""
        A_bar, B_bar, C_bar, D_bar = (np.atleast_2d(np.asarray(M, float)) for M in (A_bar, B_bar, C_bar, D_bar))
        w_blocks = w_blocks or (("w", B_bar.shape[1]),)
        y_blocks = y_blocks or (("y", C_bar.shape[0]),)
        return cls(A_bar, B_bar, C_bar, D_bar, tuple(w_blocks), tuple(y_blocks))

    @property
    def n_state(self):
        return self.A_bar.shape[0]

    def block_slices(self, blocks):
        out, start = [], 0
        for _, size in blocks:
            out.append(slice(start, start + size))
            start += size
        return out


def build_interconnected(model, unc, gains, bounds, d_O, n_grid=DEFAULT_GRID):
    """Assemble ``(Ab, Bb, Cb, Db)`` for one output-delay value ``d_O``."""
    if not bounds.h1_O <= d_O <= bounds.h2_O:
        raise ValueError(f"d_O={d_O} outside [{bounds.h1_O}, {bounds.h2_O}]")
    _check_structure(model, unc)
    A, B, C = model.A, model.B, model.C
    K, L, F = gains.K, gains.L, gains.F
    n, m = model.n, model.m
    d = int(d_O)
    E, H_A, H_B = unc.E, unc.H_A, unc.H_B
    r, rt = E.shape[1], unc.E_tilde.shape[1]
    tau = bounds.tau
    I_n, I_m = np.eye(n), np.eye(m)
    Z_nn = np.zeros((n, n))

    mu = mu_values(model, unc, bounds, d, n_grid)
    mu1, mu2, mu3, mu4, mu5, mu6, mu7 = mu
    beta1 = _binom1(d) * matrix_power(A, d - 1)
    beta2 = sum((matrix_power(A, d - i - 1) for i in range(d)), Z_nn.copy())
    beta3 = sum((_binom1(d) * matrix_power(A, d - i - 2) for i in range(d)), Z_nn.copy())
    upsilon = 0.5 * sum(
        matrix_power(A, -i - 1) @ B for h in (bounds.h1_I, bounds.h2_I) for i in range(h + 1)
    )
    LAC = L @ matrix_power(A, d) @ C @ matrix_power(A, -d)

    x_blocks = (("Z", n), ("x_prev", n), ("u_prev", m), ("e", n))
    w_blocks = tuple(zip(W_NAMES, (r, m, n, rt, m, n, n, n, n, n, n)))
    y_blocks = tuple(zip(Y_NAMES, (n, m, n, n, m, m, m, m, m, m, n)))

    def zeros(rows, cols):
        return np.zeros((rows, cols))

    A_bar = np.block(
        [
            [A + F @ K, Z_nn, zeros(n, m), -F @ K],
            [I_n, Z_nn, -upsilon, Z_nn],
            [K, zeros(m, n), zeros(m, m), -K],
            [Z_nn, Z_nn, zeros(n, m), A - LAC],
        ]
    )

    w_sizes = [s for _, s in w_blocks]

    def brow(rows, entries):
        cols = [entries.get(i, zeros(rows, s)) for i, s in enumerate(w_sizes)]
        return np.hstack(cols)

    g_E = unc.gamma * E
    B_bar = np.vstack(
        [
            brow(n, {0: g_E, 1: 0.5 * tau * B}),
            brow(n, {5: mu2 * I_n}),
            brow(m, {}),
            brow(n, {0: g_E, 1: 0.5 * tau * B, 3: LAC @ (unc.gamma_tilde * unc.E_tilde)}),
        ]
    )

    v_row = np.hstack([K, zeros(m, n), -I_m, -K])
    C_bar = np.vstack(
        [
            np.hstack([H_A, Z_nn, H_B - H_A @ upsilon, Z_nn]),
            v_row,
            np.hstack([beta2 @ B @ K, Z_nn, -beta2 @ B, -beta2 @ B @ K]),
            np.hstack([Z_nn, beta1 @ H_A, beta2 @ H_B + beta3 @ H_A @ B, Z_nn]),
            *([v_row] * 6),
            np.hstack([I_n, -I_n, -upsilon, Z_nn]),
        ]
    )

    D_bar = np.vstack(
        [
            brow(n, {1: 0.5 * tau * H_B, 4: -mu1 * H_B, 5: mu2 * H_A}),
            brow(m, {}),
            brow(n, {}),
            brow(
                n,
                {
                    2: I_n,
                    6: -0.5 * mu3 * I_n,
                    7: -0.5 * _binom1(d) * mu4 * I_n,
                    8: -0.5 * mu5 * I_n,
                    9: -0.5 * _binom1(d) * mu6 * I_n,
                    10: -mu7 * beta1 @ H_A,
                },
            ),
            *[brow(m, {}) for _ in range(6)],
            brow(n, {5: mu2 * I_n}),
        ]
    )

    return InterconnectedSystem(
        A_bar=A_bar,
        B_bar=B_bar,
        C_bar=C_bar,
        D_bar=D_bar,
        w_blocks=w_blocks,
        y_blocks=y_blocks,
        x_blocks=x_blocks,
        mu=mu,
        beta1=beta1,
        beta2=beta2,
        beta3=beta3,
        upsilon=upsilon,
        d_O=d,
    )


def build_all(model, unc, gains, bounds, n_grid=DEFAULT_GRID):
    """One interconnected system per admissible output delay."""
    return [build_interconnected(model, unc, gains, bounds, d, n_grid) for d in bounds.output_range()]


def _lambda_diag(blocks, lam):
    return np.concatenate([np.full(size, float(l)) for (_, size), l in zip(blocks, lam)]) if blocks else np.zeros(0)


def mi_matrix(sys, P, beta, multipliers=None):
    """Symmetric block matrix whose negativity certifies decay rate ``beta``.

    With ``multipliers=None`` every ``Delta`` block is weighted by 1, which
    is the plain condition::

        [[-b^2 P,  0,  Ab'P, Cb'],
         [  *,    -I,  Bb'P, Db'],
         [  *,     *,   -P,   0 ],
         [  *,     *,    *,  -I ]]

    Positive per-block weights ``lambda_i`` replace the identity blocks by
    ``Lambda`` (on both the W and Y sides) and scale ``Cb', Db'`` to
    ``Cb' Lambda, Db' Lambda``; this is the same test applied to the
    equivalently rescaled interconnection.
    """
    P = np.asarray(P, dtype=float)
    check_symmetric(P, "P", tol=1e-12)
    N = sys.n_state
    if P.shape != (N, N):
        raise ValueError(f"P has shape {P.shape}, expected {(N, N)}")
    nb = len(sys.w_blocks)
    lam = np.ones(nb) if multipliers is None else np.asarray(multipliers, dtype=float)
    if lam.shape != (nb,):
        raise ValueError(f"expected {nb} multipliers, got {lam.shape}")
    lw = _lambda_diag(sys.w_blocks, lam)
    ly = _lambda_diag(sys.y_blocks, lam)
    W, Y = lw.size, ly.size
    Ab, Bb, Cb, Db = sys.A_bar, sys.B_bar, sys.C_bar, sys.D_bar

    M = np.zeros((2 * N + W + Y, 2 * N + W + Y))
    i1, i2, i3, i4 = 0, N, N + W, 2 * N + W
    M[i1:i2, i1:i2] = -(beta**2) * P
    M[i2:i3, i2:i3] = -np.diag(lw)
    M[i3:i4, i3:i4] = -P
    M[i4:, i4:] = -np.diag(ly)
    M[i1:i2, i3:i4] = Ab.T @ P
    M[i1:i2, i4:] = Cb.T * ly
    M[i2:i3, i3:i4] = Bb.T @ P
    M[i2:i3, i4:] = Db.T * ly
    # mirror the strict upper blocks so the result is exactly symmetric
    upper = np.triu(M, 1)
    return np.triu(M) + upper.T


def check_mi(sys, P, beta, multipliers=None):
    """Largest eigenvalue of :func:`mi_matrix`; negative means the test passes."""
    M = mi_matrix(sys, P, beta, multipliers)
    asym = np.max(np.abs(M - M.T), initial=0.0)
    assert asym <= 1e-12 * max(1.0, np.max(np.abs(M))), "MI block matrix lost symmetry"
    return float(np.linalg.eigvalsh(M)[-1])


@dataclass
class StabilityCertificate:
    """Outcome of :func:`search_feasible_P`.

    ``feasible`` is true only when ``margin < 0`` for every system in the set.
    An infeasible result still carries the best ``P`` found.
    """

    P: np.ndarray
    beta: float
    margin: float
    d_O_set: tuple
    feasible: bool
    multipliers: np.ndarray = None
    iterations: int = 0
    margins: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "feasible": bool(self.feasible),
            "beta": float(self.beta),
            "margin": float(self.margin),
            "d_O_set": [int(d) for d in self.d_O_set] if self.d_O_set else [],
            "margins": {str(k): float(v) for k, v in self.margins.items()},
            "iterations": int(self.iterations),
            "min_eig_P": float(np.linalg.eigvalsh(self.P)[0]),
            "multipliers": None if self.multipliers is None else [float(x) for x in self.multipliers],
            "P": np.asarray(self.P).tolist(),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _project_psd(P, eps):
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    R = (V * np.maximum(w, eps)) @ V.T
    return 0.5 * (R + R.T)


def _subgradient(sys, P, beta, lam, M):
    """Subgradient of the top eigenvalue of ``M`` w.r.t. ``P`` and ``lam``."""
    w, V = np.linalg.eigh(M)
    v = V[:, -1]
    N = sys.n_state
    W = sys.B_bar.shape[1]
    v1, v2, v3, v4 = v[:N], v[N : N + W], v[N + W : 2 * N + W], v[2 * N + W :]
    a = sys.A_bar @ v1 + sys.B_bar @ v2
    G = -(beta**2) * np.outer(v1, v1) + np.outer(a, v3) + np.outer(v3, a) - np.outer(v3, v3)
    G = 0.5 * (G + G.T)
    c = sys.C_bar @ v1 + sys.D_bar @ v2
    g_lam = np.array(
        [
            -v2[sw] @ v2[sw] + 2.0 * v4[sy] @ c[sy] - v4[sy] @ v4[sy]
            for sw, sy in zip(sys.block_slices(sys.w_blocks), sys.block_slices(sys.y_blocks))
        ]
    )
    return float(w[-1]), G, g_lam


def _initial_points(systems, beta, eps):
    N = systems[0].n_state
    yield np.eye(N)
    for sys in systems:
        Ab = sys.A_bar / beta
        if np.max(np.abs(np.linalg.eigvals(Ab))) < 1.0:
            P = solve_discrete_lyapunov(Ab.T, np.eye(N))
            P = _project_psd(P, eps)
            yield P / np.max(np.linalg.eigvalsh(P))


def search_feasible_P(
    systems,
    beta=1.0,
    *,
    scaled=True,
    max_iter=5000,
    eps=1e-6,
    tol=1e-9,
):
    """Look for one ``P`` certifying every system in ``systems`` at rate ``beta``.

    Projected subgradient descent on ``max_s lambda_max(M_s(P))`` with ``P``
    kept symmetric and ``>= eps I``. With ``scaled`` the per-block weights of
    :func:`mi_matrix` are searched jointly with ``P`` (the problem is then
    homogeneous, so iterates are renormalised to unit spectral scale).
    Stops as soon as the worst margin drops below ``-tol``.
    """
    systems = list(systems)
    if not systems:
        raise ValueError("need at least one system")
    check_positive(beta, "beta")
    N = systems[0].n_state
    blocks = (systems[0].w_blocks, systems[0].y_blocks)
    for s in systems[1:]:
        if s.n_state != N or (s.w_blocks, s.y_blocks) != blocks:
            raise ValueError("all systems must share the same block structure")
    nb = len(blocks[0])
    d_set = tuple(s.d_O for s in systems if s.d_O is not None)

    def evaluate(P, lam):
        worst = None
        for s in systems:
            M = mi_matrix(s, P, beta, lam if scaled else None)
            top = float(np.linalg.eigvalsh(M)[-1])
            if worst is None or top > worst[0]:
                worst = (top, s, M)
        return worst

    def normalise(P, lam):
        if not scaled:
            return P, lam
        s = max(float(np.linalg.eigvalsh(P)[-1]), float(lam.max()))
        return P / s, lam / s

    best = None
    for P0 in _initial_points(systems, beta, eps):
        lam0 = np.ones(nb)
        f0 = evaluate(P0, lam0)[0]
        if best is None or f0 < best[0]:
            best = (f0, P0, lam0)
    f_best, P, lam = best
    P_best, lam_best = P, lam
    it = 0
    while f_best >= -tol and it < max_iter:
        it += 1
        f, s, M = evaluate(P, lam)
        if f < f_best:
            f_best, P_best, lam_best = f, P, lam
            if f_best < -tol:
                break
        _, G, g_lam = _subgradient(s, P, beta, lam, M)
        if not scaled:
            g_lam = np.zeros_like(g_lam)
        gnorm2 = float(np.sum(G * G) + g_lam @ g_lam)
        if gnorm2 == 0.0:
            break
        # Polyak step toward a slightly negative target value
        target = min(f_best, 0.0) - 1e-3 * (1.0 + abs(f_best))
        step = (f - target) / gnorm2
        P = _project_psd(P - step * G, eps)
        lam = np.maximum(lam - step * g_lam, eps)
        P, lam = normalise(P, lam)
        P = _project_psd(P, eps)

    f_final, _, _ = evaluate(P_best, lam_best)
    margins = {
        (s.d_O if s.d_O is not None else i): check_mi(s, P_best, beta, lam_best if scaled else None)
        for i, s in enumerate(systems)
    }
    return StabilityCertificate(
        P=P_best,
        beta=float(beta),
        margin=float(f_final),
        d_O_set=d_set,
        feasible=bool(f_final < 0.0),
        multipliers=lam_best.copy() if scaled else None,
        iterations=it,
        margins=margins,
    )


def spectral_margins(model, gains, bounds, d_O):
    """Spectral radii of the nominal transformed loop ``A + F K`` and of the
    observer error map ``A - L A^d C A^-d``."""
    A = model.A
    rho_ctrl = float(np.max(np.abs(np.linalg.eigvals(A + gains.F @ gains.K))))
    obs = A - gains.L @ matrix_power(A, d_O) @ model.C @ matrix_power(A, -d_O)
    rho_obs = float(np.max(np.abs(np.linalg.eigvals(obs))))
    return rho_ctrl, rho_obs

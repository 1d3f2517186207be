"""Closed-loop lane-change experiments over delayed channels.

Per step ``k``:

1. the sensor reading ``C x(k) + noise`` enters the output channel;
2. the controller receives the reading stamped ``k - d_O`` and computes
   ``u(k)`` (feedback plus curvature feed-forward);
3. ``u(k)`` enters the input channel and the plant receives ``u(k - d_I)``;
4. the truth model advances with that input and the reference curvature.

Delay traces are always pre-drawn from dedicated RNG streams, so switching
controllers under one seed replays identical delay sequences.
"""

from dataclasses import dataclass, field
import io

import numpy as np
from scipy.linalg import solve_discrete_are

from .delays import DelayChannel, draw_trace
from .models import (
    NonlinearTruthParams,
    step_linear_truth,
    step_nonlinear_truth,
)
from .predictor import PredictorObserver

__all__ = [
    "ReferenceTrajectory",
    "SimulationLog",
    "Metrics",
    "BatchResult",
    "StateFeedback",
    "gen_lane_change",
    "dlqr",
    "curvature_feedforward_gain",
    "run_closed_loop",
    "compute_metrics",
    "summarize",
    "batch_runs",
    "DIVERGENCE_THRESHOLD",
]

DIVERGENCE_THRESHOLD = 1e6


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Per-step curvature of a quintic lane change plus plotting references."""

    rho: np.ndarray
    heading: np.ndarray
    lateral: np.ndarray
    shift: float
    length: float
    start: float

    def __len__(self):
        return len(self.rho)


def gen_lane_change(shift_m, length_m, v, T_c, start_m=0.0, n_steps=None):
    """Quintic lateral shift ``shift * (10 s^3 - 15 s^4 + 6 s^5)`` over arc length.

    ``rho[k]`` is the exact average of the profile's second derivative over
    the arc travelled in step ``k`` (small-angle curvature). The per-step
    values therefore telescope: ``sum(rho) * v * T_c`` equals the net slope
    change, which is zero for a completed maneuver.
    """
    for name, val in (("shift_m", shift_m), ("length_m", length_m), ("v", v), ("T_c", T_c)):
        if not val > 0:
            raise ValueError(f"{name} must be positive")
    ds = v * T_c
    if n_steps is None:
        n_steps = int(np.ceil((start_m + length_m) / ds)) + 1
    s = np.arange(int(n_steps) + 1) * ds
    tau = np.clip((s - start_m) / length_m, 0.0, 1.0)
    lateral = shift_m * (10 * tau**3 - 15 * tau**4 + 6 * tau**5)
    slope = shift_m / length_m * (30 * tau**2 - 60 * tau**3 + 30 * tau**4)
    rho = np.diff(slope) / ds
    return ReferenceTrajectory(
        rho=rho, heading=slope[:-1], lateral=lateral[:-1], shift=float(shift_m),
        length=float(length_m), start=float(start_m),
    )


def dlqr(A, B, Q, R, return_P=False):
    """Discrete LQR gain from the stabilizing Riccati solution.

    Returns ``K`` such that ``u = K x`` (i.e. the negated textbook gain).
    Raises RuntimeError when no stabilizing solution exists.
    """
    A = np.atleast_2d(np.asarray(A, float))
    B = np.atleast_2d(np.asarray(B, float))
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    if B.shape[0] != A.shape[0]:
        B = B.T
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
        raise ValueError("R must be positive definite")
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
        raise ValueError("Q must be positive semidefinite")
    try:
        P = solve_discrete_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise RuntimeError(f"no stabilizing Riccati solution; is (A, B) stabilizable? ({exc})") from exc
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if not np.all(np.isfinite(K)):
        raise RuntimeError("no stabilizing Riccati solution; is (A, B) stabilizable?")
    return (K, P) if return_P else K


def curvature_feedforward_gain(model):
    """Steering per unit curvature that makes a constant curve an equilibrium
    with zero lateral offset (last state)."""
    n = model.n
    A_I = model.A - np.eye(n)
    M = np.hstack([A_I[:, : n - 1], model.B])
    sol, *_ = np.linalg.lstsq(M, -model.P_r[:, 0], rcond=None)
    return sol[n - 1 :]


class StateFeedback:
    """Baseline: ``u = K pinv(C) y`` on the raw delayed measurement."""

    def __init__(self, K, model):
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self._C_pinv = np.linalg.pinv(model.C)
        self.last_z = None
        self.last_prediction = None

    def reset(self):
        pass

    def update(self, meas, k, feedforward=0.0, past_input_delays=None):
        return self.K @ (self._C_pinv @ np.asarray(meas.value, float)) + feedforward


@dataclass
class SimulationLog:
    """Per-step record of one run. Arrays share their first axis (steps)."""

    k: np.ndarray
    t: np.ndarray
    x: np.ndarray
    u_applied: np.ndarray
    u_computed: np.ndarray
    d_O: np.ndarray
    d_I: np.ndarray
    zhat: np.ndarray
    xpred: np.ndarray
    y_meas: np.ndarray
    rho: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.k)

    @property
    def diverged(self):
        return bool(self.meta.get("diverged", False))

    def header(self):
        n, p = self.x.shape[1], self.y_meas.shape[1]
        names = ["beta", "r", "psi_L", "y_L"] if n == 4 else [f"x_{i + 1}" for i in range(n)]
        cols = ["k", "t", *names, "u_applied", "u_computed", "d_O", "d_I"]
        cols += [f"zhat_{i + 1}" for i in range(n)]
        cols += [f"xpred_{i + 1}" for i in range(n)]
        cols += [f"y_meas_{i + 1}" for i in range(p)]
        cols.append("rho_ref")
        return cols

    def to_csv(self, path=None):
        """Write (or return) the CSV log; floats use round-trip precision."""
        buf = io.StringIO()
        buf.write(",".join(self.header()) + "\n")
        for i in range(len(self)):
            row = [str(int(self.k[i])), repr(float(self.t[i]))]
            row += [repr(float(v)) for v in self.x[i]]
            row += [repr(float(self.u_applied[i, 0])), repr(float(self.u_computed[i, 0]))]
            row += [str(int(self.d_O[i])), str(int(self.d_I[i]))]
            row += [repr(float(v)) for v in self.zhat[i]]
            row += [repr(float(v)) for v in self.xpred[i]]
            row += [repr(float(v)) for v in self.y_meas[i]]
            row.append(repr(float(self.rho[i])))
            buf.write(",".join(row) + "\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


@dataclass(frozen=True)
class Metrics:
    mean_abs_lateral: float
    mean_abs_heading: float
    rms_lateral: float
    rms_heading: float
    diverged: bool
    n_steps: int

    def as_dict(self):
        return {
            "mean_abs_lateral": self.mean_abs_lateral,
            "mean_abs_heading": self.mean_abs_heading,
            "rms_lateral": self.rms_lateral,
            "rms_heading": self.rms_heading,
            "diverged": self.diverged,
            "n_steps": self.n_steps,
        }


def compute_metrics(log, lateral_index=-1, heading_index=-2, threshold=DIVERGENCE_THRESHOLD):
    """Tracking-error statistics; the error states are already relative to the path.

    Single-state plants have no heading state; their heading metrics are NaN.
    """
    if len(log) == 0:
        raise ValueError("empty log")
    x = np.asarray(log.x, dtype=float)
    bad = ~np.all(np.isfinite(x) & (np.abs(x) <= threshold), axis=1)
    diverged = bool(bad.any()) or log.diverged
    stop = int(np.argmax(bad)) if bad.any() else len(x)
    if stop == 0:
        nan = float("nan")
        return Metrics(nan, nan, nan, nan, True, 0)
    lat = np.abs(x[:stop, lateral_index])
    if -x.shape[1] <= heading_index < x.shape[1]:
        head = np.abs(x[:stop, heading_index])
    else:
        head = np.full(stop, np.nan)
    return Metrics(
        mean_abs_lateral=float(lat.mean()),
        mean_abs_heading=float(head.mean()),
        rms_lateral=float(np.sqrt(np.mean(lat**2))),
        rms_heading=float(np.sqrt(np.mean(head**2))),
        diverged=diverged,
        n_steps=stop,
    )


def _streams(seed):
    ss = np.random.SeedSequence(int(seed))
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def draw_delay_traces(cfg, seed=None):
    """Input and output delay traces for a run of ``cfg`` (shared across controllers)."""
    seed = cfg.seed if seed is None else seed
    rng_in, rng_out, _, _ = _streams(seed)
    b = cfg.bounds
    return (
        draw_trace(b.h1_I, b.h2_I, cfg.horizon, rng_in),
        draw_trace(b.h1_O, b.h2_O, cfg.horizon, rng_out),
    )


def make_controller(cfg, model, controller=None):
    kind = controller or cfg.controller
    if kind == "proposed":
        return PredictorObserver(
            model, cfg.gains(model), cfg.bounds, init=cfg.init,
            feedforward_in_history=cfg.feedforward_in_history,
        )
    if kind == "lqr":
        return StateFeedback(cfg.state_gain(model, "lqr"), model)
    raise ValueError(f"unknown controller {kind!r}")


def run_closed_loop(cfg, *, controller=None, seed=None, input_trace=None, output_trace=None):
    """Simulate ``cfg`` and return its :class:`SimulationLog`.

    Divergence (any state beyond 1e6 or non-finite) stops the integration and
    is flagged in ``log.meta``; it is never raised. The log keeps one record
    per horizon step: rows after divergence carry NaN signals and the delays
    of the trace.
    """
    seed = cfg.seed if seed is None else int(seed)
    kind = controller or cfg.controller
    model = cfg.model()
    n, m, p = model.n, model.m, model.p
    bounds = cfg.bounds
    H = int(cfg.horizon)
    _, _, rng_noise, rng_unc = _streams(seed)
    if input_trace is None or output_trace is None:
        drawn_in, drawn_out = draw_delay_traces(cfg, seed)
        input_trace = drawn_in if input_trace is None else input_trace
        output_trace = drawn_out if output_trace is None else output_trace
    if len(input_trace) < H or len(output_trace) < H:
        raise ValueError("delay traces shorter than the horizon")

    ref = cfg.reference(model)
    unc = cfg.uncertainty(model)
    truth = cfg.truth
    nl = NonlinearTruthParams(cfg.lateral_params, cfg.alpha_sat, cfg.substeps) if truth == "nonlinear" else None
    ctrl = make_controller(cfg, model, kind)
    ff_gain = curvature_feedforward_gain(model) if cfg.feedforward else np.zeros(m)
    noise_std = np.broadcast_to(np.asarray(cfg.noise_std, dtype=float), (p,))

    x = cfg.initial_state(model).copy()
    out_ch = DelayChannel(bounds.h1_O, bounds.h2_O, prefill=model.C @ x)
    in_ch = DelayChannel(bounds.h1_I, bounds.h2_I, prefill=np.zeros(m))
    out_ch.replay_trace(output_trace[:H])
    in_ch.replay_trace(input_trace[:H])

    rec = {
        "x": np.full((H, n), np.nan), "u_applied": np.full((H, m), np.nan),
        "u_computed": np.full((H, m), np.nan),
        "d_O": np.array(output_trace[:H], dtype=int), "d_I": np.array(input_trace[:H], dtype=int),
        "zhat": np.full((H, n), np.nan), "xpred": np.full((H, n), np.nan),
        "y_meas": np.full((H, p), np.nan),
    }
    d_I_hist = []

    def past_input_delays(k):
        # delay applied at step k + s, for the measured-input-delay variant
        return lambda s: d_I_hist[k + s] if k + s >= 0 else bounds.h1_I

    diverged_at = None
    for k in range(H):
        y_k = model.C @ x
        if np.any(noise_std > 0):
            y_k = y_k + noise_std * rng_noise.standard_normal(p)
        out_ch.push(k, y_k)
        meas = out_ch.sample_delayed(k)

        j = k + cfg.feedforward_preview
        ff = ff_gain * (ref.rho[j] if j < len(ref) else 0.0)
        oracle = past_input_delays(k) if cfg.prior_predictor else None
        u = np.asarray(ctrl.update(meas, k, ff, oracle), dtype=float).reshape(m)

        in_ch.push(k, u)
        applied = in_ch.sample_delayed(k)
        d_I_hist.append(in_ch.delays[-1])

        rec["x"][k] = x
        rec["u_applied"][k] = applied.value
        rec["u_computed"][k] = u
        rec["d_O"][k] = meas.age(k)
        rec["d_I"][k] = applied.age(k)
        rec["y_meas"][k] = meas.value
        if ctrl.last_z is not None:
            rec["zhat"][k] = ctrl.last_z
            rec["xpred"][k] = ctrl.last_prediction

        rho_k = ref.rho[k] if k < len(ref) else 0.0
        if nl is not None:
            x = step_nonlinear_truth(x, applied.value, rho_k, nl, model.T_c)
        else:
            x = step_linear_truth(model, x, applied.value, rho_k, unc, k, rng_unc)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_THRESHOLD:
            diverged_at = k + 1
            break

    ks = np.arange(H)
    rho = np.array([ref.rho[k] if k < len(ref) else 0.0 for k in ks])
    log = SimulationLog(
        k=ks,
        t=ks * model.T_c,
        rho=rho,
        meta={
            "seed": seed,
            "controller": kind,
            "config_hash": cfg.digest(),
            "diverged": diverged_at is not None,
            "diverged_at": diverged_at,
        },
        **rec,
    )
    return log


@dataclass
class BatchResult:
    """Per-controller trial metrics, box-plot summaries and the shared delay traces."""

    metrics: dict
    summary: dict
    seeds: list
    traces: list


_SUMMARY_FIELDS = ("mean_abs_lateral", "mean_abs_heading", "rms_lateral", "rms_heading")


def summarize(metrics):
    """Median and quartiles of each metric over trials (NaNs from empty runs ignored)."""
    out = {"n_trials": len(metrics), "n_diverged": int(sum(m.diverged for m in metrics))}
    for name in _SUMMARY_FIELDS:
        vals = np.array([getattr(m, name) for m in metrics], dtype=float)
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            out[name] = {k: float("nan") for k in ("min", "q1", "median", "q3", "max")}
            continue
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        out[name] = {
            "min": float(vals.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(vals.max()),
        }
    return out


def batch_runs(cfg, n_trials, *, controllers=None, seeds=None, traces=None):
    """Repeat ``cfg`` over independent seeds for each controller.

    All controllers in one trial share the same pre-drawn delay traces.
    ``traces`` (list of ``(input, output)``) replays previously exported ones.
    """
    n_trials = int(n_trials)
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    controllers = list(controllers or cfg.controllers)
    seeds = list(seeds) if seeds is not None else [cfg.seed + i for i in range(n_trials)]
    if len(seeds) != n_trials:
        raise ValueError("need one seed per trial")
    if traces is None:
        traces = [draw_delay_traces(cfg, s) for s in seeds]
    elif len(traces) != n_trials:
        raise ValueError("need one trace pair per trial")
    metrics = {c: [] for c in controllers}
    for seed, (tr_in, tr_out) in zip(seeds, traces):
        for c in controllers:
            log = run_closed_loop(cfg, controller=c, seed=seed, input_trace=tr_in, output_trace=tr_out)
            metrics[c].append(compute_metrics(log))
    summary = {c: summarize(ms) for c, ms in metrics.items()}
    return BatchResult(metrics=metrics, summary=summary, seeds=seeds, traces=list(traces))

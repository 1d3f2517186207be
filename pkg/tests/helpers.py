"""Shared fixtures for closed-loop oracle tests."""

import numpy as np

from delaynet.config import ScenarioConfig
from delaynet.predictor import artstein_oracle, history_length

# A maneuver starting far beyond any horizon keeps rho identically zero, so the
# plant is exactly the model the predictor assumes.
NO_MANEUVER = dict(start=1e9)


def exact_config(h_I, h_O, **kw):
    base = dict(
        truth="linear", input_delay=(h_I, h_I), output_delay=(h_O, h_O),
        x0=(0.01, -0.02, 0.05, 0.5), horizon=300, proposed_K="table2_lqr",
        observer_poles=(0.5, 0.55, 0.6, 0.65), init="zero", **NO_MANEUVER,
    )
    base.update(kw)
    return ScenarioConfig(**base)


def transformed_states(log, cfg):
    """Ground-truth Z(k) for every record, rebuilt from logged inputs."""
    bounds = cfg.bounds
    model = cfg.model()
    depth = history_length(bounds)
    u = np.asarray(log.u_computed)
    out = np.zeros_like(log.x)
    for k in range(len(log)):
        hist = np.zeros((depth, model.m))
        for j in range(1, depth + 1):
            if k - j >= 0:
                hist[j - 1] = u[k - j]
        out[k] = artstein_oracle(log.x[k], hist, bounds, model)
    return out

"""Scenario configuration: TOML document <-> :class:`ScenarioConfig`.

Sections and keys (all optional, defaults shown by ``ScenarioConfig()``)::

    seed, horizon
    [plant]       params = "table1" | "field_test" | {c_f = ..., ...}
                  matrices = {A, B, C, P_r}, speed   (alternative to params)
                  T_c, C, truth = "linear" | "nonlinear", alpha_sat, substeps, x0
    [uncertainty] gamma, E, H_A, H_B, gamma_tilde, E_tilde
    [delays]      input = [h1, h2], output = [h1, h2]
    [noise]       std = scalar or one entry per output
    [controller]  type, controllers, proposed_K, lqr_K, Q, R, K_coordinates,
                  L, observer_poles, init, feedforward, feedforward_preview,
                  feedforward_in_history, prior_predictor
    [reference]   shift, length, start
    [stability]   beta, grid, max_iter
"""

from dataclasses import asdict, dataclass, field, fields, replace
import hashlib
import json
from pathlib import Path

import numpy as np
from scipy.signal import place_poles

from .delays import DelayBounds
from .models import (
    FIELD_TEST_PARAMS,
    TABLE1_PARAMS,
    DiscreteLti,
    LateralParams,
    UncertaintyModel,
    lateral_model,
)
from .predictor import TABLE2_L, TABLE2_LQR_K, TABLE2_PROPOSED_K, Gains

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = ["ConfigError", "ScenarioConfig", "load_config", "config_from_dict"]


class ConfigError(ValueError):
    """Invalid or unreadable scenario configuration."""


_NAMED_PARAMS = {"table1": TABLE1_PARAMS, "field_test": FIELD_TEST_PARAMS}
_NAMED_K = {"table2_lqr": TABLE2_LQR_K, "table2_proposed": TABLE2_PROPOSED_K}
_CONTROLLERS = ("proposed", "lqr")


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    horizon: int = 600
    # plant
    params: object = "table1"
    matrices: dict = None
    speed: float = None
    T_c: float = 0.05
    C: object = None
    truth: str = "nonlinear"
    alpha_sat: float = 0.08
    substeps: int = 20
    x0: tuple = None
    # uncertainty
    gamma: float = 0.0
    E: object = None
    H_A: object = None
    H_B: object = None
    gamma_tilde: float = None
    E_tilde: object = None
    # delays
    input_delay: tuple = (3, 5)
    output_delay: tuple = (4, 7)
    # noise
    noise_std: object = 0.0
    # controller
    controller: str = "proposed"
    controllers: tuple = _CONTROLLERS
    proposed_K: object = "table2_proposed"
    lqr_K: object = "table2_lqr"
    Q: object = None
    R: object = None
    K_coordinates: str = "predicted"
    L: object = "table2"
    observer_poles: tuple = None
    init: str = "measurement"
    feedforward: bool = True
    feedforward_preview: int = 0
    feedforward_in_history: bool = False
    prior_predictor: bool = False
    # reference
    shift: float = 3.5
    length: float = 40.0
    start: float = 10.0
    # stability
    beta: float = 1.0
    grid: int = 1024
    max_iter: int = 2000
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        try:
            self._validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def _validate(self):
        if self.truth not in ("linear", "nonlinear"):
            raise ConfigError(f"truth must be 'linear' or 'nonlinear', got {self.truth!r}")
        if self.controller not in _CONTROLLERS:
            raise ConfigError(f"controller must be one of {_CONTROLLERS}, got {self.controller!r}")
        bad = [c for c in self.controllers if c not in _CONTROLLERS]
        if bad or not self.controllers:
            raise ConfigError(f"controllers must be a non-empty subset of {_CONTROLLERS}")
        if self.K_coordinates not in ("predicted", "transformed"):
            raise ConfigError("K_coordinates must be 'predicted' or 'transformed'")
        if self.init not in ("measurement", "zero"):
            raise ConfigError("init must be 'measurement' or 'zero'")
        if self.T_c <= 0:
            raise ConfigError("T_c must be positive")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if int(self.grid) < 8:
            raise ConfigError("grid must be >= 8")
        if self.feedforward_preview < 0:
            raise ConfigError("feedforward_preview must be >= 0")
        if self.truth == "nonlinear" and self.matrices is not None:
            raise ConfigError("the nonlinear truth model needs physical params, not raw matrices")
        if np.any(np.asarray(self.noise_std, dtype=float) < 0):
            raise ConfigError("noise std must be >= 0")
        b = self.bounds  # validates ordering
        if self.horizon <= b.h2_O + b.h2_I:
            raise ConfigError(
                f"horizon {self.horizon} must exceed h2_O + h2_I = {b.h2_O + b.h2_I}"
            )
        if self.x0 is not None and len(np.asarray(self.x0, float).reshape(-1)) != self.model().n:
            raise ConfigError("x0 length does not match the state dimension")

    # -- derived objects -------------------------------------------------

    @property
    def bounds(self):
        (h1_I, h2_I), (h1_O, h2_O) = self.input_delay, self.output_delay
        try:
            return DelayBounds(int(h1_I), int(h2_I), int(h1_O), int(h2_O))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def lateral_params(self):
        if self.matrices is not None:
            return None
        if isinstance(self.params, str):
            if self.params not in _NAMED_PARAMS:
                raise ConfigError(f"unknown params preset {self.params!r}")
            return _NAMED_PARAMS[self.params]
        if isinstance(self.params, LateralParams):
            return self.params
        try:
            return LateralParams(**dict(self.params))
        except TypeError as exc:
            raise ConfigError(f"bad plant params: {exc}") from exc

    @property
    def v(self):
        lp = self.lateral_params
        if lp is not None:
            return lp.v
        if self.speed is None:
            raise ConfigError("raw-matrix plants need plant.speed for the reference")
        return float(self.speed)

    def model(self):
        if "model" not in self._cache:
            C = None if self.C is None else np.asarray(self.C, dtype=float)
            if self.matrices is not None:
                mats = dict(self.matrices)
                missing = {"A", "B", "P_r"} - set(mats)
                if missing:
                    raise ConfigError(f"plant.matrices missing {sorted(missing)}")
                C = np.asarray(mats.get("C", C if C is not None else np.eye(len(mats["A"]))), float)
                model = DiscreteLti(
                    A=np.asarray(mats["A"], float), B=np.asarray(mats["B"], float),
                    C=C, P_r=np.asarray(mats["P_r"], float), T_c=self.T_c,
                )
            else:
                model = lateral_model(self.lateral_params, self.T_c, C)
            self._cache["model"] = model
        return self._cache["model"]

    def uncertainty(self, model=None):
        model = model or self.model()
        n, m = model.n, model.m
        E = np.eye(n) if self.E is None else self.E
        H_A = np.eye(np.asarray(E).shape[1]) if self.H_A is None else self.H_A
        H_B = np.zeros((np.asarray(H_A).shape[0], m)) if self.H_B is None else self.H_B
        return UncertaintyModel(
            gamma=self.gamma, E=E, H_A=H_A, H_B=H_B,
            gamma_tilde=self.gamma_tilde, E_tilde=self.E_tilde,
        )

    def state_gain(self, model=None, which="proposed"):
        """State-feedback gain ``u = K x`` for ``which`` in {proposed, lqr}."""
        from .simulation import dlqr

        model = model or self.model()
        spec = self.proposed_K if which == "proposed" else self.lqr_K
        if isinstance(spec, str):
            if spec == "dlqr":
                if self.Q is None or self.R is None:
                    raise ConfigError("K = 'dlqr' needs controller.Q and controller.R")
                return dlqr(model.A, model.B, self.Q, self.R)
            if spec not in _NAMED_K:
                raise ConfigError(f"unknown gain preset {spec!r}")
            K = _NAMED_K[spec]
        else:
            K = np.atleast_2d(np.asarray(spec, dtype=float))
        if K.shape != (model.m, model.n):
            raise ConfigError(f"gain shape {K.shape} does not match (m, n) = {(model.m, model.n)}")
        return K

    def observer_gain(self, model=None):
        model = model or self.model()
        if self.observer_poles is not None:
            poles = np.asarray(self.observer_poles, dtype=float)
            if len(poles) != model.n:
                raise ConfigError("observer_poles needs one pole per state")
            return place_poles(model.A.T, model.C.T, poles).gain_matrix.T
        if isinstance(self.L, str):
            if self.L != "table2":
                raise ConfigError(f"unknown observer gain preset {self.L!r}")
            L = TABLE2_L
        else:
            L = np.atleast_2d(np.asarray(self.L, dtype=float))
        if L.shape != (model.n, model.p):
            raise ConfigError(f"L shape {L.shape} does not match (n, p) = {(model.n, model.p)}")
        return L

    def gains(self, model=None):
        model = model or self.model()
        K = self.state_gain(model, "proposed")
        L = self.observer_gain(model)
        if self.K_coordinates == "predicted":
            return Gains.from_state_feedback(model, self.bounds, K, L)
        return Gains.build(model, self.bounds, K, L)

    def initial_state(self, model=None):
        model = model or self.model()
        if self.x0 is None:
            return np.zeros(model.n)
        return np.asarray(self.x0, dtype=float).reshape(model.n)

    def reference(self, model=None):
        from .simulation import gen_lane_change

        model = model or self.model()
        return gen_lane_change(
            self.shift, self.length, self.v, model.T_c, start_m=self.start, n_steps=self.horizon
        )

    # -- serialisation ---------------------------------------------------

    def to_dict(self):
        out = {}
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            val = getattr(self, f.name)
            if isinstance(val, LateralParams):
                val = asdict(val)
            elif isinstance(val, np.ndarray):
                val = val.tolist()
            elif isinstance(val, tuple):
                val = list(val)
            out[f.name] = val
        return out

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **kw):
        return replace(self, _cache={}, **kw)


# section -> {toml key: ScenarioConfig field}
_SCHEMA = {
    None: {"seed": "seed", "horizon": "horizon"},
    "plant": {
        "params": "params", "matrices": "matrices", "speed": "speed", "T_c": "T_c",
        "C": "C", "truth": "truth", "alpha_sat": "alpha_sat", "substeps": "substeps",
        "x0": "x0",
    },
    "uncertainty": {
        "gamma": "gamma", "E": "E", "H_A": "H_A", "H_B": "H_B",
        "gamma_tilde": "gamma_tilde", "E_tilde": "E_tilde",
    },
    "delays": {"input": "input_delay", "output": "output_delay"},
    "noise": {"std": "noise_std"},
    "controller": {
        "type": "controller", "controllers": "controllers", "proposed_K": "proposed_K",
        "lqr_K": "lqr_K", "Q": "Q", "R": "R", "K_coordinates": "K_coordinates", "L": "L",
        "observer_poles": "observer_poles", "init": "init", "feedforward": "feedforward",
        "feedforward_preview": "feedforward_preview",
        "feedforward_in_history": "feedforward_in_history", "prior_predictor": "prior_predictor",
    },
    "reference": {"shift": "shift", "length": "length", "start": "start"},
    "stability": {"beta": "beta", "grid": "grid", "max_iter": "max_iter"},
}

_TUPLE_FIELDS = {"x0", "input_delay", "output_delay", "controllers", "observer_poles"}


def config_from_dict(data):
    """Build a config from a parsed document, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    kwargs = {}
    for key, val in data.items():
        if key in _SCHEMA[None]:
            kwargs[_SCHEMA[None][key]] = val
            continue
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        if not isinstance(val, dict):
            raise ConfigError(f"[{key}] must be a table")
        for sub, sval in val.items():
            if sub not in _SCHEMA[key]:
                raise ConfigError(f"unknown key {key}.{sub}")
            kwargs[_SCHEMA[key][sub]] = sval
    for name in _TUPLE_FIELDS & kwargs.keys():
        kwargs[name] = tuple(kwargs[name])
    for name in ("input_delay", "output_delay"):
        if name in kwargs and len(kwargs[name]) != 2:
            raise ConfigError(f"{name} must be a pair [h1, h2]")
    try:
        return ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)

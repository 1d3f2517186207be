"""Command-line front end.

Exit codes:
  0  success (stability: certificate found)
  2  configuration or usage error
  3  numeric divergence during simulation (outputs are still written)
  4  stability search found no certificate
"""

import argparse
import csv
import json
import logging
import os
from pathlib import Path
import sys

import numpy as np

from .config import ConfigError, load_config
from .delays import dump_trace, load_trace
from .stability import build_all, mu_values, search_feasible_P

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INFEASIBLE = 0, 2, 3, 4

log = logging.getLogger("delaynet")

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    name = os.environ.get("DELAYNET_LOG_LEVEL", "warn").lower()
    level = _LEVELS.get(name)
    if level is None:
        raise ConfigError(f"DELAYNET_LOG_LEVEL must be one of {sorted(_LEVELS)}, got {name!r}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="delaynet",
        description="Simulate and verify predictor-observer control over delayed channels.",
        epilog="exit codes: 0 ok, 2 config error, 3 numeric divergence, 4 no stability certificate",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="scenario TOML file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        return p

    p = common(sub.add_parser("simulate", help="run one closed-loop scenario"))
    p.add_argument("--controller", choices=("proposed", "lqr"), default=None)

    p = common(sub.add_parser("batch", help="repeat a scenario over seeds for each controller"))
    p.add_argument("--controller", choices=("proposed", "lqr"), default=None,
                   help="restrict the batch to one controller")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--replay", type=Path, default=None,
                   help="directory of delay traces exported by an earlier batch")

    p = common(sub.add_parser("stability", help="search a Lyapunov certificate"))
    p.add_argument("--beta", type=float, default=None, help="decay rate in (0, 1]")
    p.add_argument("--grid", type=int, default=None, help="frequency grid for the norm bounds")

    p = common(sub.add_parser("norms", help="report the delay-operator norm bounds"))
    p.add_argument("--grid", type=int, default=None)
    return parser


def _load(args):
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "controller", None) is not None:
        over["controller"] = args.controller
    if getattr(args, "beta", None) is not None:
        over["beta"] = args.beta
    if getattr(args, "grid", None) is not None:
        over["grid"] = args.grid
    return cfg.with_overrides(**over) if over else cfg


def _out_dir(args):
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _emit(path):
    print(path)
    return path


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return _emit(path)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def cmd_simulate(args):
    from .simulation import compute_metrics, run_closed_loop

    cfg = _load(args)
    out = _out_dir(args)
    sim_log = run_closed_loop(cfg)
    metrics = compute_metrics(sim_log)
    sim_log.to_csv(_emit(out / "log.csv"))
    _write_json(out / "summary.json", {
        "controller": cfg.controller, "seed": cfg.seed, "config_hash": cfg.digest(),
        "diverged_at": sim_log.meta["diverged_at"], "metrics": metrics.as_dict(),
    })
    if metrics.diverged:
        log.error("simulation diverged at step %s", sim_log.meta["diverged_at"])
        return EXIT_DIVERGED
    return EXIT_OK


def _read_replay(directory, n_trials):
    traces = []
    for i in range(n_trials):
        tin, tout = directory / f"input_trial{i}.txt", directory / f"output_trial{i}.txt"
        if not (tin.is_file() and tout.is_file()):
            raise ConfigError(f"replay directory lacks traces for trial {i}")
        traces.append((load_trace(tin), load_trace(tout)))
    seeds_file = directory / "seeds.txt"
    seeds = load_trace(seeds_file)[:n_trials] if seeds_file.is_file() else None
    return traces, seeds


def cmd_batch(args):
    from .simulation import batch_runs

    cfg = _load(args)
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    out = _out_dir(args)
    controllers = [args.controller] if args.controller else list(cfg.controllers)
    traces = seeds = None
    if args.replay is not None:
        traces, seeds = _read_replay(args.replay, args.trials)
    try:
        result = batch_runs(cfg, args.trials, controllers=controllers, seeds=seeds, traces=traces)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    path = _emit(out / "metrics.csv")
    fields = ["controller", "trial", "seed", "mean_abs_lateral", "mean_abs_heading",
              "rms_lateral", "rms_heading", "diverged", "n_steps"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for c in controllers:
            for i, (seed, m) in enumerate(zip(result.seeds, result.metrics[c])):
                writer.writerow({"controller": c, "trial": i, "seed": seed, **m.as_dict()})
    _write_json(out / "summary.json", result.summary)

    tdir = out / "traces"
    tdir.mkdir(exist_ok=True)
    for i, (tin, tout) in enumerate(result.traces):
        _emit(dump_trace(tdir / f"input_trial{i}.txt", tin))
        _emit(dump_trace(tdir / f"output_trial{i}.txt", tout))
    _emit(dump_trace(tdir / "seeds.txt", result.seeds))
    return EXIT_OK


def _stability_inputs(cfg):
    model = cfg.model()
    return model, cfg.uncertainty(model), cfg.gains(model), cfg.bounds


def cmd_stability(args):
    cfg = _load(args)
    out = _out_dir(args)
    model, unc, gains, bounds = _stability_inputs(cfg)
    try:
        systems = build_all(model, unc, gains, bounds, n_grid=int(cfg.grid))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cert = search_feasible_P(systems, beta=cfg.beta, max_iter=int(cfg.max_iter))
    report = cert.to_dict()
    report["mu"] = {str(s.d_O): [float(v) for v in s.mu] for s in systems}
    if cert.feasible:
        _write_json(out / "certificate.json", report)
        return EXIT_OK
    _write_json(out / "infeasible.json", report)
    log.warning("no certificate found (best margin %.3g)", cert.margin)
    return EXIT_INFEASIBLE


def cmd_norms(args):
    cfg = _load(args)
    out = _out_dir(args)
    model, unc, _, bounds = _stability_inputs(cfg)
    try:
        table = {
            str(d): [float(v) for v in mu_values(model, unc, bounds, d, n_grid=int(cfg.grid))]
            for d in bounds.output_range()
        }
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _write_json(out / "norms.json", {"grid": int(cfg.grid), "mu": table})
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "batch": cmd_batch, "stability": cmd_stability, "norms": cmd_norms}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"delaynet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"delaynet: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``cle-ekf <subcommand> [flags]``.

Exit codes: 0 ok, 1 configuration error, 2 infeasible stability bound
(L_f >= 1), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import crn as crn_mod
from .csvio import read_json, read_table, write_json, write_table
from .errors import CleEkfError, ConfigError

SEED_ENV = "CLE_EKF_SEED"


def _resolve_seed(args, config: dict | None = None, default: int = 0) -> int:
    if args.seed is not None:
        return args.seed
    if config and config.get("seed") is not None:
        return int(config["seed"])
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer", field="seed") from None
    return default


def _require(doc: dict, key: str):
    if doc.get(key) is None:
        raise ConfigError(f"missing required key {key!r}", field=key)
    return doc[key]


def _measurement_model(doc: dict):
    from .sim import MeasurementModel

    m = _require(doc, "measurement")
    return MeasurementModel(np.asarray(_require(m, "C"), float), np.asarray(_require(m, "R"), float))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands --------------------------------------------------------------

def cmd_validate(args) -> int:
    net = crn_mod.load_model(args.model)
    doc = {
        "species": list(net.species),
        "reactions": net.m,
        "stoichiometry_norm": crn_mod.spectral_norm(net.V),
        "stoichiometry": net.V.astype(int).tolist(),
    }
    print(json.dumps(doc, indent=2))
    return 0


def cmd_simulate(args) -> int:
    from .plotting import plot_states
    from .sim import measure, simulate

    net = crn_mod.load_model(args.model)
    config = read_json(args.config) if args.config else {}
    delta = args.delta if args.delta is not None else float(_require(config, "delta"))
    steps = args.steps if args.steps is not None else int(_require(config, "steps"))
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}", field="steps")
    seed = _resolve_seed(args, config)
    x0 = np.asarray(_require(config, "x0"), float)
    traj = simulate(net, x0, delta, steps, seed)
    out = _out_dir(args)
    write_table(out / "trajectory.csv", ["t", *net.species], [traj.times, *traj.states.T])
    if config.get("measurement") is not None:
        series = measure(traj, _measurement_model(config), seed)
        p = series.values.shape[1]
        write_table(out / "measurements.csv", ["t", *[f"y{i + 1}" for i in range(p)]],
                    [series.times, *series.values.T])
    if args.plot:
        plot_states(traj.times, traj.states, net.species, out / "trajectory.svg")
    return 0


def cmd_filter(args) -> int:
    from . import ekf
    from .plotting import plot_states

    net = crn_mod.load_model(args.model)
    config_path = Path(args.config)
    config = read_json(config_path)
    model = _measurement_model(config)
    delta = args.delta if args.delta is not None else float(_require(config, "delta"))
    meas_path = Path(_require(config, "measurements"))
    if not meas_path.is_absolute():
        meas_path = config_path.parent / meas_path
    header, table = read_table(meas_path)
    if table.shape[1] != model.p + 1:
        raise ConfigError(f"{meas_path} has {table.shape[1] - 1} measurement columns, expected {model.p}",
                          field="measurements")
    ys = table[:, 1:]
    x0 = np.asarray(_require(config, "xhat0"), float)
    P0 = np.asarray(_require(config, "P0"), float)
    Q0 = config.get("Q0")
    records = ekf.run(net, ys, model, x0, P0, delta, Q0=None if Q0 is None else np.asarray(Q0, float),
                      jacobian=config.get("jacobian", "analytic"))

    out = _out_dir(args)
    n, p = net.n, model.p
    k = np.arange(1, len(records) + 1)
    xhat = np.array([r.posterior.mean for r in records]).reshape(-1, n)
    trace_P = np.array([np.trace(r.posterior.cov) for r in records])
    norm_P = np.array([np.linalg.eigvalsh(r.posterior.cov)[-1] for r in records])
    norm_Q = np.array([np.linalg.eigvalsh(r.Q)[-1] for r in records])
    innov = np.array([r.innovation for r in records]).reshape(-1, p)
    header = ["k", "t", *[f"xhat_{i + 1}" for i in range(n)], "trace_P", "norm_P", "norm_Q",
              *[f"innov_{i + 1}" for i in range(p)]]
    write_table(out / "filter.csv", header,
                [k, k * delta, *xhat.T, trace_P, norm_P, norm_Q, *innov.T], int_columns=1)
    if config.get("dump_records") and records:
        ekf.write_records(out / "records.bin", records, net.m)
    if args.plot and records:
        plot_states(k * delta, xhat, net.species, out / "filter.svg", ylabel="estimate")
    return 0


def _stability_params(args):
    from .stability import StabilityParams, estimate_bounds

    doc = read_json(args.params)
    if not isinstance(doc, dict):
        raise ConfigError("stability parameters must be a JSON object")
    doc = dict(doc)
    box = doc.pop("box", None)
    est_delta = doc.pop("delta", None)
    samples = int(doc.pop("samples", 1000))
    est_seed = int(doc.pop("seed", 0))
    estimated = []
    if box is not None:
        if args.model is None:
            raise ConfigError("a 'box' needs --model to estimate bounds from", field="box")
        if est_delta is None:
            raise ConfigError("a 'box' needs a 'delta' to estimate L_f", field="delta")
        est = estimate_bounds(crn_mod.load_model(args.model), box, float(est_delta), samples, est_seed)
        if doc.get("L_f") is None:
            for w in est.warnings:
                print(f"warning: {w}", file=sys.stderr)
        for name in est.estimated_fields + ("m",):
            if doc.get(name) is None:
                doc[name] = getattr(est, name)
                if name != "m":
                    estimated.append(name)
    return StabilityParams.from_dict(doc), estimated


def cmd_stability(args) -> int:
    from .stability import stability_report

    params, estimated = _stability_params(args)
    report = stability_report(params, estimated)
    doc = report.to_dict()
    print(json.dumps(doc, indent=2))
    if args.out:
        write_json(_out_dir(args) / "stability.json", doc)
    return 0


def cmd_experiment(args) -> int:
    from .harness import ExperimentConfig, run_experiment, write_outputs

    doc = read_json(args.config) if args.config else {}
    if not isinstance(doc, dict):
        raise ConfigError("experiment configuration must be a JSON object")
    doc = dict(doc)
    for flag in ("delta", "runs", "horizon"):
        if getattr(args, flag) is not None:
            doc[flag] = getattr(args, flag)
    if args.seed is not None or "seed" not in doc:
        doc["seed"] = _resolve_seed(args, None)
    if args.params:
        doc["stability"] = read_json(args.params)
    config = ExperimentConfig.from_dict(doc)
    metrics = run_experiment(config, jobs=args.jobs)
    for path in write_outputs(metrics, config, _out_dir(args), plot=args.plot):
        print(path)
    return 0


# -- parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (exit 1); 2 is reserved for L_f >= 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add(p, *names):
    options = {
        "model": dict(type=str, help="reaction network model file (JSON)"),
        "params": dict(type=str, help="stability parameter file (JSON)"),
        "config": dict(type=str, help="run configuration file (JSON)"),
        "delta": dict(type=float, help="time step in seconds; overrides the config"),
        "steps": dict(type=int, help="number of simulation steps; overrides the config"),
        "runs": dict(type=int, help="ensemble size; overrides the config"),
        "horizon": dict(type=float, help="simulated time span in seconds; overrides the config"),
        "seed": dict(type=int, help=f"random seed (falls back to ${SEED_ENV}, then 0)"),
        "out": dict(type=str, help="output directory"),
        "plot": dict(action="store_true", help="also write SVG plots"),
        "jobs": dict(type=int, default=os.cpu_count() or 1,
                     help="worker processes for ensemble batches (default: logical cores)"),
    }
    for name in names:
        p.add_argument(f"--{name}", **options[name])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="cle-ekf",
        description="EKF with CLE process noise: simulation, filtering and stability bounds.",
        epilog="exit codes: 0 ok, 1 configuration error, 2 L_f >= 1, 3 numerical failure",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a model file and print its summary")
    _add(p, "model")
    p.set_defaults(func=cmd_validate, required=("model",))

    p = sub.add_parser("simulate", help="Euler-Maruyama CLE trajectory and optional measurements")
    _add(p, "model", "config", "delta", "steps", "seed", "out", "plot")
    p.set_defaults(func=cmd_simulate, required=("model", "out"))

    p = sub.add_parser("filter", help="run the EKF over a measurement CSV")
    _add(p, "model", "config", "delta", "out", "plot")
    p.set_defaults(func=cmd_filter, required=("model", "config", "out"))

    p = sub.add_parser("stability", help="stability polynomial and maximum sampling period")
    _add(p, "params", "model", "out")
    p.set_defaults(func=cmd_stability, required=("params",))

    p = sub.add_parser("experiment", help="Monte Carlo gene-expression ensemble")
    _add(p, "config", "params", "delta", "runs", "horizon", "seed", "out", "plot", "jobs")
    p.set_defaults(func=cmd_experiment, required=("out",))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    missing = [name for name in args.required if getattr(args, name) is None]
    if missing:
        print(f"error: --{missing[0]} is required for '{args.command}'", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except CleEkfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

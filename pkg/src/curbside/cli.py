"""``curbside`` command line: synth, train, control and evaluate.

Exit codes: 0 success, 2 bad configuration, 3 bad or insufficient data,
4 solver did not converge.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import io
from .core import (
    ConvergenceError,
    DataError,
    InvalidParameterError,
    NoiseModel,
    SchemaError,
    TrafficState,
)
from .evaluation import EvalConfig, aggregate, empty_report, evaluate_campaign, hours_rows, ratio_rows
from .ingest import (
    ScenarioConfig,
    build_segment_features,
    extract_scenarios,
    load_csv,
    make_regression_dataset,
    to_time_series,
    write_csv,
)
from .mpc import MpcConfig, receding_horizon
from .plant import PlantStepper
from .synth import SynthConfig, synthesize
from .sysid import CalibrationError, FitConfig, calibrate_noise, evaluate, fit

log = logging.getLogger("curbside")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4


class ConfigError(InvalidParameterError):
    pass


def _pair(text: str) -> tuple[float, float]:
    parts = [p for p in str(text).split(",") if p.strip()]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _state(text: str) -> TrafficState:
    parts = [p for p in str(text).split(",") if p.strip()]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"expected df,ds,af,as, got {text!r}")
    return TrafficState(*(float(p) for p in parts))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curbside", description="Airport curbside congestion control toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, help="JSON object of option defaults")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic measurement campaign")
    p.add_argument("--days", type=int, default=SynthConfig.days)
    p.add_argument("--episodes", type=int, default=SynthConfig.episodes)
    p.add_argument("--message-rate", type=float, default=SynthConfig.message_rate)

    p = sub.add_parser("train", parents=[common], help="fit the dynamics model and noise bounds")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--rho", type=float, default=FitConfig.rho)
    p.add_argument("--max-iters", type=int, default=FitConfig.max_iters)
    p.add_argument("--abs-tol", type=float, default=FitConfig.abs_tol)
    p.add_argument("--rel-tol", type=float, default=FitConfig.rel_tol)
    p.add_argument("--admm-penalty", type=float, default=FitConfig.admm_penalty)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--low-pct", type=float, default=10)
    p.add_argument("--high-pct", type=float, default=90)

    mpc_opts = argparse.ArgumentParser(add_help=False)
    mpc_opts.add_argument("--model", type=Path, required=True)
    mpc_opts.add_argument("--noise", type=Path, help="noise-model JSON; zero noise when omitted")
    mpc_opts.add_argument("--horizon", type=int, default=MpcConfig.horizon_t)
    mpc_opts.add_argument("--exec-steps", type=int, default=MpcConfig.exec_steps)
    mpc_opts.add_argument("--gamma", type=float, default=MpcConfig.gamma)
    mpc_opts.add_argument("--ds-crit", type=float, default=MpcConfig.ds_crit)
    mpc_opts.add_argument("--as-crit", type=float, default=MpcConfig.as_crit)

    p = sub.add_parser("control", parents=[common, mpc_opts], help="one receding-horizon run")
    p.add_argument("--state", type=_state, help="start state df,ds,af,as")
    p.add_argument("--volumes", type=_pair, help="constant normalized volumes dv,av")
    p.add_argument("--data", type=Path, help="take start state and volumes from this CSV")
    p.add_argument("--index", type=int, default=0, help="start bin within the first feature segment")
    p.add_argument("--steps", type=int, default=MpcConfig.exec_steps)
    p.add_argument("--timings", action="store_true", help="include per-solve wall time in the trace")

    p = sub.add_parser("evaluate", parents=[common, mpc_opts], help="counterfactual campaign over extracted scenarios")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mc-runs", type=int, default=EvalConfig.mc_runs)
    p.add_argument("--bottleneck-km", type=_pair, default=(EvalConfig.bottleneck_km_low, EvalConfig.bottleneck_km_high))
    p.add_argument("--congested-threshold", type=float, default=ScenarioConfig.congested_threshold)
    p.add_argument("--normal-threshold", type=float, default=ScenarioConfig.normal_threshold)
    p.add_argument("--min-duration", type=int, default=ScenarioConfig.min_duration_bins)
    p.add_argument("--lookahead", type=int, default=ScenarioConfig.lookahead_bins)
    parser.set_defaults(_subparsers=dict(sub.choices))
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str], args: argparse.Namespace) -> argparse.Namespace:
    # config values replace defaults; flags given on the command line still win
    try:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    data.pop("schema_version", None)
    data = {k.replace("-", "_"): v for k, v in data.items()}
    unknown = sorted(set(data) - set(vars(args)) | (set(data) & {"config", "command", "_subparsers"}))
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    subparser = args._subparsers[args.command]
    for action in subparser._actions:
        if action.dest in data and action.type in (int, float, _pair, _state) and data[action.dest] is not None:
            value = data[action.dest]
            try:
                data[action.dest] = action.type(",".join(map(str, value)) if isinstance(value, list) else value)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"config key {action.dest}: {exc}") from exc
    subparser.set_defaults(**data)
    return parser.parse_args(argv)


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.config is not None:
        args = _apply_config_file(parser, argv, args)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    return args


def _mpc_config(args: argparse.Namespace) -> MpcConfig:
    return MpcConfig(
        horizon_t=args.horizon,
        exec_steps=args.exec_steps,
        ds_crit=args.ds_crit,
        as_crit=args.as_crit,
        gamma=args.gamma,
    )


def _noise(args: argparse.Namespace) -> NoiseModel:
    if args.noise is None:
        return NoiseModel.zero(args.seed)
    return replace(io.load_noise(args.noise), seed=args.seed)


def _load_records(path: Path):
    if not Path(path).exists():
        raise DataError(f"data file not found: {path}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        records = load_csv(path)
    for w in caught:
        log.warning("%s", w.message)
    return records


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise DataError(f"{what} not found: {path}")
    return path


def cmd_synth(args: argparse.Namespace) -> int:
    config = SynthConfig(days=args.days, episodes=args.episodes, seed=args.seed, message_rate=args.message_rate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    campaign = synthesize(config)
    write_csv(out / "dataset.csv", campaign.records)
    io.save_model(out / "truth_model.json", campaign.model)
    io.save_noise(out / "truth_noise.json", campaign.noise)
    io.write_json(out / "injections.json", "injections", {"seed": args.seed, "injections": campaign.injections})
    log.info("wrote %d records and %d injected episodes to %s", len(campaign.records), len(campaign.injections), out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = FitConfig(
        rho=args.rho,
        max_iters=args.max_iters,
        abs_tol=args.abs_tol,
        rel_tol=args.rel_tol,
        admm_penalty=args.admm_penalty,
    )
    if not 0.0 < args.train_fraction <= 1.0:
        raise ConfigError("--train-fraction must lie in (0, 1]")
    if not 1 <= args.low_pct < args.high_pct <= 99:
        raise ConfigError("percentiles need 1 <= low < high <= 99")
    _require(args.data, "data file")
    records = _load_records(args.data)
    features = build_segment_features(records)
    train, validation = make_regression_dataset(records, features, args.train_fraction, args.seed)
    model = fit(train, config)
    if len(validation) == 0:
        raise DataError("no validation transitions left to calibrate noise; lower --train-fraction")
    report = evaluate(model, validation)
    model = replace(model, fit_report=report)
    noise = calibrate_noise(report, args.low_pct, args.high_pct, args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_model(out / "model.json", model)
    io.save_noise(out / "noise.json", noise)
    io.write_json(
        out / "fit_report.json",
        "fit_report",
        {"n_train": len(train), "n_validation": len(validation), "report": report.to_dict()},
    )
    log.info("fit converged in %d iterations; validation MAE %s", report.iterations, report.mae)
    return EXIT_OK


def cmd_control(args: argparse.Namespace) -> int:
    mpc = _mpc_config(args)
    if args.steps < 1:
        raise ConfigError("--steps must be at least 1")
    if args.data is None and (args.state is None or args.volumes is None):
        raise ConfigError("give --state and --volumes, or --data")
    model = io.load_model(_require(args.model, "model file"))
    noise = _noise(args)

    if args.data is not None:
        records = _load_records(args.data)
        series = to_time_series(records, build_segment_features(records), model.volume_scale)[0]
        if not 0 <= args.index < len(series):
            raise DataError(f"--index {args.index} outside the series of {len(series)} bins")
        state = args.state or series.states[args.index]
        forecast = tuple((u.dv, u.av) for u in series.inputs[args.index :])
    else:
        state = args.state
        forecast = (args.volumes,)

    trace = receding_horizon(state, model, PlantStepper(model, noise), replace(mpc, exo_forecast=forecast), args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_trace(out / "trace.json", trace, timings=args.timings)
    log.info("actions %s", trace.actions)
    return EXIT_OK


RATIO_COLUMNS = ("congested", "step", "n", "treated_mean", "treated_se", "untreated_mean", "untreated_se")
HOURS_COLUMNS = ("label", "congested", "veh_hours_low", "veh_hours_high")


def cmd_evaluate(args: argparse.Namespace) -> int:
    mpc = _mpc_config(args)
    low, high = args.bottleneck_km
    eval_config = EvalConfig(bottleneck_km_low=low, bottleneck_km_high=high, mc_runs=args.mc_runs, exec_steps=mpc.exec_steps)
    scenario_config = ScenarioConfig(
        congested_threshold=args.congested_threshold,
        normal_threshold=args.normal_threshold,
        min_duration_bins=args.min_duration,
        ds_crit=mpc.ds_crit,
        as_crit=mpc.as_crit,
        lookahead_bins=args.lookahead,
    )
    model = io.load_model(_require(args.model, "model file"))
    noise = _noise(args)
    _require(args.data, "data file")
    records = _load_records(args.data)
    features = build_segment_features(records)
    scenarios, skipped = [], 0
    for series in to_time_series(records, features, model.volume_scale):
        for scenario in extract_scenarios(series, scenario_config):
            if len(scenario.history) < eval_config.exec_steps + 1:
                skipped += 1
                continue
            scenarios.append(scenario)
    if skipped:
        log.warning("skipped %d scenarios too close to the end of their segment", skipped)

    results = evaluate_campaign(scenarios, model, noise, eval_config, mpc, seed=args.seed, jobs=args.jobs)
    report = aggregate(results) if results else empty_report()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_scenarios(out / "scenarios.json", scenarios)
    extra = {
        "seed": args.seed,
        "skipped_scenarios": skipped,
        "config": {
            "mpc": {"horizon_t": mpc.horizon_t, "exec_steps": mpc.exec_steps, "gamma": mpc.gamma,
                    "ds_crit": mpc.ds_crit, "as_crit": mpc.as_crit},
            "eval": {"bottleneck_km": [low, high], "mc_runs": eval_config.mc_runs,
                     "idle_fuel_gal_per_hr": eval_config.idle_fuel_gal_per_hr,
                     "idle_co2_g_per_hr": eval_config.idle_co2_g_per_hr},
            "noise": io.noise_bounds(noise),
        },
    }
    io.save_report(out / "report.json", report, extra)
    io.write_rows(out / "speed_ratio_by_step.csv", ratio_rows(report), RATIO_COLUMNS)
    io.write_rows(out / "veh_hours_distribution.csv", hours_rows(report), HOURS_COLUMNS)
    log.info("evaluated %d scenarios", report.n_scenarios)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "control": cmd_control, "evaluate": cmd_evaluate}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        # argparse reports usage errors with status 2 already
        return int(exc.code or 0)
    except InvalidParameterError as exc:
        print(f"curbside: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except CalibrationError as exc:
        print(f"curbside: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidParameterError as exc:
        print(f"curbside: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError, OSError) as exc:
        print(f"curbside: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceError as exc:
        print(f"curbside: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())

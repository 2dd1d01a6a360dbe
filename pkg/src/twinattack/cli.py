"""Command-line interface.

Subcommands cover the pipeline of the experiment runner piecewise (generate,
train, calibrate, detect, attack, evaluate) plus run-all for the whole thing.
Every subcommand takes --config (YAML, documented in the README) and --seed
to override the config's master seed.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from . import attacks as atk
from . import detector as det
from . import harness
from . import model as mdl
from . import telemetry as tel
from .backend import backend_name
from .errors import ConfigError, DataError, DivergenceError, StageError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


def _load(args) -> harness.ExperimentConfig:
    if args.config:
        config = harness.load_config(args.config)
    else:
        raise ConfigError("--config is required")
    if args.seed is not None:
        from dataclasses import replace
        config = replace(config, master_seed=args.seed)
    return config


def cmd_generate(args) -> int:
    config = _load(args)
    seed = (args.sequence_seed if args.sequence_seed is not None
            else harness.child_seed(config.master_seed, "train_series"))
    series = tel.generate_series(tel.default_schema(), args.length or config.train_length,
                                 config.dt, seed)
    if args.fault_channel:
        series = tel.inject_fault(series, tel.FaultSpec(
            args.fault_kind, args.fault_channel, args.fault_start, args.fault_end,
            args.fault_magnitude))
    tel.write_csv(series, args.out)
    print(f"wrote {len(series)} rows to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load(args)
    params, _calib, history, _tws, _vws = harness.fit_pipeline(config)
    mdl.save_model(params, args.out)
    print(f"trained {sum(e for e, _ in config.phases)} epochs "
          f"(final train MSE {history['train_mse'][-1]:.6g}); model -> {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    config = _load(args)
    params, calib, _history, _tws, _vws = harness.fit_pipeline(config)
    mdl.save_model(params, args.out, calibration=calib)
    print(f"calibrated: tau={calib.tau:.4f} (q={config.quantile}) -> {args.out}")
    return EXIT_OK


def _load_artifact_with_calib(path):
    params, calib = mdl.load_artifact(path)
    if calib is None:
        raise DataError(f"{path} has no calibration section; run `calibrate` first")
    return params, calib


def cmd_detect(args) -> int:
    params, calib = _load_artifact_with_calib(args.model)
    series = tel.read_csv(args.data)
    verdict = det.score_sequence(params, calib, series)
    result = {"verdict": verdict.label, "score": verdict.score, "tau": verdict.tau,
              "window_distances": list(verdict.per_window_distances)}
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_attack(args) -> int:
    params, calib = _load_artifact_with_calib(args.model)
    series = tel.read_csv(args.data)
    scenario = tel.SCENARIO1 if args.channels is None else tel.ScenarioSpec(
        "cli", tuple(args.channels.split(",")))
    if args.type == "noise":
        spec = atk.NoiseAttackSpec(scenario, args.scale, args.seed or 0,
                                   round_integer_channels=args.round_integer_channels)
        perturbed, outcome = atk.noise_attack(params, calib, series, spec,
                                              direction=args.direction)
    else:
        spec = atk.FgsmAttackSpec(scenario, args.epsilon, args.direction, args.iterations,
                                  round_integer_channels=args.round_integer_channels)
        perturbed, outcome = atk.fgsm_attack(params, calib, series, spec)
    if args.out:
        tel.write_csv(perturbed, args.out)
    print(json.dumps({
        "original_verdict": outcome.original_verdict,
        "attacked_verdict": outcome.attacked_verdict,
        "original_score": outcome.original_score,
        "attacked_score": outcome.attacked_score,
        "success": outcome.success,
        "perturbation_norms": outcome.perturbation_norms,
    }, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load(args)
    result = harness.run_experiment(config)
    detector = result.report["detector"]
    print(json.dumps({"true_positive_rate": detector["true_positive_rate"],
                      "false_positive_rate": detector["false_positive_rate"],
                      "tau": detector["tau"]}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run_all(args) -> int:
    config = _load(args)
    result = harness.run_experiment(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.emit_report(result.report, out / "report.json", "json")
    harness.emit_report(result.report, out / "tables", "csv-tables")
    mdl.save_model(result.params, out / "model.npz", calibration=result.calibration)
    detector = result.report["detector"]
    print(f"backend: {backend_name()}")
    print(f"tau={detector['tau']:.4f}  TPR={detector['true_positive_rate']:.3f}  "
          f"FPR={detector['false_positive_rate']:.3f}")
    for a in result.report["attacks"]:
        print(f"attack {a['name']}: best success rate {a['best_success_rate']:.3f}")
    print(f"report -> {out / 'report.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twinattack", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"twinattack {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config's master_seed")

    sp = sub.add_parser("generate", help="generate a telemetry CSV")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--length", type=int, default=None)
    sp.add_argument("--sequence-seed", type=int, default=None)
    sp.add_argument("--fault-channel", default=None)
    sp.add_argument("--fault-kind", default="offset",
                    choices=["offset", "drift", "stuck", "scale"])
    sp.add_argument("--fault-start", type=int, default=0)
    sp.add_argument("--fault-end", type=int, default=0)
    sp.add_argument("--fault-magnitude", type=float, default=4.0)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train the twin, write the model artifact")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("calibrate", help="train + calibrate, write artifact with detector")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("detect", help="score a telemetry CSV against an artifact")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("attack", help="perturb a telemetry CSV")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--type", choices=["noise", "fgsm"], default="noise")
    sp.add_argument("--direction", choices=[atk.TRIGGER, atk.EVADE], default=atk.TRIGGER)
    sp.add_argument("--scale", type=float, default=1.0, help="noise: k multiplier")
    sp.add_argument("--epsilon", type=float, default=0.1, help="fgsm: budget")
    sp.add_argument("--iterations", type=int, default=1)
    sp.add_argument("--channels", default=None,
                    help="comma-separated channels (default: the scenario1 triple)")
    sp.add_argument("--round-integer-channels", action="store_true",
                    help="round the gear channel after perturbing")
    sp.add_argument("--out", default=None, help="write the perturbed CSV here")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("evaluate", help="run the pipeline, print detector metrics")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("run-all", help="full experiment: report + tables + artifact")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_run_all)
    return p


def _exit_code(err: Exception) -> int:
    if isinstance(err, StageError):
        return _exit_code(err.cause) if isinstance(err.cause, Exception) else 1
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(err, DataError):
        return EXIT_DATA
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, DivergenceError, StageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _exit_code(e)


if __name__ == "__main__":
    sys.exit(main())

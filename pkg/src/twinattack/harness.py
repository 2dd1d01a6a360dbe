"""End-to-end experiment runner: generate -> split -> normalize -> window ->
train -> calibrate -> evaluate -> attack -> report.

Everything is driven by one ExperimentConfig with an explicit master seed;
per-stage and per-sequence RNG streams are derived from it, so a config
fingerprint pins the entire report (modulo the created_at timestamp)."""

from __future__ import annotations

import csv
import datetime
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import attacks as atk
from . import detector as det
from . import model as mdl
from . import preprocess as pre
from . import telemetry as tel
from .errors import ConfigError, DataError, StageError

CONFIG_FORMAT_VERSION = 1
REPORT_SCHEMA_VERSION = 1

# independent RNG streams derived from the master seed
_STREAMS = {"train_series": 0, "model_init": 1, "train_shuffle": 2,
            "clean_eval": 3, "anomalous_eval": 4, "attack_pool": 5,
            "attack_noise": 6}


def child_seed(master: int, stream: str, *index: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(_STREAMS[stream], *index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FaultConfig:
    """One fault template, applied to each listed channel over the range."""
    kind: str
    channels: tuple[str, ...]
    start_index: int
    end_index: int
    magnitude: float

    def to_dict(self) -> dict:
        return {"kind": self.kind, "channels": list(self.channels),
                "start_index": self.start_index, "end_index": self.end_index,
                "magnitude": self.magnitude}


@dataclass(frozen=True)
class AttackEntry:
    name: str
    type: str                      # noise | fgsm
    scenario: tuple[str, ...]      # channels the attacker may touch
    direction: str = atk.TRIGGER
    target_set: str = "clean"      # clean | anomalous
    scale: float = 1.0             # noise only
    epsilons: tuple[float, ...] = ()   # fgsm only
    iterations: int = 1            # fgsm only
    pool_fault: FaultConfig | None = None  # build a dedicated pool instead
    pool_size: int | None = None
    detected_only: bool = False    # keep only sequences the detector flags
    min_pool: int = 1
    take: int | None = None        # cap the pool after filtering

    def to_dict(self) -> dict:
        d = {"name": self.name, "type": self.type, "scenario": list(self.scenario),
             "direction": self.direction, "target_set": self.target_set,
             "detected_only": self.detected_only, "min_pool": self.min_pool}
        if self.type == "noise":
            d["scale"] = self.scale
        else:
            d["epsilons"] = list(self.epsilons)
            d["iterations"] = self.iterations
        if self.pool_fault is not None:
            d["pool_fault"] = self.pool_fault.to_dict()
        if self.pool_size is not None:
            d["pool_size"] = self.pool_size
        if self.take is not None:
            d["take"] = self.take
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int
    train_length: int = 30000
    dt: float = 0.5
    train_frac: float = 0.6
    val_frac: float = 0.2
    window_length: int = 12
    train_stride: int = 1
    hidden_dims: tuple[int, ...] = (96, 48)
    # training runs one phase per (epochs, learning_rate) pair
    phases: tuple[tuple[int, float], ...] = ((60, 1.5e-3), (40, 3e-4), (30, 1e-4))
    batch_size: int = 128
    optimizer: str = "adam"
    quantile: float = 0.99
    ridge: float | None = None
    eval_length: int = 40
    n_clean: int = 100
    n_anomalous: int = 0
    eval_fault: FaultConfig | None = None
    attacks: tuple[AttackEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "phases",
                           tuple((int(e), float(lr)) for e, lr in self.phases))
        if not self.phases:
            raise ConfigError("at least one training phase is required")
        if self.n_anomalous > 0 and self.eval_fault is None:
            raise ConfigError("n_anomalous > 0 requires an eval_fault")
        schema = tel.default_schema()
        for fc in filter(None, [self.eval_fault] + [a.pool_fault for a in self.attacks]):
            for ch in fc.channels:
                if ch not in schema.names:
                    raise ConfigError(f"fault references unknown channel {ch!r}")
        for a in self.attacks:
            for ch in a.scenario:
                if ch not in schema.names:
                    raise ConfigError(f"attack {a.name!r}: unknown channel {ch!r}")
            if a.type not in ("noise", "fgsm"):
                raise ConfigError(f"attack {a.name!r}: unknown type {a.type!r}")
            if a.type == "fgsm" and not a.epsilons:
                raise ConfigError(f"attack {a.name!r}: fgsm needs epsilons")
            if a.target_set not in ("clean", "anomalous"):
                raise ConfigError(f"attack {a.name!r}: bad target_set {a.target_set!r}")

    def to_dict(self) -> dict:
        return {
            "format_version": CONFIG_FORMAT_VERSION,
            "master_seed": self.master_seed,
            "data": {"train_length": self.train_length, "dt": self.dt,
                     "train_frac": self.train_frac, "val_frac": self.val_frac},
            "windows": {"length": self.window_length, "train_stride": self.train_stride},
            "model": {"hidden_dims": list(self.hidden_dims),
                      "phases": [[e, lr] for e, lr in self.phases],
                      "batch_size": self.batch_size, "optimizer": self.optimizer},
            "calibration": {"quantile": self.quantile, "ridge": self.ridge},
            "evaluation": {"sequence_length": self.eval_length,
                           "n_clean": self.n_clean, "n_anomalous": self.n_anomalous,
                           "fault": self.eval_fault.to_dict() if self.eval_fault else None},
            "attacks": [a.to_dict() for a in self.attacks],
        }


def _require_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _fault_from_dict(d: dict, where: str) -> FaultConfig:
    _require_keys(d, {"kind", "channels", "start_index", "end_index", "magnitude"}, where)
    try:
        return FaultConfig(d["kind"], tuple(d["channels"]), int(d["start_index"]),
                           int(d["end_index"]), float(d.get("magnitude", 1.0)))
    except KeyError as e:
        raise ConfigError(f"{where}: missing key {e}") from None


def _scenario_channels(value) -> tuple[str, ...]:
    if value == tel.SCENARIO1.name:
        return tel.SCENARIO1.channels
    if isinstance(value, str):
        raise ConfigError(f"unknown scenario name {value!r}")
    return tuple(value)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Parse/validate the documented config mapping (see README)."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _require_keys(raw, {"format_version", "master_seed", "data", "windows", "model",
                        "calibration", "evaluation", "attacks"}, "config")
    version = raw.get("format_version")
    if version != CONFIG_FORMAT_VERSION:
        raise ConfigError(
            f"config format_version {version!r} unsupported (expected {CONFIG_FORMAT_VERSION})")
    if "master_seed" not in raw:
        raise ConfigError("config must state master_seed explicitly")
    try:
        data = raw.get("data", {})
        _require_keys(data, {"train_length", "dt", "train_frac", "val_frac"}, "data")
        win = raw.get("windows", {})
        _require_keys(win, {"length", "train_stride"}, "windows")
        mod = raw.get("model", {})
        _require_keys(mod, {"hidden_dims", "phases", "epochs", "batch_size",
                            "learning_rate", "optimizer"}, "model")
        cal = raw.get("calibration", {})
        _require_keys(cal, {"quantile", "ridge"}, "calibration")
        ev = raw.get("evaluation", {})
        _require_keys(ev, {"sequence_length", "n_clean", "n_anomalous", "fault"}, "evaluation")
        entries = []
        for i, a in enumerate(raw.get("attacks", []) or []):
            where = f"attacks[{i}]"
            _require_keys(a, {"name", "type", "scenario", "direction", "target_set",
                              "scale", "epsilons", "iterations", "pool_fault",
                              "pool_size", "detected_only", "min_pool", "take"}, where)
            entries.append(AttackEntry(
                name=a.get("name", f"attack{i}"),
                type=a["type"],
                scenario=_scenario_channels(a.get("scenario", tel.SCENARIO1.name)),
                direction=a.get("direction", atk.TRIGGER),
                target_set=a.get("target_set", "clean"),
                scale=float(a.get("scale", 1.0)),
                epsilons=tuple(float(e) for e in a.get("epsilons", [])),
                iterations=int(a.get("iterations", 1)),
                pool_fault=(_fault_from_dict(a["pool_fault"], where + ".pool_fault")
                            if a.get("pool_fault") else None),
                pool_size=(int(a["pool_size"]) if a.get("pool_size") is not None else None),
                detected_only=bool(a.get("detected_only", False)),
                min_pool=int(a.get("min_pool", 1)),
                take=(int(a["take"]) if a.get("take") is not None else None),
            ))
        fault = ev.get("fault")
        default = ExperimentConfig(master_seed=0)
        if "phases" in mod:
            phases = tuple((int(e), float(lr)) for e, lr in mod["phases"])
        elif "epochs" in mod or "learning_rate" in mod:
            phases = ((int(mod.get("epochs", 30)), float(mod.get("learning_rate", 1e-3))),)
        else:
            phases = default.phases
        return ExperimentConfig(
            master_seed=int(raw["master_seed"]),
            train_length=int(data.get("train_length", default.train_length)),
            dt=float(data.get("dt", default.dt)),
            train_frac=float(data.get("train_frac", default.train_frac)),
            val_frac=float(data.get("val_frac", default.val_frac)),
            window_length=int(win.get("length", default.window_length)),
            train_stride=int(win.get("train_stride", default.train_stride)),
            hidden_dims=tuple(int(h) for h in mod.get("hidden_dims", default.hidden_dims)),
            phases=phases,
            batch_size=int(mod.get("batch_size", default.batch_size)),
            optimizer=str(mod.get("optimizer", default.optimizer)),
            quantile=float(cal.get("quantile", default.quantile)),
            ridge=(float(cal["ridge"]) if cal.get("ridge") is not None else None),
            eval_length=int(ev.get("sequence_length", default.eval_length)),
            n_clean=int(ev.get("n_clean", default.n_clean)),
            n_anomalous=int(ev.get("n_anomalous", default.n_anomalous)),
            eval_fault=_fault_from_dict(fault, "evaluation.fault") if fault else None,
            attacks=tuple(entries),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config value: {e}") from e


def load_config(path: str | Path) -> ExperimentConfig:
    import yaml
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    return config_from_dict(raw)


def config_fingerprint(config: ExperimentConfig | dict) -> str:
    d = config.to_dict() if isinstance(config, ExperimentConfig) else config
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def sequence_truth(series: tel.TelemetrySeries) -> str:
    return tel.ANOMALY if tel.ANOMALY in series.labels else tel.NORMAL


def evaluate_detector(params: mdl.ModelParams, calib: det.DetectorCalibration,
                      sequences) -> dict:
    """Score ground-truth-labeled sequences and compute TPR/FPR.

    A sequence is truly anomalous when any row is labelled ANOMALY. Returns
    per-sequence records plus the two rates (a class absent from the input
    yields rate 0.0)."""
    sequences = list(sequences)
    if not sequences:
        raise DataError("evaluate_detector needs at least one sequence")
    records = []
    for i, seq in enumerate(sequences):
        verdict = det.score_sequence(params, calib, seq)
        records.append({
            "index": i,
            "truth": sequence_truth(seq),
            "verdict": verdict.label,
            "score": verdict.score,
            "window_distances": list(verdict.per_window_distances),
        })
    pos = [r for r in records if r["truth"] == tel.ANOMALY]
    neg = [r for r in records if r["truth"] == tel.NORMAL]
    tpr = (sum(r["verdict"] == tel.ANOMALY for r in pos) / len(pos)) if pos else 0.0
    fpr = (sum(r["verdict"] == tel.ANOMALY for r in neg) / len(neg)) if neg else 0.0
    return {"true_positive_rate": tpr, "false_positive_rate": fpr,
            "sequences": records}


def evaluate_attack(outcomes) -> dict:
    """Summarize AttackOutcomes: success rate, score-shift stats, and the
    mean L-infinity perturbation per channel (raw and normalized units)."""
    outcomes = list(outcomes)
    if not outcomes:
        raise DataError("evaluate_attack needs at least one outcome")
    shifts = [o.score_shift() for o in outcomes]
    channels = sorted({ch for o in outcomes for ch in o.perturbation_norms})
    mean_linf_raw = {ch: float(np.mean([o.perturbation_norms[ch]["linf_raw"]
                                        for o in outcomes if ch in o.perturbation_norms]))
                     for ch in channels}
    mean_linf_norm = {ch: float(np.mean([o.perturbation_norms[ch].get("linf_norm", 0.0)
                                         for o in outcomes if ch in o.perturbation_norms]))
                      for ch in channels}
    return {
        "success_rate": float(np.mean([o.success for o in outcomes])),
        "mean_score_shift": float(np.mean(shifts)),
        "median_score_shift": float(np.median(shifts)),
        "median_original_score": float(np.median([o.original_score for o in outcomes])),
        "median_attacked_score": float(np.median([o.attacked_score for o in outcomes])),
        "mean_linf_raw_per_channel": mean_linf_raw,
        "mean_linf_norm_per_channel": mean_linf_norm,
    }


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    """run_experiment's full output: the report plus in-memory artifacts."""
    report: dict
    params: mdl.ModelParams
    calibration: det.DetectorCalibration
    clean_sequences: list
    anomalous_sequences: list


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, exc) from exc
            return False
    return _Ctx()


def _outcome_dict(index: int, o: atk.AttackOutcome) -> dict:
    linf_norm = max((v.get("linf_norm", 0.0) for v in o.perturbation_norms.values()),
                    default=0.0)
    return {"index": index,
            "original_verdict": o.original_verdict,
            "attacked_verdict": o.attacked_verdict,
            "original_score": o.original_score,
            "attacked_score": o.attacked_score,
            "success": o.success,
            "linf_norm_max": linf_norm}


def _attack_pool(entry: AttackEntry, attack_idx: int, config: ExperimentConfig,
                 params, calib, clean_seqs, anom_seqs) -> list:
    schema = tel.default_schema()
    if entry.pool_fault is not None:
        size = entry.pool_size or config.n_anomalous
        pool = []
        for i in range(size):
            seq = tel.generate_series(schema, config.eval_length, config.dt,
                                      child_seed(config.master_seed, "attack_pool",
                                                 attack_idx, i))
            for ch in entry.pool_fault.channels:
                seq = tel.inject_fault(seq, tel.FaultSpec(
                    entry.pool_fault.kind, ch, entry.pool_fault.start_index,
                    entry.pool_fault.end_index, entry.pool_fault.magnitude))
            pool.append(seq)
    else:
        pool = list(clean_seqs if entry.target_set == "clean" else anom_seqs)
        if entry.pool_size is not None:
            pool = pool[:entry.pool_size]
    if entry.detected_only:
        pool = [s for s in pool
                if det.score_sequence(params, calib, s).label == tel.ANOMALY]
    if len(pool) < entry.min_pool:
        raise DataError(
            f"attack {entry.name!r}: pool has {len(pool)} sequences after "
            f"filtering, need at least {entry.min_pool}")
    if entry.take is not None:
        pool = pool[:entry.take]
    return pool


def fit_pipeline(config: ExperimentConfig):
    """The generate/split/normalize/window/train/calibrate front of the
    pipeline. Returns (params, calib, history, train_ws, val_ws)."""
    schema = tel.default_schema()
    master = config.master_seed

    with _stage("generate"):
        main = tel.generate_series(schema, config.train_length, config.dt,
                                   child_seed(master, "train_series"))
    with _stage("split"):
        train_s, val_s, _test_s = pre.split(main, config.train_frac, config.val_frac)
    with _stage("normalize"):
        stats = pre.fit_norm_stats(train_s)
        z_train = pre.normalize(train_s, stats)
        z_val = pre.normalize(val_s, stats)
    with _stage("window"):
        train_ws = pre.make_windows(z_train, config.window_length, config.train_stride)
        val_ws = pre.make_windows(z_val, config.window_length, 1)
    with _stage("train"):
        layout = mdl.ModelLayout(config.window_length * len(schema.channels),
                                 config.hidden_dims, len(schema.channels))
        params = mdl.init_params(layout, child_seed(master, "model_init"), stats)
        history = {"train_mse": [], "val_mse": []}
        for pi, (epochs, lr) in enumerate(config.phases):
            train_cfg = mdl.TrainConfig(epochs=epochs, batch_size=config.batch_size,
                                        learning_rate=lr, optimizer=config.optimizer,
                                        seed=child_seed(master, "train_shuffle", pi))
            params, h = mdl.train(params, train_ws, val_ws, train_cfg)
            history["train_mse"].extend(h["train_mse"])
            history["val_mse"].extend(h["val_mse"])
    with _stage("calibrate"):
        calib = det.fit_calibration(det.residuals(params, val_ws),
                                    config.quantile, config.ridge)
    return params, calib, history, train_ws, val_ws


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Execute the full pipeline; deterministic per config."""
    schema = tel.default_schema()
    master = config.master_seed
    params, calib, history, train_ws, val_ws = fit_pipeline(config)
    with _stage("evaluate"):
        clean_seqs = [tel.generate_series(schema, config.eval_length, config.dt,
                                          child_seed(master, "clean_eval", i))
                      for i in range(config.n_clean)]
        anom_seqs = []
        for i in range(config.n_anomalous):
            seq = tel.generate_series(schema, config.eval_length, config.dt,
                                      child_seed(master, "anomalous_eval", i))
            for ch in config.eval_fault.channels:
                seq = tel.inject_fault(seq, tel.FaultSpec(
                    config.eval_fault.kind, ch, config.eval_fault.start_index,
                    config.eval_fault.end_index, config.eval_fault.magnitude))
            anom_seqs.append(seq)
        detector_metrics = evaluate_detector(params, calib, clean_seqs + anom_seqs)
        for rec in detector_metrics["sequences"]:
            rec["set"] = "clean" if rec["index"] < config.n_clean else "anomalous"

    attack_reports = []
    with _stage("attack"):
        for ai, entry in enumerate(config.attacks):
            pool = _attack_pool(entry, ai, config, params, calib, clean_seqs, anom_seqs)
            scenario = tel.ScenarioSpec(f"attack:{entry.name}", entry.scenario)
            results = []
            if entry.type == "noise":
                outcomes = []
                for i, seq in enumerate(pool):
                    spec = atk.NoiseAttackSpec(scenario, entry.scale,
                                               child_seed(master, "attack_noise", ai, i))
                    _, out = atk.noise_attack(params, calib, seq, spec,
                                              direction=entry.direction)
                    outcomes.append(out)
                row = evaluate_attack(outcomes)
                row["parameter"] = entry.scale
                row["outcomes"] = [_outcome_dict(i, o) for i, o in enumerate(outcomes)]
                results.append(row)
            else:
                for eps in entry.epsilons:
                    spec = atk.FgsmAttackSpec(scenario, eps, entry.direction,
                                              entry.iterations)
                    outcomes = []
                    for seq in pool:
                        _, out = atk.fgsm_attack(params, calib, seq, spec)
                        outcomes.append(out)
                    row = evaluate_attack(outcomes)
                    row["parameter"] = eps
                    row["outcomes"] = [_outcome_dict(i, o) for i, o in enumerate(outcomes)]
                    results.append(row)
            attack_reports.append({
                "name": entry.name, "type": entry.type, "direction": entry.direction,
                "scenario": list(entry.scenario), "target_set": entry.target_set,
                "pool_size": len(pool), "iterations": entry.iterations,
                "results": results,
                "best_success_rate": max(r["success_rate"] for r in results),
            })

    with _stage("report"):
        report = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "tool_version": __version__,
            "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "config_fingerprint": config_fingerprint(config),
            "config": config.to_dict(),
            "training": {"train_mse": history["train_mse"],
                         "val_mse": history["val_mse"],
                         "train_windows": len(train_ws), "val_windows": len(val_ws)},
            "detector": {
                "tau": calib.tau,
                "ridge": calib.ridge,
                "quantile": config.quantile,
                "true_positive_rate": detector_metrics["true_positive_rate"],
                "false_positive_rate": detector_metrics["false_positive_rate"],
                "sequences": detector_metrics["sequences"],
            },
            "attacks": attack_reports,
        }
    return ExperimentResult(report, params, calib, clean_seqs, anom_seqs)


def comparable_report(report: dict) -> dict:
    """The report minus wall-clock metadata, for determinism comparisons."""
    out = dict(report)
    out.pop("created_at", None)
    return out


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def emit_report(report: dict, path: str | Path, format: str = "json") -> list[Path]:
    """Write the report as a single JSON document or as a set of CSV tables.

    JSON mode: `path` is the output file. CSV mode: `path` is a directory
    receiving verdicts.csv, distance_traces.csv, attack_results.csv and
    attack_outcomes.csv. Floats are written as repr so both formats carry
    identical values. Returns the written paths."""
    path = Path(path)
    if format == "json":
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return [path]
    if format != "csv-tables":
        raise DataError(f"unknown report format {format!r}")

    path.mkdir(parents=True, exist_ok=True)
    written = []

    def table(name: str, header: list[str], rows: list[list]) -> None:
        p = path / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(c) if isinstance(c, float) else c for c in row])
        written.append(p)

    seqs = report["detector"]["sequences"]
    table("verdicts.csv", ["set", "index", "truth", "verdict", "score"],
          [[r["set"], r["index"], r["truth"], r["verdict"], r["score"]] for r in seqs])
    table("distance_traces.csv", ["set", "index", "window", "distance"],
          [[r["set"], r["index"], w, d]
           for r in seqs for w, d in enumerate(r["window_distances"])])
    table("attack_results.csv",
          ["attack", "type", "direction", "parameter", "success_rate",
           "mean_score_shift", "median_score_shift", "median_original_score",
           "median_attacked_score"],
          [[a["name"], a["type"], a["direction"], r["parameter"], r["success_rate"],
            r["mean_score_shift"], r["median_score_shift"], r["median_original_score"],
            r["median_attacked_score"]]
           for a in report["attacks"] for r in a["results"]])
    table("attack_outcomes.csv",
          ["attack", "parameter", "index", "original_verdict", "attacked_verdict",
           "original_score", "attacked_score", "success", "linf_norm_max"],
          [[a["name"], r["parameter"], o["index"], o["original_verdict"],
            o["attacked_verdict"], o["original_score"], o["attacked_score"],
            o["success"], o["linf_norm_max"]]
           for a in report["attacks"] for r in a["results"] for o in r["outcomes"]])
    return written

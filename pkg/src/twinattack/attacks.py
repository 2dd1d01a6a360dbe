"""White-box perturbation generators against the twin + detector stack.

Two families:

* gaussian_perturb - per-channel white noise, N(0, (k*sigma_c)^2) with
  sigma_c the sample std of that channel over the input sequence itself,
  drawn fresh per timestep and added in engineering units.
* fgsm_attack - sign-of-gradient steps on the detector's decision statistic
  (the max per-window Mahalanobis distance), applied in normalized units and
  restricted to the scenario's channels. TRIGGER ascends the distance,
  EVADE descends it. Because the objective is the max, only the worst
  window's cells carry gradient; everything else stays untouched.

Both attacks modify scenario-channel cells only and leave labels alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import (DetectorCalibration, Verdict, distance_residual_gradient,
                       score_sequence)
from .errors import DataError
from .model import ModelParams, forward, input_gradient_from_output
from .preprocess import normalize
from .telemetry import ANOMALY, NORMAL, ScenarioSpec, TelemetrySeries

TRIGGER = "TRIGGER"  # make a clean sequence look anomalous
EVADE = "EVADE"      # hide a true anomaly


@dataclass(frozen=True)
class NoiseAttackSpec:
    scenario: ScenarioSpec
    scale: float = 1.0   # multiplier k on the per-channel sigma
    seed: int = 0
    # By default the gear channel receives raw float deltas (the twin reads a
    # spoofed bus value, not the physical selector); rounding is opt-in.
    round_integer_channels: bool = False

    def __post_init__(self):
        if self.scale < 0:
            raise DataError(f"noise scale must be >= 0, got {self.scale}")


@dataclass(frozen=True)
class FgsmAttackSpec:
    scenario: ScenarioSpec
    epsilon: float                # per-cell budget in normalized units
    direction: str = TRIGGER
    iterations: int = 1           # 1 = classic single-step
    round_integer_channels: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise DataError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.direction not in (TRIGGER, EVADE):
            raise DataError(f"direction must be TRIGGER or EVADE, got {self.direction}")
        if self.iterations < 1:
            raise DataError(f"iterations must be >= 1, got {self.iterations}")


@dataclass(frozen=True)
class AttackOutcome:
    original_verdict: str
    attacked_verdict: str
    original_score: float
    attacked_score: float
    perturbation_norms: dict      # channel -> {linf_raw, l2_raw, linf_norm, l2_norm}
    success: bool
    direction: str

    def score_shift(self) -> float:
        return self.attacked_score - self.original_score


def _success(original: Verdict, attacked: Verdict, direction: str) -> bool:
    if direction == TRIGGER:
        return original.label == NORMAL and attacked.label == ANOMALY
    return original.label == ANOMALY and attacked.label == NORMAL


def _norms(series: TelemetrySeries, perturbed: TelemetrySeries,
           scenario: ScenarioSpec, params: ModelParams | None) -> dict:
    out = {}
    for ch in scenario.channels:
        j = series.schema.index(ch)
        d = perturbed.values[:, j] - series.values[:, j]
        entry = {"linf_raw": float(np.abs(d).max()),
                 "l2_raw": float(np.linalg.norm(d))}
        if params is not None and params.norm_stats is not None:
            s = params.norm_stats.std[j]
            entry["linf_norm"] = entry["linf_raw"] / s
            entry["l2_norm"] = entry["l2_raw"] / s
        out[ch] = entry
    return out


def per_channel_sigma(series: TelemetrySeries, scenario: ScenarioSpec) -> np.ndarray:
    """Sample std (ddof=1) of each scenario channel over this sequence, in
    engineering units and scenario channel order."""
    if len(series) < 2:
        raise DataError("need at least 2 rows to estimate channel sigma")
    scenario.validate(series.schema)
    idx = [series.schema.index(ch) for ch in scenario.channels]
    return series.values[:, idx].std(axis=0, ddof=1)


def _round_integer_channels(values: np.ndarray, series: TelemetrySeries,
                            scenario: ScenarioSpec) -> None:
    from .telemetry import GEAR_CHANNEL
    if GEAR_CHANNEL in scenario.channels:
        j = series.schema.index(GEAR_CHANNEL)
        values[:, j] = np.round(values[:, j])


def gaussian_perturb(series: TelemetrySeries, spec: NoiseAttackSpec) -> TelemetrySeries:
    """Add white noise N(0, (k*sigma_c)^2) to every scenario-channel cell;
    all other cells and all labels are untouched."""
    sigmas = per_channel_sigma(series, spec.scenario)
    values = series.values.copy()
    rng = np.random.default_rng(spec.seed)
    for ch, sigma in zip(spec.scenario.channels, sigmas):
        scale = spec.scale * sigma
        if scale > 0:
            j = series.schema.index(ch)
            values[:, j] += rng.normal(0.0, scale, size=len(series))
    if spec.round_integer_channels:
        _round_integer_channels(values, series, spec.scenario)
    return TelemetrySeries(series.schema, series.timestamps, values, series.labels)


def noise_attack(params: ModelParams, calib: DetectorCalibration,
                 series: TelemetrySeries, spec: NoiseAttackSpec,
                 direction: str = TRIGGER) -> tuple[TelemetrySeries, AttackOutcome]:
    """gaussian_perturb plus before/after verdicts."""
    original = score_sequence(params, calib, series)
    perturbed = gaussian_perturb(series, spec)
    attacked = score_sequence(params, calib, perturbed)
    outcome = AttackOutcome(original.label, attacked.label, original.score,
                            attacked.score, _norms(series, perturbed, spec.scenario, params),
                            _success(original, attacked, direction), direction)
    return perturbed, outcome


def fgsm_attack(params: ModelParams, calib: DetectorCalibration,
                series: TelemetrySeries, spec: FgsmAttackSpec
                ) -> tuple[TelemetrySeries, AttackOutcome]:
    """Sign-gradient attack on the sequence score.

    Each of the `iterations` steps moves every scenario-channel cell that
    carries gradient by +/- epsilon/iterations in normalized units, following
    the sign of the score gradient at the current point. The score is the max
    window distance, so the gradient lives on the current worst window's
    input cells and its target row; the step leaves all other cells exactly
    unchanged. The accumulated per-cell change never exceeds epsilon.
    """
    if params.norm_stats is None:
        raise DataError("model has no embedded normalization stats; cannot attack")
    spec.scenario.validate(series.schema)
    W = params.layout.window_length
    T = len(series)
    if T < W + 1:
        raise DataError(f"series has {T} rows; need at least {W + 1} to attack")

    original = score_sequence(params, calib, series)
    stats = params.norm_stats
    mask = np.zeros(len(series.schema.channels), dtype=bool)
    for ch in spec.scenario.channels:
        mask[series.schema.index(ch)] = True
    sign = 1.0 if spec.direction == TRIGGER else -1.0
    step = spec.epsilon / spec.iterations

    z = (series.values - stats.mean) / stats.std
    delta = np.zeros_like(z)
    offsets = range(0, T - W, W)
    for _ in range(spec.iterations):
        if spec.epsilon == 0:
            break
        zc = z + delta
        # locate the worst window at the current point
        best_off, best_q, best_r = None, -1.0, None
        for off in offsets:
            r = zc[off + W] - forward(params, zc[off:off + W])
            d = r - calib.mu
            q = float(d @ calib.sigma_inv @ d)
            if q > best_q:
                best_off, best_q, best_r = off, q, r
        grad_r = distance_residual_gradient(calib, best_r)
        if not grad_r.any():
            break
        g = np.zeros_like(z)
        g[best_off:best_off + W] = input_gradient_from_output(
            params, zc[best_off:best_off + W], -grad_r)
        g[best_off + W] = grad_r                      # residual = target - prediction
        g[:, ~mask] = 0.0
        delta += sign * step * np.sign(g)

    changed = delta != 0.0
    values = series.values.copy()
    values[changed] += (delta * stats.std)[changed]
    if spec.round_integer_channels:
        _round_integer_channels(values, series, spec.scenario)
    perturbed = TelemetrySeries(series.schema, series.timestamps, values, series.labels)
    attacked = score_sequence(params, calib, perturbed)
    outcome = AttackOutcome(original.label, attacked.label, original.score,
                            attacked.score, _norms(series, perturbed, spec.scenario, params),
                            _success(original, attacked, spec.direction), spec.direction)
    return perturbed, outcome


def epsilon_sweep(params: ModelParams, calib: DetectorCalibration,
                  sequences, spec_template: FgsmAttackSpec,
                  epsilons) -> list[dict]:
    """Run the FGSM attack at each epsilon over all sequences.

    Returns one row per epsilon (ascending): success rate, mean score shift,
    and mean of the per-sequence max L-infinity perturbation in normalized
    units."""
    sequences = list(sequences)
    if not sequences:
        raise DataError("epsilon_sweep needs at least one sequence")
    rows = []
    for eps in sorted(float(e) for e in epsilons):
        outcomes = []
        linf = []
        for seq in sequences:
            _, out = fgsm_attack(params, calib, seq,
                                 FgsmAttackSpec(spec_template.scenario, eps,
                                                spec_template.direction,
                                                spec_template.iterations))
            outcomes.append(out)
            linf.append(max((v.get("linf_norm", 0.0)
                             for v in out.perturbation_norms.values()), default=0.0))
        rows.append({
            "epsilon": eps,
            "success_rate": float(np.mean([o.success for o in outcomes])),
            "mean_score_shift": float(np.mean([o.score_shift() for o in outcomes])),
            "mean_linf_normalized": float(np.mean(linf)),
        })
    return rows

"""Synthetic heavy-vehicle telemetry: schema, driving-cycle generator,
fault injection, and CSV round-trip.

The generator produces a correlated multichannel stream: a slowly varying
accelerator demand (an Ornstein-Uhlenbeck process squashed to (0,1)) drives
vehicle speed through a first-order lag; engine, transmission, fuel and
brake channels are algebraic or first-order responses to demand, speed and
gear; each sensor channel finally gets its own independent Gaussian read
noise. Gear selection (TrSelGr) is a hysteresis ladder over speed, so it is
integer-valued and piecewise constant. Everything is driven by one seeded
numpy Generator, so a (schema, length, dt, seed) tuple is bit-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

NORMAL = "NORMAL"
ANOMALY = "ANOMALY"

SUBSYSTEMS = ("engine", "transmission", "fuel", "brakes")

# Gear channel: integer-valued, piecewise constant. Additive faults on it are
# ill-posed (and sign-gradient attacks on an integer channel even more so),
# so inject_fault refuses it unless explicitly overridden.
GEAR_CHANNEL = "TrSelGr"

#: Read-noise scale per channel, engineering units. These are the sigma of the
#: i.i.d. Gaussian noise added on top of the deterministic process response and
#: the unit in which FaultSpec.magnitude is expressed. The gear channel carries
#: no read noise (discrete sensor).
NOISE_SCALES = {
    "EngineSpeed": 20.0,
    "EngineLoad": 0.9,
    "EngineCoolantTemp": 0.20,
    "EngineOilPressure": 2.2,
    "AccelPetalPos": 1.0,
    "TrSelGr": 0.0,
    "TrOutputSpeed": 16.0,
    "TrOilTemp": 0.30,
    "ActualGearRatio": 0.035,
    "FuelRate": 0.10,
    "FuelLevel": 0.55,
    "InstFuelEcon": 0.09,
    "BrakePressure": 150.0,
    "BrakePedalPos": 2.4,
    "WheelSpeed": 0.6,
}

# Driving-cycle constants (time constants in seconds so any dt works).
_TAU_DEMAND = 80.0      # OU time constant of accelerator demand
_TAU_SPEED = 15.0       # first-order speed response
_TAU_RATIO = 1.6        # shift slur: effective ratio ramps, it does not jump
_TAU_BRAKE = 2.5
_TAU_LOAD = 1.5         # manifold lag: load follows pedal demand
_TAU_FUEL = 3.0         # metering lag: fuel rate follows engine state
# slow housekeeping channels: stationary OU wander around a set point
_TAU_COOLANT = 60.0
_TAU_TROIL = 70.0
_TAU_FUEL_LEVEL = 160.0
_OU_COOLANT = (86.0, 0.5)     # (set point, wander std)
_OU_TROIL = (78.0, 0.8)
_OU_FUEL_LEVEL = (64.0, 2.0)
_BURN_IN_S = 400.0      # settle transients before the recorded window starts

_GEAR_UP_KMH = (16.0, 40.0, 68.0, 96.0)   # upshift thresholds, gears 1..5
_GEAR_HYSTERESIS_KMH = 17.0
_GEAR_RATIOS = (3.60, 2.10, 1.30, 0.90, 0.68)


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    subsystem: str
    unit: str
    nominal_range: tuple[float, float]


@dataclass(frozen=True)
class ChannelSchema:
    """Ordered set of channel descriptors; fixed at 15 channels."""

    channels: tuple[ChannelSpec, ...]

    def __post_init__(self):
        names = [c.name for c in self.channels]
        if len(self.channels) != 15:
            raise DataError(f"schema must have exactly 15 channels, got {len(self.channels)}")
        if len(set(names)) != len(names):
            raise DataError("channel names must be unique")
        seen = {c.subsystem for c in self.channels}
        if seen != set(SUBSYSTEMS):
            raise DataError(f"subsystems must be exactly {SUBSYSTEMS}, got {sorted(seen)}")
        for c in self.channels:
            lo, hi = c.nominal_range
            if not lo < hi:
                raise DataError(f"channel {c.name}: nominal_range min must be < max")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown channel {name!r}") from None


@dataclass(frozen=True)
class ScenarioSpec:
    """Named subset of channels an attacker may touch."""

    name: str
    channels: tuple[str, ...]

    def validate(self, schema: ChannelSchema) -> None:
        if not self.channels:
            raise DataError(f"scenario {self.name!r} has no channels")
        for ch in self.channels:
            schema.index(ch)


#: The attacked channel subset used throughout: fuel rate, accelerator pedal
#: position and selected gear.
SCENARIO1 = ScenarioSpec("scenario1", ("FuelRate", "AccelPetalPos", "TrSelGr"))


@dataclass(frozen=True)
class TelemetrySeries:
    """Timestamped engineering-unit readings, one column per schema channel."""

    schema: ChannelSchema
    timestamps: np.ndarray   # (T,) seconds, uniform step
    values: np.ndarray       # (T, 15) float64
    labels: tuple[str, ...]  # per-timestep NORMAL/ANOMALY

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=np.float64, order="C")
        vals = np.array(self.values, dtype=np.float64, order="C")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "labels", tuple(self.labels))
        if vals.ndim != 2 or vals.shape[1] != len(self.schema.channels):
            raise DataError(f"values must be (T, {len(self.schema.channels)}), got {vals.shape}")
        if ts.shape != (vals.shape[0],):
            raise DataError("timestamps length must match number of rows")
        if len(self.labels) != vals.shape[0]:
            raise DataError("labels length must match number of rows")
        bad = set(self.labels) - {NORMAL, ANOMALY}
        if bad:
            raise DataError(f"unknown label tokens: {sorted(bad)}")
        if ts.size >= 2:
            steps = np.diff(ts)
            if steps.min() <= 0:
                raise DataError("timestamps must be strictly increasing")
            dt = steps[0]
            if np.abs(steps - dt).max() > 1e-9 * max(abs(dt), 1.0):
                raise DataError("timestamps must be uniformly spaced")
        # Series are immutable; shared between threads without copying.
        ts.setflags(write=False)
        vals.setflags(write=False)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dt(self) -> float:
        return float(self.timestamps[1] - self.timestamps[0])

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, self.schema.index(name)]

    def slice(self, start: int, stop: int) -> "TelemetrySeries":
        return TelemetrySeries(self.schema, self.timestamps[start:stop],
                               self.values[start:stop], self.labels[start:stop])


@dataclass(frozen=True)
class FaultSpec:
    """Injected sensor fault.

    magnitude is a dimensionless multiple of the channel's read-noise scale
    (NOISE_SCALES), so the same number means "equally subtle" on every channel.
    """

    kind: str              # offset | drift | stuck | scale
    channel: str
    start_index: int
    end_index: int
    magnitude: float = 1.0

    def __post_init__(self):
        if self.kind not in ("offset", "drift", "stuck", "scale"):
            raise DataError(f"unknown fault kind {self.kind!r}")
        if self.kind != "stuck" and not self.magnitude > 0:
            raise DataError(f"{self.kind} fault requires magnitude > 0")


def channel_noise_scale(name: str) -> float:
    """Read-noise sigma of a channel in engineering units."""
    try:
        return NOISE_SCALES[name]
    except KeyError:
        raise DataError(f"unknown channel {name!r}") from None


def default_schema() -> ChannelSchema:
    """The fixed 15-channel heavy-vehicle schema."""
    mk = ChannelSpec
    return ChannelSchema((
        mk("EngineSpeed", "engine", "rpm", (500.0, 5000.0)),
        mk("EngineLoad", "engine", "%", (0.0, 100.0)),
        mk("EngineCoolantTemp", "engine", "degC", (55.0, 115.0)),
        mk("EngineOilPressure", "engine", "kPa", (60.0, 800.0)),
        mk("AccelPetalPos", "engine", "%", (0.0, 100.0)),
        mk("TrSelGr", "transmission", "gear", (0.0, 7.0)),
        mk("TrOutputSpeed", "transmission", "rpm", (0.0, 5000.0)),
        mk("TrOilTemp", "transmission", "degC", (50.0, 115.0)),
        mk("ActualGearRatio", "transmission", "ratio", (0.3, 4.5)),
        mk("FuelRate", "fuel", "L/h", (0.0, 80.0)),
        mk("FuelLevel", "fuel", "%", (0.0, 100.0)),
        mk("InstFuelEcon", "fuel", "km/L", (0.0, 40.0)),
        mk("BrakePressure", "brakes", "kPa", (0.0, 9500.0)),
        mk("BrakePedalPos", "brakes", "%", (0.0, 100.0)),
        mk("WheelSpeed", "brakes", "km/h", (0.0, 170.0)),
    ))


def _gear_for_speed(v: float, gear: int) -> int:
    """Hysteresis gear ladder: shift up past the threshold, down only once
    speed has dropped a full hysteresis band below it."""
    top = len(_GEAR_RATIOS)
    while gear < top and v > _GEAR_UP_KMH[gear - 1]:
        gear += 1
    while gear > 1 and v < _GEAR_UP_KMH[gear - 2] - _GEAR_HYSTERESIS_KMH:
        gear -= 1
    return gear


def _ou_path(rng: np.random.Generator, total: int, dt: float, tau: float) -> np.ndarray:
    """Stationary unit-variance Ornstein-Uhlenbeck path."""
    rho = np.exp(-dt / tau)
    innov = rng.normal(0.0, np.sqrt(1.0 - rho * rho), size=total)
    x = np.empty(total)
    x[0] = rng.normal()
    for k in range(1, total):
        x[k] = rho * x[k - 1] + innov[k]
    return x


def generate_series(schema: ChannelSchema, length: int, dt: float, seed: int) -> TelemetrySeries:
    """Simulate `length` steps of healthy driving at sample period `dt`.

    Identical arguments give a bit-identical series. All readings are clipped
    to their nominal range (the clip almost never binds; ranges are generous).
    """
    if length < 2:
        raise DataError(f"length must be >= 2, got {length}")
    if not dt > 0:
        raise DataError(f"dt must be > 0, got {dt}")

    rng = np.random.default_rng(seed)
    burn = int(np.ceil(_BURN_IN_S / dt))
    total = burn + length

    # accelerator demand: OU in latent space, squashed through a sigmoid
    u = 1.0 / (1.0 + np.exp(-0.9 * _ou_path(rng, total, dt, _TAU_DEMAND)))

    # speed with first-order lag toward the demanded speed
    v = np.empty(total)
    v_target = 6.0 + 115.0 * u ** 1.3
    v[0] = v_target[0]
    a_v = dt / _TAU_SPEED
    for k in range(1, total):
        v[k] = v[k - 1] + a_v * (v_target[k] - v[k - 1])

    # gear ladder; the effective drivetrain ratio slurs through shifts
    gear = np.empty(total)
    g = _gear_for_speed(v[0], 3)
    for k in range(total):
        g = _gear_for_speed(v[k], g)
        gear[k] = g
    sel_ratio = np.array([_GEAR_RATIOS[int(g) - 1] for g in gear])
    ratio = np.empty(total)
    ratio[0] = sel_ratio[0]
    a_r = dt / _TAU_RATIO
    for k in range(1, total):
        ratio[k] = ratio[k - 1] + a_r * (sel_ratio[k] - ratio[k - 1])

    # brake demand: engaged when actual speed runs well above demanded speed
    b = np.empty(total)
    b_raw = np.clip((v - v_target - 2.0) / 25.0, 0.0, 1.0)
    b[0] = b_raw[0]
    a_b = dt / _TAU_BRAKE
    for k in range(1, total):
        b[k] = b[k - 1] + a_b * (b_raw[k] - b[k - 1])

    # slow housekeeping channels: independent stationary wanderers
    cool = _OU_COOLANT[0] + _OU_COOLANT[1] * _ou_path(rng, total, dt, _TAU_COOLANT)
    troil = _OU_TROIL[0] + _OU_TROIL[1] * _ou_path(rng, total, dt, _TAU_TROIL)
    fuel_level = (_OU_FUEL_LEVEL[0]
                  + _OU_FUEL_LEVEL[1] * _ou_path(rng, total, dt, _TAU_FUEL_LEVEL))

    rpm = 700.0 + 27.0 * v * ratio

    # engine load follows pedal demand with a manifold lag; fuel metering
    # follows engine state with its own lag (keeps both channels one step
    # ahead of nothing: their drivers are already visible in the window)
    load_t = 10.0 + 82.0 * u
    load = np.empty(total)
    load[0] = load_t[0]
    a_l = dt / _TAU_LOAD
    for k in range(1, total):
        load[k] = load[k - 1] + a_l * (load_t[k] - load[k - 1])
    fuel_t = 0.6 + 0.0045 * rpm * (0.25 + 0.75 * load / 100.0)
    fuel_rate = np.empty(total)
    fuel_rate[0] = fuel_t[0]
    a_f = dt / _TAU_FUEL
    for k in range(1, total):
        fuel_rate[k] = fuel_rate[k - 1] + a_f * (fuel_t[k] - fuel_rate[k - 1])
    econ = v / np.maximum(fuel_rate, 0.8)

    clean = {
        "EngineSpeed": rpm,
        "EngineLoad": load,
        "EngineCoolantTemp": cool,
        "EngineOilPressure": 120.0 + 0.09 * rpm,
        "AccelPetalPos": 100.0 * u,
        "TrSelGr": gear,
        "TrOutputSpeed": 30.0 * v,
        "TrOilTemp": troil,
        "ActualGearRatio": ratio,
        "FuelRate": fuel_rate,
        "FuelLevel": fuel_level,
        "InstFuelEcon": econ,
        "BrakePressure": 140.0 + 6500.0 * b,
        "BrakePedalPos": 2.0 + 96.0 * b,
        "WheelSpeed": v,
    }

    values = np.empty((length, len(schema.channels)))
    for j, ch in enumerate(schema.channels):
        sig = clean[ch.name][burn:]
        scale = NOISE_SCALES[ch.name]
        if scale > 0:
            sig = sig + rng.normal(0.0, scale, size=length)
        lo, hi = ch.nominal_range
        values[:, j] = np.clip(sig, lo, hi)

    timestamps = np.arange(length) * dt
    return TelemetrySeries(schema, timestamps, values, (NORMAL,) * length)


def inject_fault(series: TelemetrySeries, fault: FaultSpec, *,
                 allow_gear_fault: bool = False) -> TelemetrySeries:
    """Return a copy of `series` with `fault` applied and the fault window
    relabelled ANOMALY. Cells outside (fault channel x fault window) are
    bit-identical to the input."""
    T = len(series)
    if not (0 <= fault.start_index < fault.end_index <= T):
        raise DataError(
            f"fault range [{fault.start_index}, {fault.end_index}) invalid for {T} rows")
    if fault.channel == GEAR_CHANNEL and not allow_gear_fault:
        raise DataError(
            f"faults on the integer gear channel {GEAR_CHANNEL} are disabled by "
            "default; pass allow_gear_fault=True to override")
    j = series.schema.index(fault.channel)
    scale = channel_noise_scale(fault.channel)

    values = series.values.copy()
    s, e = fault.start_index, fault.end_index
    window = values[s:e, j]
    if fault.kind == "offset":
        values[s:e, j] = window + fault.magnitude * scale
    elif fault.kind == "stuck":
        values[s:e, j] = values[s, j]
    elif fault.kind == "drift":
        ramp = np.arange(e - s) / max(e - s - 1, 1)
        values[s:e, j] = window + fault.magnitude * scale * ramp
    elif fault.kind == "scale":
        mean = series.values[:, j].mean()
        values[s:e, j] = mean + fault.magnitude * (window - mean)

    labels = list(series.labels)
    labels[s:e] = [ANOMALY] * (e - s)
    return TelemetrySeries(series.schema, series.timestamps, values, tuple(labels))


def write_csv(series: TelemetrySeries, path: str | Path) -> None:
    """Write `timestamp,label,<channels...>` rows; floats as repr so the
    round-trip is exact."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "label", *series.schema.names])
        for t, lab, row in zip(series.timestamps, series.labels, series.values):
            w.writerow([repr(float(t)), lab, *(repr(float(x)) for x in row)])


def read_csv(path: str | Path, schema: ChannelSchema | None = None) -> TelemetrySeries:
    """Read a file produced by write_csv. The header must list exactly the
    schema's channels in schema order."""
    schema = schema or default_schema()
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    expected = ["timestamp", "label", *schema.names]
    if header != expected:
        raise DataError(f"{path}: header mismatch; expected {expected}, got {header}")
    ncol = len(expected)
    ts, labels, values = [], [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != ncol:
            raise DataError(f"{path}:{i}: expected {ncol} fields, got {len(row)}")
        if row[1] not in (NORMAL, ANOMALY):
            raise DataError(f"{path}:{i}: unknown label token {row[1]!r}")
        try:
            ts.append(float(row[0]))
            values.append([float(x) for x in row[2:]])
        except ValueError as e:
            raise DataError(f"{path}:{i}: {e}") from None
        labels.append(row[1])
    if len(ts) >= 2 and np.diff(np.asarray(ts)).min() <= 0:
        raise DataError(f"{path}: timestamps not strictly increasing")
    return TelemetrySeries(schema, np.asarray(ts), np.asarray(values), tuple(labels))

"""Preparation of telemetry for the sequence model: contiguous train/val/test
split, per-channel z-scoring, and sliding prediction windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .telemetry import ANOMALY, NORMAL, TelemetrySeries

STD_FLOOR = 1e-8  # keeps z-scoring finite on (near-)constant channels


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean/std fitted on training data only."""

    mean: np.ndarray  # (C,)
    std: np.ndarray   # (C,) floored at STD_FLOOR, strictly positive

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if mean.shape != std.shape or mean.ndim != 1:
            raise DataError("mean/std must be 1-D vectors of equal length")
        if not np.all(std > 0):
            raise DataError("stds must be strictly positive")

    @property
    def n_channels(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class Window:
    """One training/scoring sample: W normalized rows and the row after them."""

    inputs: np.ndarray   # (W, C) normalized
    target: np.ndarray   # (C,) normalized reading at the step after the window
    label: str           # ANOMALY if any covered timestep is anomalous


@dataclass(frozen=True)
class WindowSet:
    windows: tuple[Window, ...]
    window_length: int
    stride: int

    def __len__(self) -> int:
        return len(self.windows)

    def inputs_matrix(self) -> np.ndarray:
        """All window inputs flattened to (n, W*C), the model's batch layout."""
        return np.ascontiguousarray(
            np.stack([w.inputs.reshape(-1) for w in self.windows]))

    def targets_matrix(self) -> np.ndarray:
        return np.ascontiguousarray(np.stack([w.target for w in self.windows]))


def split(series: TelemetrySeries, train_frac: float, val_frac: float
          ) -> tuple[TelemetrySeries, TelemetrySeries, TelemetrySeries]:
    """Partition rows contiguously into train/val/test.

    Row counts are floor(T*frac) for train and val; the remainder goes to
    test. Train and val must be all-NORMAL: the twin learns healthy behaviour
    and the detector calibrates healthy statistics, so an anomalous row in
    either span is an error, not something to silently drop.
    """
    if not (0 < train_frac and 0 < val_frac and train_frac + val_frac < 1):
        raise DataError(
            f"need 0 < train_frac, 0 < val_frac, train_frac + val_frac < 1; "
            f"got {train_frac}, {val_frac}")
    T = len(series)
    n_train = int(np.floor(T * train_frac))
    n_val = int(np.floor(T * val_frac))
    bad = [i for i in range(n_train + n_val) if series.labels[i] == ANOMALY]
    if bad:
        raise DataError(
            f"anomalous rows inside the train/val span (first at {bad[0]}); "
            "train and validation data must be healthy")
    return (series.slice(0, n_train),
            series.slice(n_train, n_train + n_val),
            series.slice(n_train + n_val, T))


def fit_norm_stats(train: TelemetrySeries) -> NormStats:
    """Per-channel sample mean and std (ddof=1), std floored at STD_FLOOR."""
    if len(train) < 2:
        raise DataError("need at least 2 rows to fit normalization stats")
    mean = train.values.mean(axis=0)
    std = np.maximum(train.values.std(axis=0, ddof=1), STD_FLOOR)
    return NormStats(mean, std)


def _check_stats(series: TelemetrySeries, stats: NormStats) -> None:
    if stats.n_channels != len(series.schema.channels):
        raise DataError(
            f"stats have {stats.n_channels} channels, schema has "
            f"{len(series.schema.channels)}")


def normalize(series: TelemetrySeries, stats: NormStats) -> TelemetrySeries:
    _check_stats(series, stats)
    z = (series.values - stats.mean) / stats.std
    return TelemetrySeries(series.schema, series.timestamps, z, series.labels)


def denormalize(series: TelemetrySeries, stats: NormStats) -> TelemetrySeries:
    _check_stats(series, stats)
    v = series.values * stats.std + stats.mean
    return TelemetrySeries(series.schema, series.timestamps, v, series.labels)


def window_count(T: int, W: int, stride: int) -> int:
    """Closed form for the number of windows make_windows produces."""
    return (T - W - 1) // stride + 1


def make_windows(series: TelemetrySeries, window_length: int, stride: int = 1) -> WindowSet:
    """Cut windows at offsets 0, stride, 2*stride, ...; each window's target
    is the row right after it. The window label is ANOMALY if any covered row
    (inputs or target) is anomalous. `series` is expected in normalized space.
    """
    W = window_length
    if W < 1 or stride < 1:
        raise DataError(f"window_length and stride must be >= 1, got {W}, {stride}")
    T = len(series)
    if T < W + 1:
        raise DataError(f"series has {T} rows; need at least {W + 1} for one window")
    windows = []
    for off in range(0, T - W, stride):
        target_idx = off + W
        label = ANOMALY if ANOMALY in series.labels[off:target_idx + 1] else NORMAL
        windows.append(Window(series.values[off:target_idx],
                              series.values[target_idx], label))
    return WindowSet(tuple(windows), W, stride)

"""The digital twin: a flattened-window MLP that predicts the next telemetry
reading, with exact gradients w.r.t. parameters (training) and inputs (the
white-box attack surface), plus a versioned on-disk artifact format.

Hidden layers are tanh, the output is linear, and the loss is mean squared
error over the output channels. All heavy math goes through the selected
kernel backend (see backend.py)."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import backend
from .errors import DataError, DivergenceError
from .preprocess import NormStats, WindowSet

if TYPE_CHECKING:
    from .detector import DetectorCalibration

ARTIFACT_VERSION = 1


@dataclass(frozen=True)
class ModelLayout:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 32)
    output_dim: int = 15
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d <= 0 for d in dims):
            raise DataError(f"all layer dims must be positive, got {dims}")
        if self.activation != "tanh":
            raise DataError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def window_length(self) -> int:
        """Rows per input window when input_dim = W * output_dim."""
        W, rem = divmod(self.input_dim, self.output_dim)
        if rem:
            raise DataError(
                f"input_dim {self.input_dim} is not a multiple of output_dim "
                f"{self.output_dim}; no window shape defined")
        return W


@dataclass(frozen=True)
class ModelParams:
    layout: ModelLayout
    weights: tuple[np.ndarray, ...]   # per layer, (fan_in, fan_out)
    biases: tuple[np.ndarray, ...]    # per layer, (fan_out,)
    norm_stats: NormStats | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ws = tuple(np.ascontiguousarray(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.ascontiguousarray(b, dtype=np.float64) for b in self.biases)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        dims = self.layout.dims
        if len(ws) != len(dims) - 1 or len(bs) != len(dims) - 1:
            raise DataError("parameter count does not match layout")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise DataError(
                    f"layer {i}: expected W{(dims[i], dims[i + 1])}, "
                    f"b({dims[i + 1]},); got W{w.shape}, b{b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise DataError(f"layer {i}: non-finite parameter values")

    def with_norm_stats(self, stats: NormStats) -> "ModelParams":
        return replace(self, norm_stats=stats)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"   # adam | sgd
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0 and self.learning_rate != 0.0:
            raise DataError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise DataError(f"unknown optimizer {self.optimizer!r}")


def init_params(layout: ModelLayout, seed: int,
                norm_stats: NormStats | None = None) -> ModelParams:
    """Glorot-uniform weights, +/- sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    dims = layout.dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    meta = {"seed": seed, "epochs_run": 0, "final_train_loss": None}
    return ModelParams(layout, tuple(weights), tuple(biases), norm_stats, meta)


def _as_batch(params: ModelParams, window) -> np.ndarray:
    x = np.asarray(window, dtype=np.float64).reshape(-1)
    if x.shape[0] != params.layout.input_dim:
        raise DataError(
            f"window has {x.shape[0]} values, model expects {params.layout.input_dim}")
    return x.reshape(1, -1)


def forward(params: ModelParams, window) -> np.ndarray:
    """Predict the next reading from one window (any shape flattening to
    input_dim); returns an output_dim vector."""
    k = backend.get_backend()
    y = k.forward(list(params.weights), list(params.biases), _as_batch(params, window))
    return y[0]


def forward_batch(params: ModelParams, X: np.ndarray) -> np.ndarray:
    if X.ndim != 2 or X.shape[1] != params.layout.input_dim:
        raise DataError(f"batch must be (n, {params.layout.input_dim}), got {X.shape}")
    k = backend.get_backend()
    return k.forward(list(params.weights), list(params.biases),
                     np.ascontiguousarray(X, dtype=np.float64))


def loss(prediction, target) -> float:
    """Mean squared error over the output channels."""
    p = np.asarray(prediction, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise DataError(f"prediction/target length mismatch: {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


def _backprop(params: ModelParams, window, target):
    k = backend.get_backend()
    X = _as_batch(params, window)
    t = np.asarray(target, dtype=np.float64).reshape(1, -1)
    if t.shape[1] != params.layout.output_dim:
        raise DataError(
            f"target has {t.shape[1]} values, model outputs {params.layout.output_dim}")
    Y, acts = k.forward_full(list(params.weights), list(params.biases), X)
    dY = 2.0 * (Y - t) / params.layout.output_dim
    return k.backward(list(params.weights), list(params.biases), X, acts, dY)


def backward_params(params: ModelParams, window, target):
    """Exact loss gradients w.r.t. every weight and bias: (dWs, dbs)."""
    dWs, dbs, _ = _backprop(params, window, target)
    return dWs, dbs


def backward_input(params: ModelParams, window, target) -> np.ndarray:
    """Exact loss gradient w.r.t. every input cell, shaped like `window`."""
    w = np.asarray(window, dtype=np.float64)
    _, _, dX = _backprop(params, window, target)
    return dX.reshape(w.shape)


def input_gradient_from_output(params: ModelParams, window, d_output) -> np.ndarray:
    """Pull an arbitrary gradient on the model output back to the input.

    Used to differentiate functions composed on top of the prediction (the
    detector's distance); returns a gradient shaped like `window`."""
    k = backend.get_backend()
    X = _as_batch(params, window)
    dY = np.asarray(d_output, dtype=np.float64).reshape(1, -1)
    _, acts = k.forward_full(list(params.weights), list(params.biases), X)
    _, _, dX = k.backward(list(params.weights), list(params.biases), X, acts, dY)
    return dX.reshape(np.asarray(window).shape)


def train(params: ModelParams, train_windows: WindowSet,
          val_windows: WindowSet | None, config: TrainConfig
          ) -> tuple[ModelParams, dict]:
    """Mini-batch training with per-epoch seeded shuffling.

    Records train MSE (running mean over the epoch's batches) and validation
    MSE per epoch. Raises DivergenceError on NaN/Inf loss. Same seed, same
    data => identical parameter trajectory.
    """
    if len(train_windows) == 0:
        raise DataError("training window set is empty")
    k = backend.get_backend()
    X = train_windows.inputs_matrix()
    Y = train_windows.targets_matrix()
    Xv = Yv = None
    if val_windows is not None and len(val_windows) > 0:
        Xv = val_windows.inputs_matrix()
        Yv = val_windows.targets_matrix()

    weights = [w.copy() for w in params.weights]
    biases = [b.copy() for b in params.biases]
    n, n_out = Y.shape
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate

    adam_m = adam_v = None
    if config.optimizer == "adam":
        adam_m = [np.zeros_like(w) for w in weights] + [np.zeros_like(b) for b in biases]
        adam_v = [np.zeros_like(w) for w in weights] + [np.zeros_like(b) for b in biases]
    adam_t = 0

    history = {"train_mse": [], "val_mse": []}
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sq_err_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            Xb, Yb = X[idx], Y[idx]
            P, acts = k.forward_full(weights, biases, Xb)
            err = P - Yb
            sq_err_sum += float((err ** 2).sum())
            dY = 2.0 * err / (n_out * len(idx))
            dWs, dbs, _ = k.backward(weights, biases, Xb, acts, dY)
            grads = list(dWs) + list(dbs)
            tensors = weights + biases
            if config.optimizer == "sgd":
                for p, g in zip(tensors, grads):
                    p -= lr * g
            else:
                adam_t += 1
                b1, b2 = config.beta1, config.beta2
                corr1 = 1.0 - b1 ** adam_t
                corr2 = 1.0 - b2 ** adam_t
                for p, g, m, v in zip(tensors, grads, adam_m, adam_v):
                    m *= b1
                    m += (1.0 - b1) * g
                    v *= b2
                    v += (1.0 - b2) * g * g
                    p -= lr * (m / corr1) / (np.sqrt(v / corr2) + config.adam_eps)
        train_mse = sq_err_sum / (n * n_out)
        if not np.isfinite(train_mse):
            raise DivergenceError(
                f"training diverged at epoch {epoch + 1}: train MSE = {train_mse}; "
                f"lr={lr}, optimizer={config.optimizer}")
        history["train_mse"].append(train_mse)
        if Xv is not None:
            Pv = k.forward(weights, biases, Xv)
            history["val_mse"].append(float(np.mean((Pv - Yv) ** 2)))

    meta = dict(params.metadata)
    meta.update({
        "seed": config.seed,
        "epochs_run": meta.get("epochs_run", 0) + config.epochs,
        "final_train_loss": history["train_mse"][-1],
    })
    trained = ModelParams(params.layout, tuple(weights), tuple(biases),
                          params.norm_stats, meta)
    return trained, history


# ---------------------------------------------------------------------------
# Artifact I/O: one .npz file holding layout, parameters, normalization stats,
# training metadata, and (optionally) the detector calibration.
# ---------------------------------------------------------------------------

def save_model(params: ModelParams, path: str | Path,
               calibration: "DetectorCalibration | None" = None) -> None:
    meta = {
        "format_version": ARTIFACT_VERSION,
        "layout": {
            "input_dim": params.layout.input_dim,
            "hidden_dims": list(params.layout.hidden_dims),
            "output_dim": params.layout.output_dim,
            "activation": params.layout.activation,
        },
        "metadata": params.metadata,
        "has_norm_stats": params.norm_stats is not None,
        "has_calibration": calibration is not None,
    }
    arrays = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"weight_{i}"] = w
        arrays[f"bias_{i}"] = b
    if params.norm_stats is not None:
        arrays["norm_mean"] = params.norm_stats.mean
        arrays["norm_std"] = params.norm_stats.std
    if calibration is not None:
        meta["calibration"] = {"ridge": calibration.ridge, "tau": calibration.tau,
                               "meta": calibration.metadata}
        arrays["calib_mu"] = calibration.mu
        arrays["calib_sigma"] = calibration.sigma
        arrays["calib_sigma_inv"] = calibration.sigma_inv
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:   # plain open keeps the exact path (no .npz suffixing)
        np.savez(fh, **arrays)


def _load_npz(path: str | Path) -> dict:
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            return {k: data[k] for k in data.files}
    except (OSError, ValueError, zipfile.BadZipFile, KeyError) as e:
        raise DataError(f"cannot read model artifact {path}: {e}") from None


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise DataError(f"model artifact: non-finite values in {name}")
    return arr


def load_artifact(path: str | Path):
    """Load (ModelParams, DetectorCalibration | None) from save_model output."""
    data = _load_npz(path)
    try:
        meta = json.loads(bytes(data["meta_json"]).decode())
    except (KeyError, ValueError) as e:
        raise DataError(f"model artifact {path}: missing/invalid metadata: {e}") from None
    version = meta.get("format_version")
    if version != ARTIFACT_VERSION:
        raise DataError(
            f"model artifact {path}: format version {version} not supported "
            f"(expected {ARTIFACT_VERSION})")
    lay = meta["layout"]
    layout = ModelLayout(lay["input_dim"], tuple(lay["hidden_dims"]),
                         lay["output_dim"], lay["activation"])
    n_layers = len(layout.dims) - 1
    try:
        weights = tuple(_check_finite(f"weight_{i}", data[f"weight_{i}"])
                        for i in range(n_layers))
        biases = tuple(_check_finite(f"bias_{i}", data[f"bias_{i}"])
                       for i in range(n_layers))
    except KeyError as e:
        raise DataError(f"model artifact {path}: missing array {e}") from None
    stats = None
    if meta.get("has_norm_stats"):
        stats = NormStats(_check_finite("norm_mean", data["norm_mean"]),
                          _check_finite("norm_std", data["norm_std"]))
    params = ModelParams(layout, weights, biases, stats, meta.get("metadata", {}))

    calib = None
    if meta.get("has_calibration"):
        from .detector import DetectorCalibration
        cm = meta["calibration"]
        calib = DetectorCalibration(
            mu=_check_finite("calib_mu", data["calib_mu"]),
            sigma=_check_finite("calib_sigma", data["calib_sigma"]),
            sigma_inv=_check_finite("calib_sigma_inv", data["calib_sigma_inv"]),
            ridge=float(cm["ridge"]), tau=float(cm["tau"]),
            metadata=cm.get("meta", {}))
    return params, calib


def load_model(path: str | Path) -> ModelParams:
    """Load just the model parameters from an artifact file."""
    return load_artifact(path)[0]

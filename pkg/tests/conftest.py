import numpy as np
import pytest

from twinattack import detector as det
from twinattack import model as mdl
from twinattack import preprocess as pre
from twinattack import telemetry as tel


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic, numeric, abs_floor=1e-6):
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
    return float(np.max(np.abs(a - n) / scale))


@pytest.fixture(scope="session")
def small_twin():
    """A quickly trained twin + calibration for attack/integration tests.

    Trained on a short series so the whole fixture costs a few seconds; the
    acceptance suite trains the full configuration separately.
    """
    schema = tel.default_schema()
    main = tel.generate_series(schema, 9000, 0.5, seed=77)
    train_s, val_s, _ = pre.split(main, 0.6, 0.2)
    stats = pre.fit_norm_stats(train_s)
    W = 12
    train_ws = pre.make_windows(pre.normalize(train_s, stats), W, 1)
    val_ws = pre.make_windows(pre.normalize(val_s, stats), W, 1)
    params = mdl.init_params(mdl.ModelLayout(W * 15, (64, 32), 15), 5, stats)
    for i, (epochs, lr) in enumerate([(40, 1.5e-3), (20, 3e-4)]):
        params, _ = mdl.train(params, train_ws, val_ws,
                              mdl.TrainConfig(epochs=epochs, batch_size=128,
                                              learning_rate=lr, seed=11 + i))
    calib = det.fit_calibration(det.residuals(params, val_ws), 0.99)
    return params, calib

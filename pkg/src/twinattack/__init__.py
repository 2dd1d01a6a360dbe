"""twinattack: a telemetry digital twin for heavy vehicles (neural one-step
predictor + Mahalanobis anomaly detector) and white-box perturbation attacks
against it."""

__version__ = "0.1.0"

from .backend import available_backends, backend_name, set_backend  # noqa: F401

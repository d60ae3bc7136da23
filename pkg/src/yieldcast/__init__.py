"""Time-series-aware ensemble forecasting toolkit for county yield data."""

__version__ = "0.1.0"

from . import dataset, ensemble, interpret, learners, metrics, synth, validation

__all__ = [
    "__version__",
    "dataset",
    "ensemble",
    "interpret",
    "learners",
    "metrics",
    "synth",
    "validation",
]

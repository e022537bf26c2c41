"""Patch-based land-cover classification with SVM, MLP and 2D-CNN classifiers."""

from patchland.errors import ConfigError, DataError, NumericalError, PatchlandError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "NumericalError",
    "PatchlandError",
    "__version__",
]

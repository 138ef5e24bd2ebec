"""Separable sample covariance matrices: limiting spectra, edges, simulation and tests."""

from .errors import SepCovError
from .model import AtomicMeasure, SpectralModel, build_model, load_model, null_model

__all__ = ["AtomicMeasure", "SepCovError", "SpectralModel", "build_model", "load_model", "null_model"]
__version__ = "0.1.0"

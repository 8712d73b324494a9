"""Sparse radio map reconstruction with geometry priors and uncertainty-guided sensing."""

from .estimators import GeoUQRegressor, InputNormalizer, NearestFillRegressor
from .net import GeoUQGFNet, NetConfig, build_model

__version__ = "0.1.0"

__all__ = [
    "GeoUQGFNet",
    "GeoUQRegressor",
    "InputNormalizer",
    "NearestFillRegressor",
    "NetConfig",
    "build_model",
    "__version__",
]

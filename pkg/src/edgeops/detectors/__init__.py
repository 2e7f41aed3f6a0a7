"""Streaming per-component anomaly detectors."""

from .iftm import ALGORITHMS, AnomalyEvent, Detector, component_of
from .models import ArimaModel, BirchModel, RnnModel, Standardizer
from .threshold import ThresholdModel

__all__ = [
    "ALGORITHMS",
    "AnomalyEvent",
    "ArimaModel",
    "BirchModel",
    "Detector",
    "RnnModel",
    "Standardizer",
    "ThresholdModel",
    "component_of",
]

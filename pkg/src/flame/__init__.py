"""Legendre-memory encoder/decoder with a conditional flow head for probabilistic forecasting."""

from .model import PRESETS, FlameModel, ModelConfig, count_parameters, preset

__all__ = ["FlameModel", "ModelConfig", "PRESETS", "count_parameters", "preset"]
__version__ = "0.1.0"

"""Reverse-mode differentiation, layers, architectures and the optimizer."""

from xsynth.nets.archs import Arch, ArchConfig, Preset
from xsynth.nets.model import DenoiserModel, build_model, param_count, param_shapes

__all__ = ["Arch", "ArchConfig", "Preset", "DenoiserModel", "build_model", "param_count", "param_shapes"]

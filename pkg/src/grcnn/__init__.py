"""Gated recurrent convolutional networks in NumPy."""

from .grcl import GateMode, grcl_backward, grcl_forward, init_grcl
from .network import PRESETS, GrcnnConfig, build_grcnn, freeze, network_backward, network_forward

__version__ = "0.1.0"

__all__ = [
    "GateMode",
    "GrcnnConfig",
    "PRESETS",
    "build_grcnn",
    "freeze",
    "grcl_backward",
    "grcl_forward",
    "init_grcl",
    "network_backward",
    "network_forward",
]

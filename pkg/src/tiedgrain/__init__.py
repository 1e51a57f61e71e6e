"""Weight-tied, equilibrium and multi-mask weight-tied networks in numpy."""

from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    FormatError,
    NonConvergenceError,
    NumericError,
    TiedGrainError,
)
from .masking import Mask, MaskSpec, generate_mask
from .model import Network, NetworkConfig, build_network

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "Mask",
    "MaskSpec",
    "Network",
    "NetworkConfig",
    "NonConvergenceError",
    "NumericError",
    "TiedGrainError",
    "build_network",
    "generate_mask",
]

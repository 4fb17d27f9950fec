"""Global Context Vision Transformer reference engine on a numpy tape autodiff."""

from gcvit.errors import (ConfigError, ContractError, DimensionError, FormatError, GCViTError,
                          NonFiniteError)
from gcvit.model import PRESETS, VariantConfig, build, forward, load, preset, save

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DimensionError", "FormatError", "GCViTError",
           "NonFiniteError", "PRESETS", "VariantConfig", "build", "forward", "load", "preset",
           "save"]

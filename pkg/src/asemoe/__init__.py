"""LoRA mixture-of-experts multi-task learning with adaptive shared experts."""

from .config import ExperimentConfig, load_config, parse_config
from .moe import ConfigError, ExpertConfig, Variant
from .tensor import Tensor

__all__ = ["ConfigError", "ExperimentConfig", "ExpertConfig", "Tensor", "Variant", "load_config", "parse_config"]
__version__ = "0.1.0"

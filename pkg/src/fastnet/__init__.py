"""FastNet on a from-scratch numpy deep-learning core."""

from .network import ArchitectureSpec, ModelState, build_fastnet, build_model, count_macs, count_params, fastnet_spec
from .training import TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "ModelState",
    "TrainConfig",
    "build_fastnet",
    "build_model",
    "count_macs",
    "count_params",
    "evaluate",
    "fastnet_spec",
    "fit",
]

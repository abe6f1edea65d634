"""SwinECAT: hierarchical shifted-window attention with per-stage channel gating."""
from .eca import EcaConfig, adaptive_kernel_size, apply_eca
from .model import ModelConfig, ModelParams, build, forward, parameter_audit
from .tensor import Tensor, backward, double_precision, no_grad

__version__ = "0.1.0"

__all__ = [
    "EcaConfig",
    "ModelConfig",
    "ModelParams",
    "Tensor",
    "adaptive_kernel_size",
    "apply_eca",
    "backward",
    "build",
    "double_precision",
    "forward",
    "no_grad",
    "parameter_audit",
]

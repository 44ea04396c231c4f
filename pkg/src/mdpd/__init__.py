"""Memory-efficient side-network tuning with dual-path distillation, on a numpy autodiff core."""

from .autodiff import Parameter, Tensor, backward, grad_check
from .config import TrainConfig, parse_config
from .distill import DistillConfig
from .models import ArchSpec

__all__ = ["ArchSpec", "DistillConfig", "Parameter", "Tensor", "TrainConfig", "backward",
           "grad_check", "parse_config"]
__version__ = "0.1.0"

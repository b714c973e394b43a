"""ConvMixer built on a small numpy autodiff core."""

from .model import ConvMixer, ModelConfig, build, param_count
from .tensor import Tensor, no_grad

__all__ = ["ConvMixer", "ModelConfig", "Tensor", "build", "no_grad", "param_count"]
__version__ = "0.1.0"

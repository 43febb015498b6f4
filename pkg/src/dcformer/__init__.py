"""Multi-class-token vision transformer for re-identification, on a numpy autodiff core."""

from .config import RunConfig, default_config, load_config
from .model import ModelConfig, init_state, forward, heads_forward
from .tensor import Tensor, backward, gradcheck

__all__ = ["RunConfig", "default_config", "load_config", "ModelConfig", "init_state", "forward",
           "heads_forward", "Tensor", "backward", "gradcheck"]
__version__ = "0.1.0"

"""Two-branch luminance/depth/color fusion segmentation network, built on a
small numpy tensor engine with reverse-mode automatic differentiation."""

__version__ = "0.1.0"

from .model import ModelConfig, Variant, build_model, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad

__all__ = [
    "ModelConfig",
    "Tensor",
    "Variant",
    "build_model",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "__version__",
]

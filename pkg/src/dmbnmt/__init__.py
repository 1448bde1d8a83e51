"""Dynamic multi-branch Transformer layers for translation, on a small numpy autodiff core."""

from .model import ModelConfig, TransformerModel, preset
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["ModelConfig", "Tensor", "TransformerModel", "preset", "__version__"]

"""Neural code summarization with attention to file context."""

from .corpus import HyperParams
from .model import ModelParams, init_model

__version__ = "0.1.0"
__all__ = ["HyperParams", "ModelParams", "init_model", "__version__"]

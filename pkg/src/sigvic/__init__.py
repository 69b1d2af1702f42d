"""Variable-rate learned image codec with spatial-importance guided feature scaling."""

from .codec import SigVIC, compress, decompress, load_model, save_model
from .config import CodecConfig, LambdaSpec
from .errors import ConfigurationError, ContainerError, DecodeError, DomainError

__version__ = "0.1.0"

__all__ = [
    "SigVIC",
    "CodecConfig",
    "LambdaSpec",
    "compress",
    "decompress",
    "load_model",
    "save_model",
    "ConfigurationError",
    "ContainerError",
    "DecodeError",
    "DomainError",
]

"""Sequential disentanglement of static and dynamic factors with an anchor-subtraction VAE."""
from .config import ConfigError, RunConfig
from .model import Model, ModelConfig
from .synthdata import SequenceDataset, SyntheticSpec, generate

__all__ = ["ConfigError", "Model", "ModelConfig", "RunConfig", "SequenceDataset", "SyntheticSpec", "generate"]
__version__ = "0.1.0"

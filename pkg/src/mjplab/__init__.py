"""Masked jigsaw puzzle training for a toy numpy ViT: position-embedding
analysis, consistency metrics and a closed-form gradient-inversion attack."""

from .config import VARIANTS, RunConfig, load_config
from .data import Dataset, generate_synthetic_dataset, load_dataset, save_dataset
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError
from .tensor import Tensor
from .vit import ModelSnapshot, ViTConfig, init_model, model_forward

__version__ = "0.1.0"

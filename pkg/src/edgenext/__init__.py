"""EdgeNeXt in NumPy: channels-last inference, a tape autograd, cost analysis and toy training."""
from .analysis import attention_scaling_probe, count_madds, count_params, summarize
from .model import ABLATIONS, ConfigError, ModelConfig, StageConfig, ablation, build_model, model_forward, preset, tiny
from .serialization import load_config, load_weights, preprocess, read_image, save_config, save_weights
from .tensor import DimensionError
from .training import SyntheticDataset, train_loop

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "ConfigError",
    "DimensionError",
    "ModelConfig",
    "StageConfig",
    "SyntheticDataset",
    "ablation",
    "attention_scaling_probe",
    "build_model",
    "count_madds",
    "count_params",
    "load_config",
    "load_weights",
    "model_forward",
    "preprocess",
    "preset",
    "read_image",
    "save_config",
    "save_weights",
    "summarize",
    "tiny",
    "train_loop",
]

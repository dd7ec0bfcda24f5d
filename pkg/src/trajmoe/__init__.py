"""Cross-city next-location prediction with a spatially-aware mixture-of-experts transformer."""
from .config import ABLATIONS, ConfigError, ModelConfig, TrainConfig
from .features import Trajectory
from .synth import City, CityDataset, GeneratorConfig
from .training import Checkpoint, finetune, load_checkpoint, pretrain, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "Checkpoint",
    "City",
    "CityDataset",
    "ConfigError",
    "GeneratorConfig",
    "ModelConfig",
    "TrainConfig",
    "Trajectory",
    "finetune",
    "load_checkpoint",
    "pretrain",
    "save_checkpoint",
]

"""Decoupled text/visual prompting for referring segmentation on synthetic scenes."""

from .config import RunConfig, load_config, save_config
from .errors import (
    ConfigError,
    ContractError,
    DSVAError,
    FormatError,
    NumericError,
    ShapeError,
    TrainingError,
)
from .evaluation import evaluate
from .model import DSVAModel
from .synthdata import build_dataset, generate_scene
from .training import load_model, run_ablation, run_phase1, run_phase2

__version__ = "0.1.0"

__all__ = [
    "DSVAModel",
    "RunConfig",
    "load_config",
    "save_config",
    "build_dataset",
    "generate_scene",
    "run_phase1",
    "run_phase2",
    "run_ablation",
    "load_model",
    "evaluate",
    "DSVAError",
    "ContractError",
    "ConfigError",
    "ShapeError",
    "NumericError",
    "FormatError",
    "TrainingError",
]

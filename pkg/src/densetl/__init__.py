"""DenseNet transfer learning on a small numpy autodiff engine."""
from .config import ExperimentConfig, load_config
from .densenet import DenseNetConfig, HeadConfig, build_backbone, build_model, freeze_base, param_count
from .experiment import run_sweep, run_training
from .model_io import load_model, save_model

__all__ = [
    "DenseNetConfig",
    "ExperimentConfig",
    "HeadConfig",
    "build_backbone",
    "build_model",
    "freeze_base",
    "load_config",
    "load_model",
    "param_count",
    "run_sweep",
    "run_training",
    "save_model",
]
__version__ = "0.1.0"

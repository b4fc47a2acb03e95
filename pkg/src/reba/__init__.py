"""Weakly supervised regional brain age: occlusion-corrected teacher labels distilled into a prompt-conditioned student."""

from .backbone import OptimizerConfig, RegressorModel, reference_backbone
from .config import ExperimentConfig
from .datagen import DatasetConfig, generate_cohort, load_dataset
from .pipeline import Pipeline, run_ablation

__all__ = [
    "DatasetConfig",
    "ExperimentConfig",
    "OptimizerConfig",
    "Pipeline",
    "RegressorModel",
    "generate_cohort",
    "load_dataset",
    "reference_backbone",
    "run_ablation",
]

__version__ = "0.1.0"

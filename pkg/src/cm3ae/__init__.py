"""Masked RGB / Event / voxel pre-training at desk scale."""
from .config import ModelConfig, paper_config, preset, toy_config
from .data import SamplePair, SyntheticConfig, generate_dataset, generate_synthetic_pair
from .estimator import CM3AEPretrainer, linear_probe, probe_accuracy
from .masking import MaskPlan, plan_counts, sample_mask_plan, sample_mask_plans
from .model import CM3AE
from .training import TrainConfig, Trainer, pretrain

__version__ = "0.1.0"

__all__ = [
    "CM3AE",
    "CM3AEPretrainer",
    "MaskPlan",
    "ModelConfig",
    "SamplePair",
    "SyntheticConfig",
    "TrainConfig",
    "Trainer",
    "generate_dataset",
    "generate_synthetic_pair",
    "linear_probe",
    "paper_config",
    "plan_counts",
    "preset",
    "pretrain",
    "probe_accuracy",
    "sample_mask_plan",
    "sample_mask_plans",
    "toy_config",
]

"""Adversarial robustness toolkit for a small four-task perception network.

Trains a shared-encoder model for monocular distance, semantic segmentation,
motion segmentation and object detection on procedurally generated scenes,
attacks it with iterative-gradient and evolution-strategies perturbations,
and evaluates a Gaussian-blur defense.
"""

from .attacks import (
    AttackConfig,
    AttackResult,
    ESConfig,
    ForwardOracle,
    TargetSpec,
    make_target,
    make_untargeted_reference,
    nes_ascend,
    run_attack,
)
from .autodiff import NonFiniteError, ShapeError, Tensor, finite_diff_check, no_grad
from .defense import DefenseConfig, GaussianBlurDefense, gaussian_blur
from .metrics import TaskMetrics, evaluate_model, evaluate_outputs, mean_ap, miou, rmse
from .model import ModelConfig, MultiTaskPerceptionModel, TrainConfig
from .scenegen import Dataset, Sample, SceneParams, generate_dataset, generate_scene

__version__ = "1.0.0"

__all__ = [
    "AttackConfig", "AttackResult", "ESConfig", "ForwardOracle", "TargetSpec",
    "make_target", "make_untargeted_reference", "nes_ascend", "run_attack",
    "NonFiniteError", "ShapeError", "Tensor", "finite_diff_check", "no_grad",
    "DefenseConfig", "GaussianBlurDefense", "gaussian_blur",
    "TaskMetrics", "evaluate_model", "evaluate_outputs", "mean_ap", "miou", "rmse",
    "ModelConfig", "MultiTaskPerceptionModel", "TrainConfig",
    "Dataset", "Sample", "SceneParams", "generate_dataset", "generate_scene",
]

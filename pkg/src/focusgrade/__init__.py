"""Focus-guided vision-transformer training for image grading.

The package trains a small encoder to grade images while steering its
attention toward diagnostic regions (gradient-based contribution maps and a
three-region objective) and aligning its features with categorical biomarker
panels through per-biomarker contrastive subspaces. Inference needs images
only.
"""

from .autodiff import Graph, Tensor, backward, stop_gradient
from .data import GeneratorConfig, Sample, generate, kfold_split, load
from .estimator import FocusGradeClassifier
from .frl import ContributionMap, PatchMask, contribution_map, patch_mask, split_regions
from .mca import BiomarkerPanel, Projectors
from .metrics import MetricsReport
from .model import Model, ModelConfig
from .train import TrainConfig, Trainer, cross_validate, evaluate

__version__ = "0.1.0"

__all__ = [
    "BiomarkerPanel",
    "ContributionMap",
    "FocusGradeClassifier",
    "GeneratorConfig",
    "Graph",
    "MetricsReport",
    "Model",
    "ModelConfig",
    "PatchMask",
    "Projectors",
    "Sample",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "backward",
    "contribution_map",
    "cross_validate",
    "evaluate",
    "generate",
    "kfold_split",
    "load",
    "patch_mask",
    "split_regions",
    "stop_gradient",
    "__version__",
]

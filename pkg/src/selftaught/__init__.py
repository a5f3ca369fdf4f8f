"""Semi-supervised self-taught segmentation: a small U-Net student, a dense-CRF
teacher and a curriculum that promotes the teacher's easiest refinements to labels."""

from .curriculum import (CurriculumConfig, SamplePool, SelfTaughtSegmenter, baseline_labeled_only,
                         baseline_random_loop, self_taught_loop)
from .densecrf import CrfParams, DenseCRF, PairwiseKernel, mean_field_brute, mean_field_fast, refine
from .metrics import IterationReport, dsc, evaluate
from .phantom import PhantomConfig, generate_dataset, generate_sample
from .student import StudentArch, TrainConfig, UNetSegmenter

__version__ = "0.1.0"

__all__ = [
    "CrfParams", "CurriculumConfig", "DenseCRF", "IterationReport", "PairwiseKernel",
    "PhantomConfig", "SamplePool", "SelfTaughtSegmenter", "StudentArch", "TrainConfig",
    "UNetSegmenter", "baseline_labeled_only", "baseline_random_loop", "dsc", "evaluate",
    "generate_dataset", "generate_sample", "mean_field_brute", "mean_field_fast", "refine",
    "self_taught_loop",
]

"""Few-shot defect generation and weakly supervised defect detection.

Three stages over a frozen latent diffusion backbone: learn a defect
embedding from a handful of masked examples, paint that defect into
sampled bounding boxes on normal images, and train a segmentation
detector on the result.
"""

__version__ = "0.1.0"

from .boxes import BoxConfig, BoxMask, ForegroundMask, extract_foreground, sample_box
from .config import EvalConfig, PipelineConfig, load_config, save_config, toy_profile
from .dataset import CategoryData, TestRecord, load_dataset
from .embedding import (AnomalyEmbedding, InversionConfig, SupportRecord,
                        SupportSet, learn_embedding)
from .generation import GenerationConfig, generate_anomaly, generate_dataset
from .metrics import EvalRecord, EvalResult, aupr, auroc, evaluate_records
from .pipeline import PipelineResult, run_ablation, run_pipeline
from .toyworld import ToyWorldConfig, export_toy_world

__all__ = [
    "__version__",
    "BoxConfig",
    "BoxMask",
    "ForegroundMask",
    "extract_foreground",
    "sample_box",
    "EvalConfig",
    "PipelineConfig",
    "load_config",
    "save_config",
    "toy_profile",
    "CategoryData",
    "TestRecord",
    "load_dataset",
    "AnomalyEmbedding",
    "InversionConfig",
    "SupportRecord",
    "SupportSet",
    "learn_embedding",
    "GenerationConfig",
    "generate_anomaly",
    "generate_dataset",
    "EvalRecord",
    "EvalResult",
    "auroc",
    "aupr",
    "evaluate_records",
    "PipelineResult",
    "run_pipeline",
    "run_ablation",
    "ToyWorldConfig",
    "export_toy_world",
]

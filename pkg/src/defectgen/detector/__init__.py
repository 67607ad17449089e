"""Weakly supervised discriminative defect detector."""

from .losses import (confidence_indicator, focal_seg_loss, gaussian_window,
                     reconstruction_loss, ssim, ssim_map, weak_seg_loss,
                     weighted_seg_loss)
from .model import (DetectorNets, DiscriminativeNet, ReconstructiveNet,
                    load_detector, save_detector)
from .synthetic import (TrainingSample, cut_paste_anomaly, perlin_mask,
                        perlin_noise, texture_blend_anomaly)
from .training import (DetectorTrainConfig, GeneratedExample, ScoreMap,
                       predict, sample_training_batch, train_detector)

__all__ = [
    "gaussian_window",
    "ssim",
    "ssim_map",
    "reconstruction_loss",
    "focal_seg_loss",
    "confidence_indicator",
    "weak_seg_loss",
    "weighted_seg_loss",
    "ReconstructiveNet",
    "DiscriminativeNet",
    "DetectorNets",
    "save_detector",
    "load_detector",
    "perlin_noise",
    "perlin_mask",
    "texture_blend_anomaly",
    "cut_paste_anomaly",
    "TrainingSample",
    "DetectorTrainConfig",
    "GeneratedExample",
    "sample_training_batch",
    "train_detector",
    "predict",
    "ScoreMap",
]

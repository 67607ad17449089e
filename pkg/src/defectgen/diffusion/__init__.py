"""Latent diffusion backbone: schedules, forward/reverse ops, tiny models."""

from .backbone import (ConditionedDenoiser, ConvAutoencoder,
                       IdentityAutoencoder, Latent, LoadedBackbone,
                       TokenHashEncoder, load_backbone,
                       load_external_backbone, register_backbone_adapter,
                       save_backbone)
from .ops import add_noise, denoise_loop, denoise_step, ldm_loss, step_schedule
from .schedule import NoiseSchedule, make_schedule
from .training import (BackboneTrainConfig, feature_condition, image_features,
                       perturb_image, train_tiny_backbone)

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "add_noise",
    "ldm_loss",
    "denoise_step",
    "denoise_loop",
    "step_schedule",
    "Latent",
    "IdentityAutoencoder",
    "ConvAutoencoder",
    "ConditionedDenoiser",
    "TokenHashEncoder",
    "LoadedBackbone",
    "save_backbone",
    "load_backbone",
    "register_backbone_adapter",
    "load_external_backbone",
    "BackboneTrainConfig",
    "train_tiny_backbone",
    "feature_condition",
    "image_features",
    "perturb_image",
]

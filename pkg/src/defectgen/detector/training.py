"""Detector training and inference.

Each batch mixes normal images, generated defects carrying box labels,
and classic synthetic defects carrying exact masks.  The reconstructive
net regresses the clean source; the discriminative net is trained with
focal loss under the box-aware reweighting.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import DataError, ParameterError, TrainingError
from ..seeding import derive_seed, numpy_generator
from .losses import focal_seg_loss, reconstruction_loss, weighted_seg_loss
from .model import DetectorNets, DiscriminativeNet, ReconstructiveNet
from .synthetic import TrainingSample, cut_paste_anomaly, texture_blend_anomaly


@dataclass
class GeneratedExample:
    """A generated defect image with its box label and clean source."""

    image: torch.Tensor
    mask: torch.Tensor
    source: torch.Tensor


@dataclass
class DetectorTrainConfig:
    iters: int = 1500
    batch_size: int = 8
    lr: float = 1e-3
    tau: float = 0.9
    gamma: float = 2.0
    alpha: float = 0.5
    lambda_ssim: float = 1.0
    normal_fraction: float = 0.5
    mix_probability: float = 0.5  # anomalous slot: generated vs classic
    base: int = 32
    smooth_kernel: int = 21
    log_every: int = 50
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.normal_fraction < 1.0:
            raise ParameterError(f"normal_fraction {self.normal_fraction} outside [0,1)")
        if not 0.0 <= self.mix_probability <= 1.0:
            raise ParameterError(f"mix_probability {self.mix_probability} outside [0,1]")


def _make_sample(rng: np.random.Generator, normals: torch.Tensor,
                 generated: Sequence[GeneratedExample],
                 textures: Optional[torch.Tensor],
                 cfg: DetectorTrainConfig) -> TrainingSample:
    n = normals.shape[0]
    src = normals[int(rng.integers(0, n))]
    if rng.random() < cfg.normal_fraction:
        return TrainingSample(src, src, torch.zeros(src.shape[-2:]), False, "normal")
    # The mix draw is consumed even without a pool so that mix_probability=0
    # and an absent pool follow identical random streams.
    use_generated = rng.random() < cfg.mix_probability
    if generated and use_generated:
        g = generated[int(rng.integers(0, len(generated)))]
        return TrainingSample(g.image, g.source, g.mask, True, "generated")
    if rng.random() < 0.5:
        if textures is not None and len(textures):
            tex = textures[int(rng.integers(0, len(textures)))]
        else:
            tex = normals[int(rng.integers(0, n))].flip(-1)
        img, mask = texture_blend_anomaly(rng, src, tex)
        return TrainingSample(img, src, mask, False, "blend")
    img, mask = cut_paste_anomaly(rng, src)
    return TrainingSample(img, src, mask, False, "cutpaste")


def sample_training_batch(rng: np.random.Generator, normals: torch.Tensor,
                          generated: Sequence[GeneratedExample],
                          textures: Optional[torch.Tensor],
                          cfg: DetectorTrainConfig) -> list[TrainingSample]:
    return [_make_sample(rng, normals, generated, textures, cfg)
            for _ in range(cfg.batch_size)]


def _collate(samples: list[TrainingSample]):
    images = torch.stack([s.image for s in samples])
    targets = torch.stack([s.recon_target for s in samples])
    masks = torch.stack([s.mask for s in samples])
    weak = torch.tensor([s.weak for s in samples])
    return images, targets, masks, weak


def train_detector(normals: torch.Tensor,
                   generated: Sequence[GeneratedExample],
                   config: Optional[DetectorTrainConfig] = None,
                   textures: Optional[torch.Tensor] = None,
                   log_path: str | Path | None = None,
                   log_fn=None) -> DetectorNets:
    """Train both nets jointly; returns them in eval mode.

    ``generated`` may be empty, in which case every anomalous slot uses
    a classic synthetic defect (the no-generation baseline).
    """
    cfg = config or DetectorTrainConfig()
    if normals.dim() != 4:
        raise DataError(f"expected (N,C,H,W) normals, got {tuple(normals.shape)}")
    if normals.shape[0] < 2:
        raise DataError(f"need at least 2 normal images, got {normals.shape[0]}")

    channels = normals.shape[1]
    recon = ReconstructiveNet(channels, cfg.base)
    disc = DiscriminativeNet(channels, cfg.base)
    params = list(recon.parameters()) + list(disc.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = numpy_generator(derive_seed(cfg.seed, "detector", "batches"))
    torch.manual_seed(derive_seed(cfg.seed, "detector", "init") % 2**31)

    rows: list[tuple[int, float, float, float]] = []
    rec_val = seg_val = float("nan")
    for it in range(cfg.iters):
        batch = sample_training_batch(rng, normals, generated, textures, cfg)
        images, targets, masks, weak = _collate(batch)

        recon_out = recon(images)
        prob = disc.defect_prob(images, recon_out)
        l_rec = reconstruction_loss(recon_out, targets, cfg.lambda_ssim)
        loss_map = focal_seg_loss(prob, masks, cfg.gamma, cfg.alpha)
        l_seg = weighted_seg_loss(loss_map, prob, masks, weak, cfg.tau)
        loss = l_rec + l_seg

        opt.zero_grad()
        loss.backward()
        opt.step()

        rec_val, seg_val = float(l_rec.detach()), float(l_seg.detach())
        if not math.isfinite(rec_val + seg_val):
            raise TrainingError(
                f"detector loss became non-finite at iteration {it}",
                last_state={"iteration": it, "recon": rec_val, "seg": seg_val},
            )
        if it % cfg.log_every == 0 or it == cfg.iters - 1:
            rows.append((it, rec_val, seg_val, rec_val + seg_val))
            if log_fn:
                log_fn(it, rec_val, seg_val)

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "recon_loss", "seg_loss", "total_loss"])
            writer.writerows(rows)

    nets = DetectorNets(recon, disc, channels,
                        metrics={"final_recon_loss": rec_val,
                                 "final_seg_loss": seg_val})
    return nets.eval()


@dataclass
class ScoreMap:
    pixel: torch.Tensor  # (H,W) defect probabilities
    image_score: float
    smooth_kernel: int


def _image_score(prob: torch.Tensor, kernel: int) -> tuple[float, int]:
    h, w = prob.shape[-2:]
    k = min(kernel, h, w)
    if k % 2 == 0:
        k -= 1
    k = max(k, 1)
    smoothed = F.avg_pool2d(prob.reshape(1, 1, h, w), k, stride=1, padding=k // 2)
    return float(smoothed.max()), k


def predict(nets: DetectorNets, image: torch.Tensor,
            smooth_kernel: int = 21) -> ScoreMap:
    """Score one (C,H,W) image.

    The image-level score is the maximum of the mean-filtered pixel
    map, which rewards spatially consistent detections over speckle.
    """
    if image.dim() != 3:
        raise DataError(f"expected (C,H,W) image, got {tuple(image.shape)}")
    prob = nets.score(image.unsqueeze(0))[0]
    score, k = _image_score(prob, smooth_kernel)
    return ScoreMap(pixel=prob, image_score=score, smooth_kernel=k)

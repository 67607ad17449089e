"""Few-shot anomaly embedding learned by inversion on a frozen backbone.

Given a handful of defective images with pixel masks, fit a single
conditioning vector so that the frozen denoiser, conditioned on it,
explains the defective regions.  The backbone never changes: only the
vector receives gradient.  Optionally the per-step loss is restricted
to the defect region so the vector captures the defect rather than the
surrounding normal texture.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from .diffusion import LoadedBackbone, add_noise
from .errors import DataError, ParameterError, ShapeError, TrainingError
from .seeding import derive_seed, torch_generator

EMBEDDING_SCHEMA_VERSION = 1


@dataclass
class SupportRecord:
    """One defective example: image (C,H,W) in [0,1] and binary mask (H,W)."""

    image: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.image.dim() != 3:
            raise ShapeError(f"support image must be (C,H,W), got {tuple(self.image.shape)}")
        if self.mask.shape != self.image.shape[-2:]:
            raise ShapeError(
                f"mask shape {tuple(self.mask.shape)} != image spatial "
                f"shape {tuple(self.image.shape[-2:])}"
            )
        vals = torch.unique(self.mask.float())
        if not bool(((vals == 0) | (vals == 1)).all()):
            raise DataError("support mask must be binary (0/1)")


@dataclass
class SupportSet:
    category: str
    anomaly_type: str
    records: list[SupportRecord]

    def __post_init__(self):
        if not self.records:
            raise DataError("support set is empty")

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class InversionConfig:
    iterations: int = 6000
    lr: float = 0.005
    mask_guided: bool = True
    token: str = "defect"
    init: str = "token"  # "token" | "zeros" | "random"
    k_shot: int = 0  # cap on support records used; 0 means all
    seed: int = 0
    log_every: int = 50
    divergence_factor: float = 50.0
    extras: dict = field(default_factory=dict)


@dataclass
class AnomalyEmbedding:
    """A learned conditioning vector plus provenance metadata."""

    vector: torch.Tensor
    category: str
    anomaly_type: str
    token: str
    iterations_run: int
    final_loss: float
    mask_guided: bool
    seed: int

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    def to_record(self) -> dict:
        return {
            "schema_version": EMBEDDING_SCHEMA_VERSION,
            "category": self.category,
            "anomaly_type": self.anomaly_type,
            "token": self.token,
            "dim": self.dim,
            "iterations_run": self.iterations_run,
            "final_loss": self.final_loss,
            "mask_guided": self.mask_guided,
            "seed": self.seed,
            "vector": [float(x) for x in self.vector.detach().double().tolist()],
        }

    @classmethod
    def from_record(cls, record: dict) -> "AnomalyEmbedding":
        version = record.get("schema_version")
        if version != EMBEDDING_SCHEMA_VERSION:
            raise DataError(f"unsupported embedding schema_version {version!r}")
        vec = torch.tensor(record["vector"], dtype=torch.float32)
        if vec.shape[0] != record["dim"]:
            raise DataError(
                f"embedding dim field {record['dim']} != vector length {vec.shape[0]}"
            )
        return cls(
            vector=vec,
            category=record["category"],
            anomaly_type=record["anomaly_type"],
            token=record["token"],
            iterations_run=record["iterations_run"],
            final_loss=record["final_loss"],
            mask_guided=record["mask_guided"],
            seed=record["seed"],
        )


def save_embedding(path: str | Path, embedding: AnomalyEmbedding) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(embedding.to_record(), indent=2) + "\n")


def load_embedding(path: str | Path) -> AnomalyEmbedding:
    return AnomalyEmbedding.from_record(json.loads(Path(path).read_text()))


def downsample_mask(mask: torch.Tensor, stride: int) -> torch.Tensor:
    """Pixel mask to latent resolution: a latent cell is set iff any
    pixel in its stride x stride block is set."""
    if stride == 1:
        return mask.float().clone()
    h, w = mask.shape[-2:]
    if h % stride or w % stride:
        raise ShapeError(f"mask shape {(h, w)} not divisible by stride {stride}")
    pooled = F.max_pool2d(mask.float().reshape(1, 1, h, w), kernel_size=stride)
    return pooled.reshape(h // stride, w // stride)


def masked_ldm_loss(model, schedule, z0: torch.Tensor, t: int,
                    cond: torch.Tensor, eps: torch.Tensor,
                    mask: torch.Tensor) -> torch.Tensor:
    """Noise-prediction MSE averaged over masked latent cells only.

    ``mask`` lives at latent resolution (h,w) and broadcasts across
    channels.  With an all-ones mask this equals the unmasked loss.
    """
    if mask.shape != z0.shape[-2:]:
        raise ShapeError(
            f"mask shape {tuple(mask.shape)} != latent spatial shape {tuple(z0.shape[-2:])}"
        )
    total = float(mask.sum())
    if total == 0:
        raise ParameterError("mask selects no latent cells")
    z_t = add_noise(schedule, z0, t, eps)
    eps_hat = model.predict_noise(z_t, t, cond)
    sq = (eps - eps_hat) ** 2
    channels = z0.shape[0] if z0.dim() == 3 else z0.shape[1]
    return (sq * mask).sum() / (total * channels)


def init_embedding(backbone: LoadedBackbone, config: InversionConfig) -> torch.Tensor:
    if config.init == "token":
        if backbone.encoder is None:
            raise ParameterError("backbone has no token encoder; use init='random'")
        return backbone.encoder.encode_token(config.token).clone()
    if config.init == "zeros":
        return torch.zeros(backbone.cond_dim)
    if config.init == "random":
        gen = torch_generator(derive_seed(config.seed, "embedding", "init"))
        return torch.randn(backbone.cond_dim, generator=gen) / math.sqrt(backbone.cond_dim)
    raise ParameterError(f"unknown init {config.init!r}")


def learn_embedding(backbone: LoadedBackbone, support: SupportSet,
                    config: Optional[InversionConfig] = None,
                    log_path: str | Path | None = None) -> AnomalyEmbedding:
    """Fit one conditioning vector to a few defective examples.

    Support records are visited round-robin, one per iteration, each
    with a fresh uniform timestep and noise draw.  Records whose mask
    vanishes after downsampling are dropped up front.  The backbone is
    verified bitwise unchanged at the end.
    """
    cfg = config or InversionConfig()
    if cfg.iterations < 1:
        raise ParameterError(f"iterations must be >= 1, got {cfg.iterations}")
    if cfg.lr <= 0:
        raise ParameterError(f"lr must be positive, got {cfg.lr}")

    ae = backbone.autoencoder
    schedule = backbone.schedule
    params_before = backbone.parameters_flat()

    latents: list[torch.Tensor] = []
    masks: list[Optional[torch.Tensor]] = []
    skipped = 0
    with torch.no_grad():
        for rec in support.records:
            z = ae.encode(rec.image).data
            m = downsample_mask(rec.mask, ae.stride) if cfg.mask_guided else None
            if m is not None and float(m.sum()) == 0:
                skipped += 1
                continue
            latents.append(z)
            masks.append(m)
    if not latents:
        raise DataError(
            f"all {len(support.records)} support masks vanished at latent "
            "resolution; defects are below the autoencoder stride"
        )

    v = init_embedding(backbone, cfg).requires_grad_(True)
    opt = torch.optim.SGD([v], lr=cfg.lr)
    gen = torch_generator(derive_seed(cfg.seed, "embedding", "train",
                                      support.category, support.anomaly_type))

    log_rows: list[tuple[int, int, int, float]] = []
    reference_loss: Optional[float] = None
    loss_val = float("nan")
    for it in range(cfg.iterations):
        idx = it % len(latents)
        z0 = latents[idx]
        t = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
        eps = torch.randn(z0.shape, generator=gen)
        if masks[idx] is not None:
            loss = masked_ldm_loss(backbone.denoiser, schedule, z0, t, v, eps,
                                   masks[idx])
        else:
            z_t = add_noise(schedule, z0, t, eps)
            loss = ((eps - backbone.denoiser.predict_noise(z_t, t, v)) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()

        loss_val = float(loss.detach())
        if reference_loss is None:
            reference_loss = max(loss_val, 1e-8)
        if not math.isfinite(loss_val) or loss_val > cfg.divergence_factor * reference_loss:
            raise TrainingError(
                f"embedding inversion diverged at iteration {it} "
                f"(loss {loss_val:.4g} vs reference {reference_loss:.4g}); "
                "lower lr",
                last_state={"iteration": it, "loss": loss_val,
                            "vector": v.detach().clone()},
            )
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            log_rows.append((it, idx, t, loss_val))

    params_after = backbone.parameters_flat()
    if not torch.equal(params_before, params_after):
        raise TrainingError("backbone parameters changed during inversion")

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "record", "timestep", "loss"])
            writer.writerows(log_rows)

    return AnomalyEmbedding(
        vector=v.detach().clone(),
        category=support.category,
        anomaly_type=support.anomaly_type,
        token=cfg.token,
        iterations_run=cfg.iterations,
        final_loss=loss_val,
        mask_guided=cfg.mask_guided,
        seed=cfg.seed,
    )

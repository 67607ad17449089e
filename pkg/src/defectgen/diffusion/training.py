"""Training for the tiny built-in backbone.

Two phases: fit the autoencoder to reconstruct images, then fit the
noise predictor on standardized latents.  The pretraining corpus is the
given normal set plus procedurally perturbed variants (dark and bright
blobs, noise patches, shadows), so the model's distribution has
defect-like modes an inversion can later select.  Conditioning vectors
come from a fixed projection of cheap image statistics, which makes the
conditioning pathway informative instead of decorative; it is dropped
to zero on a fraction of samples so unconditional sampling also works.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from ..errors import DataError, TrainingError
from ..seeding import derive_seed, torch_generator
from .backbone import (ConditionedDenoiser, ConvAutoencoder,
                       IdentityAutoencoder, LoadedBackbone, TokenHashEncoder)
from .ops import add_noise
from .schedule import make_schedule

_FEATURE_PROJECTION_SEED = 0x5EED_FEA7


@dataclass
class BackboneTrainConfig:
    # beta_max is large because T is small: the forward process must end
    # near pure noise (terminal alpha_bar ~ e^-10) for sampling to start
    # from N(0,1) in distribution.
    timesteps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.2
    autoencoder: str = "conv"  # "conv" or "identity"
    latent_channels: int = 4
    ae_base: int = 16
    ae_iters: int = 600
    ae_lr: float = 2e-3
    recon_tolerance: float = 0.03  # mean absolute error, images in [0,1]
    denoiser_base: int = 32
    cond_dim: int = 32
    denoise_iters: int = 1500
    denoise_lr: float = 2e-3
    batch_size: int = 8
    holdout_fraction: float = 0.1
    augment_corpus: bool = True
    cond_dropout: float = 0.1
    seed: int = 0
    extras: dict = field(default_factory=dict)


def image_features(images: torch.Tensor) -> torch.Tensor:
    """Position-invariant content statistics for a (B,C,H,W) batch, (B,20).

    Channel means, contrast, tail quantiles, and a 14-bin luminance
    histogram.  Invariant to where content sits, so the same descriptor
    fits a defect regardless of its position; deterministic in pixels.
    """
    if images.dim() != 4:
        raise DataError(f"expected (B,C,H,W), got {tuple(images.shape)}")
    b, c, _, _ = images.shape
    lum = images.mean(dim=1)
    flat = lum.reshape(b, -1).clamp(0.0, 1.0 - 1e-6)
    q = torch.quantile(flat, torch.tensor([0.05, 0.95]), dim=1).T
    edges = torch.linspace(0.0, 1.0, 15)
    hist = torch.stack([
        ((flat >= edges[i]) & (flat < edges[i + 1])).float().mean(dim=1)
        for i in range(14)
    ], dim=1)
    chan_means = images.mean(dim=(2, 3))
    if c < 3:
        chan_means = torch.cat([chan_means,
                                chan_means[:, :1].expand(b, 3 - c)], dim=1)
    feats = torch.cat([
        chan_means[:, :3],
        flat.std(dim=1, keepdim=True),
        q,
        hist,
    ], dim=1)
    return feats


def feature_condition(images: torch.Tensor, cond_dim: int) -> torch.Tensor:
    """Project image statistics to a conditioning vector, (B, cond_dim).

    The projection matrix and per-feature weights are fixed (seeded), so
    the same image always maps to the same vector regardless of training
    run.  Histogram bins get the largest weight: palette shifts are the
    signal a defect leaves in these features.
    """
    feats = image_features(images)
    weights = torch.cat([
        torch.full((3,), 2.0),   # channel means
        torch.full((1,), 4.0),   # contrast
        torch.full((2,), 2.0),   # tail quantiles
        torch.full((14,), 12.0),  # luminance histogram
    ])
    gen = torch.Generator().manual_seed(_FEATURE_PROJECTION_SEED)
    proj = torch.randn(feats.shape[1], cond_dim, generator=gen) / feats.shape[1] ** 0.5
    return (feats * weights) @ proj


def _stamp_ellipse(img: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    h, w = img.shape[-2:]
    cy = float(torch.empty(1).uniform_(0.2, 0.8, generator=gen)) * h
    cx = float(torch.empty(1).uniform_(0.2, 0.8, generator=gen)) * w
    ry = float(torch.empty(1).uniform_(0.06, 0.22, generator=gen)) * h
    rx = float(torch.empty(1).uniform_(0.06, 0.22, generator=gen)) * w
    ys = torch.arange(h).view(-1, 1).float()
    xs = torch.arange(w).view(1, -1).float()
    d2 = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2
    profile = (d2 <= 1.0).float() * (0.4 + 0.6 * (1.0 - d2).clamp(0.0, 1.0))
    strength = float(torch.empty(1).uniform_(0.4, 0.9, generator=gen))
    if float(torch.rand(1, generator=gen)) < 0.5:
        return (img * (1.0 - strength * profile)).clamp(0.0, 1.0)
    return (img + strength * profile * (1.0 - img)).clamp(0.0, 1.0)


def _stamp_noise_patch(img: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    h, w = img.shape[-2:]
    ph = int(torch.randint(h // 8, h // 3 + 1, (1,), generator=gen))
    pw = int(torch.randint(w // 8, w // 3 + 1, (1,), generator=gen))
    y = int(torch.randint(0, h - ph + 1, (1,), generator=gen))
    x = int(torch.randint(0, w - pw + 1, (1,), generator=gen))
    out = img.clone()
    out[:, y:y + ph, x:x + pw] = torch.rand(
        (img.shape[0], ph, pw), generator=gen)
    return out


def _stamp_shadow(img: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    h, w = img.shape[-2:]
    horizontal = float(torch.rand(1, generator=gen)) < 0.5
    ramp = torch.linspace(0.0, 1.0, w if horizontal else h)
    field = ramp.view(1, -1).expand(h, w) if horizontal else ramp.view(-1, 1).expand(h, w)
    if float(torch.rand(1, generator=gen)) < 0.5:
        field = 1.0 - field
    depth = float(torch.empty(1).uniform_(0.2, 0.5, generator=gen))
    return (img * (1.0 - depth * field)).clamp(0.0, 1.0)


def perturb_image(img: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """One random defect-like perturbation, for corpus diversity."""
    r = float(torch.rand(1, generator=gen))
    if r < 0.5:
        return _stamp_ellipse(img, gen)
    if r < 0.75:
        return _stamp_noise_patch(img, gen)
    return _stamp_shadow(img, gen)


def _build_corpus(images: torch.Tensor, cfg: BackboneTrainConfig) -> torch.Tensor:
    if not cfg.augment_corpus:
        return images
    gen = torch_generator(derive_seed(cfg.seed, "backbone", "corpus"))
    variants = [perturb_image(images[i], gen) for i in range(images.shape[0])]
    return torch.cat([images, torch.stack(variants)])


def _batches(n: int, batch_size: int, gen: torch.Generator):
    idx = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield idx[i:i + batch_size]


def train_tiny_backbone(images: torch.Tensor,
                        config: Optional[BackboneTrainConfig] = None,
                        log_fn=None) -> LoadedBackbone:
    """Train autoencoder + denoiser on a stack of normal images (N,C,H,W).

    Raises TrainingError if the autoencoder misses its reconstruction
    tolerance or the held-out denoising loss fails to improve.
    """
    cfg = config or BackboneTrainConfig()
    if images.dim() != 4:
        raise DataError(f"expected (N,C,H,W) images, got {tuple(images.shape)}")
    if images.shape[0] < 4:
        raise DataError(f"need at least 4 images to train a backbone, got {images.shape[0]}")
    corpus = _build_corpus(images.float(), cfg)
    n = corpus.shape[0]

    n_hold = max(1, int(round(n * cfg.holdout_fraction)))
    split_gen = torch_generator(derive_seed(cfg.seed, "backbone", "split"))
    perm = torch.randperm(n, generator=split_gen)
    hold, train = corpus[perm[:n_hold]], corpus[perm[n_hold:]]

    # Phase 1: autoencoder.
    if cfg.autoencoder == "identity":
        ae = IdentityAutoencoder(channels=corpus.shape[1])
        recon_err = 0.0
    elif cfg.autoencoder == "conv":
        ae = ConvAutoencoder(channels=corpus.shape[1],
                             latent_channels=cfg.latent_channels, base=cfg.ae_base)
        opt = torch.optim.Adam(ae.parameters(), lr=cfg.ae_lr)
        gen = torch_generator(derive_seed(cfg.seed, "backbone", "ae"))
        it = 0
        while it < cfg.ae_iters:
            for batch_idx in _batches(train.shape[0], cfg.batch_size, gen):
                x = train[batch_idx]
                x_hat = torch.sigmoid(ae.dec(ae.enc(x)))
                loss = ((x - x_hat) ** 2).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
                it += 1
                if log_fn and it % 100 == 0:
                    log_fn("ae", it, float(loss))
                if it >= cfg.ae_iters:
                    break
        ae.eval()
        with torch.no_grad():
            z = ae.enc(train)
            ae.latent_mean.copy_(z.mean(dim=(0, 2, 3)))
            ae.latent_std.copy_(z.std(dim=(0, 2, 3)).clamp_min(1e-6))
            recon = ae.decode(ae.encode(hold))
            recon_err = float((hold - recon).abs().mean())
        if recon_err > cfg.recon_tolerance:
            raise TrainingError(
                f"autoencoder reconstruction error {recon_err:.4f} exceeds "
                f"tolerance {cfg.recon_tolerance}; raise ae_iters or capacity"
            )
    else:
        raise DataError(f"unknown autoencoder kind {cfg.autoencoder!r}")

    # Phase 2: denoiser on standardized latents with feature conditioning.
    schedule = make_schedule(cfg.timesteps, beta_min=cfg.beta_min,
                             beta_max=cfg.beta_max)
    with torch.no_grad():
        z_train = ae.encode(train).data
        z_hold = ae.encode(hold).data
        cond_train = feature_condition(train, cfg.cond_dim)
        cond_hold = feature_condition(hold, cfg.cond_dim)

    den = ConditionedDenoiser(latent_channels=z_train.shape[1],
                              base=cfg.denoiser_base, cond_dim=cfg.cond_dim)
    opt = torch.optim.Adam(den.parameters(), lr=cfg.denoise_lr)
    gen = torch_generator(derive_seed(cfg.seed, "backbone", "denoise"))
    eval_seed = derive_seed(cfg.seed, "backbone", "denoise-eval")

    def holdout_loss() -> float:
        # Fixed noise draws and a fixed timestep ladder so the number is
        # comparable across evaluations.
        egen = torch_generator(eval_seed)
        total = 0.0
        with torch.no_grad():
            for b in range(z_hold.shape[0]):
                z0 = z_hold[b:b + 1]
                t = (b * 37) % schedule.T + 1
                eps = torch.randn(z0.shape, generator=egen)
                z_t = add_noise(schedule, z0, t, eps)
                pred = den.predict_noise(z_t, t, cond_hold[b:b + 1])
                total += float(((eps - pred) ** 2).mean())
        return total / z_hold.shape[0]

    loss_start = holdout_loss()
    it = 0
    while it < cfg.denoise_iters:
        for batch_idx in _batches(z_train.shape[0], cfg.batch_size, gen):
            z0 = z_train[batch_idx]
            b = z0.shape[0]
            t = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
            eps = torch.randn(z0.shape, generator=gen)
            cond = cond_train[batch_idx]
            drop = torch.rand(b, 1, generator=gen) < cfg.cond_dropout
            cond = torch.where(drop, torch.zeros_like(cond), cond)
            z_t = add_noise(schedule, z0, t, eps)
            loss = ((eps - den.predict_noise(z_t, t, cond)) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            it += 1
            if log_fn and it % 100 == 0:
                log_fn("denoise", it, float(loss))
            if it >= cfg.denoise_iters:
                break
    den.eval()
    loss_end = holdout_loss()
    if not loss_end < loss_start:
        raise TrainingError(
            f"held-out denoising loss did not improve ({loss_start:.4f} -> "
            f"{loss_end:.4f}); raise denoise_iters or lower the rate",
            last_state={"loss_start": loss_start, "loss_end": loss_end},
        )

    return LoadedBackbone(
        autoencoder=ae,
        denoiser=den,
        schedule=schedule,
        cond_dim=cfg.cond_dim,
        encoder=TokenHashEncoder(cfg.cond_dim),
        metrics={"recon_error": recon_err, "denoise_loss_start": loss_start,
                 "denoise_loss_end": loss_end},
    )

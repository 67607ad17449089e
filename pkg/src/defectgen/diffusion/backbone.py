"""Autoencoder / denoiser backbone and its serialization.

The trainable reference implementations here are deliberately tiny: a
stride-2 convolutional autoencoder (or an exact identity autoencoder) and
a small U-Net-style noise predictor with one cross-attention injection
point for the conditioning vector.  Externally supplied pretrained
backbones enter through the adapter registry at the bottom of the module.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ParameterError

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class Latent:
    """A latent-space tensor plus its spatial stride relative to pixels."""

    data: torch.Tensor
    stride: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ParameterError(f"stride must be >= 1, got {self.stride}")
        if not torch.isfinite(self.data).all():
            raise ParameterError("latent contains non-finite entries")


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.device)
    args = t[:, None].double() * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _flat_params(module: nn.Module) -> torch.Tensor:
    """Detached flat copy of all parameters, for freeze checks."""
    parts = [p.detach().reshape(-1).clone() for p in module.parameters()]
    if not parts:
        return torch.zeros(0)
    return torch.cat(parts)


class IdentityAutoencoder(nn.Module):
    """Stride-1 autoencoder with exact encode/decode round trip."""

    stride = 1

    def __init__(self, channels: int = 3):
        super().__init__()
        self.channels = channels
        self.latent_channels = channels

    def encode(self, image: torch.Tensor) -> Latent:
        return Latent(image.clone(), stride=1)

    def decode(self, latent: Latent | torch.Tensor) -> torch.Tensor:
        data = latent.data if isinstance(latent, Latent) else latent
        return data.clone()

    def parameters_flat(self) -> torch.Tensor:
        return _flat_params(self)

    def config(self) -> dict:
        return {"kind": "identity", "channels": self.channels}


class ConvAutoencoder(nn.Module):
    """Small stride-2 convolutional autoencoder.

    After training, per-channel latent mean/std are recorded so that
    encoded latents are standardized to roughly unit scale, which is what
    the diffusion process assumes at its terminal step.
    """

    stride = 2

    def __init__(self, channels: int = 3, latent_channels: int = 4, base: int = 16):
        super().__init__()
        self.channels = channels
        self.latent_channels = latent_channels
        self.base = base
        self.enc = nn.Sequential(
            nn.Conv2d(channels, base, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, base, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, latent_channels, 4, stride=2, padding=1),
        )
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(latent_channels, base, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, base, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, channels, 3, padding=1),
        )
        # Standardization constants, filled in by training.
        self.register_buffer("latent_mean", torch.zeros(latent_channels))
        self.register_buffer("latent_std", torch.ones(latent_channels))

    def encode_raw(self, image: torch.Tensor) -> torch.Tensor:
        single = image.dim() == 3
        x = image.unsqueeze(0) if single else image
        z = self.enc(x)
        return z.squeeze(0) if single else z

    def encode(self, image: torch.Tensor) -> Latent:
        z = self.encode_raw(image)
        mean = self.latent_mean.view(-1, 1, 1)
        std = self.latent_std.view(-1, 1, 1)
        return Latent((z - mean) / std, stride=self.stride)

    def decode(self, latent: Latent | torch.Tensor) -> torch.Tensor:
        z = latent.data if isinstance(latent, Latent) else latent
        single = z.dim() == 3
        if single:
            z = z.unsqueeze(0)
        mean = self.latent_mean.view(1, -1, 1, 1)
        std = self.latent_std.view(1, -1, 1, 1)
        x = torch.sigmoid(self.dec(z * std + mean))
        return x.squeeze(0) if single else x

    def parameters_flat(self) -> torch.Tensor:
        return _flat_params(self)

    def config(self) -> dict:
        return {
            "kind": "conv",
            "channels": self.channels,
            "latent_channels": self.latent_channels,
            "base": self.base,
        }


class CrossAttention(nn.Module):
    """Cross-attention of spatial features over a conditioning context.

    The context here is the raw conditioning vector presented as a
    single token, filling the slot a text-encoder output would occupy.
    """

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(cond_dim, channels, bias=False)
        self.v = nn.Linear(cond_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)
        self.scale = channels**-0.5

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        ctx = cond.unsqueeze(1)  # (B, 1 token, d)
        q = self.q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k = self.k(ctx)
        v = self.v(ctx)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ConditionedDenoiser(nn.Module):
    """Tiny U-Net-style noise predictor with one conditioning injection.

    predict_noise(z_t, t, cond) returns a tensor of the same shape as
    z_t.  ``t`` is 1-based; ``cond`` is the raw conditioning vector.
    """

    def __init__(self, latent_channels: int = 4, base: int = 32, cond_dim: int = 32,
                 time_dim: int = 64):
        super().__init__()
        self.latent_channels = latent_channels
        self.base = base
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        # Conditioning joins the timestep embedding so every block sees it,
        # not just the mid attention.
        self.cond_mlp = nn.Sequential(
            nn.Linear(cond_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.conv_in = nn.Conv2d(latent_channels, base, 3, padding=1)
        self.down_block = ResBlock(base, base, time_dim)
        self.downsample = nn.Conv2d(base, base, 4, stride=2, padding=1)
        self.mid_block1 = ResBlock(base, base * 2, time_dim)
        self.mid_attn = CrossAttention(base * 2, cond_dim)
        self.mid_block2 = ResBlock(base * 2, base * 2, time_dim)
        self.upsample = nn.ConvTranspose2d(base * 2, base, 4, stride=2, padding=1)
        self.up_block = ResBlock(base * 2, base, time_dim)
        self.conv_out = nn.Conv2d(base, latent_channels, 3, padding=1)

    def predict_noise(self, z_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        single = z_t.dim() == 3
        x = z_t.unsqueeze(0) if single else z_t
        b = x.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.long)
        if cond.dim() == 1:
            cond = cond.unsqueeze(0).expand(b, -1)
        if cond.shape[-1] != self.cond_dim:
            raise ConfigError(
                f"conditioning dim {cond.shape[-1]} != model dim {self.cond_dim}"
            )
        cond = cond.to(x.dtype)
        t_emb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x.dtype))
        t_emb = t_emb + self.cond_mlp(cond)

        h0 = self.conv_in(x)
        h1 = self.down_block(h0, t_emb)
        m = self.downsample(h1)
        m = self.mid_block1(m, t_emb)
        m = self.mid_attn(m, cond)
        m = self.mid_block2(m, t_emb)
        u = self.upsample(m)
        u = self.up_block(torch.cat([u, h1], dim=1), t_emb)
        out = self.conv_out(u)
        return out.squeeze(0) if single else out

    forward = predict_noise

    def parameters_flat(self) -> torch.Tensor:
        return _flat_params(self)

    def config(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "base": self.base,
            "cond_dim": self.cond_dim,
            "time_dim": self.time_dim,
        }


class TokenHashEncoder:
    """Deterministic stand-in for a text encoder.

    Each token maps to a fixed pseudo-random vector with expected unit
    norm, derived from a hash of the token, so repeated calls agree and
    distinct tokens (almost surely) differ.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ParameterError(f"encoder dim must be >= 1, got {dim}")
        self.dim = dim

    def encode_token(self, token: str) -> torch.Tensor:
        if not token:
            raise ParameterError("token must be nonempty")
        seed = int.from_bytes(
            hashlib.sha256(token.encode("utf-8")).digest()[:8], "big"
        ) & 0x7FFF_FFFF_FFFF_FFFF
        gen = torch.Generator().manual_seed(seed)
        return torch.randn(self.dim, generator=gen) / math.sqrt(self.dim)


# ---------------------------------------------------------------------------
# Checkpointing and external-backbone adapters
# ---------------------------------------------------------------------------


@dataclass
class LoadedBackbone:
    """A ready-to-use backbone bundle.

    External adapters return this as well, carrying the external model's
    own schedule rather than a locally constructed one.
    """

    autoencoder: nn.Module
    denoiser: ConditionedDenoiser
    schedule: "NoiseSchedule"
    cond_dim: int
    encoder: Optional[TokenHashEncoder] = None
    metrics: Optional[dict] = None

    def parameters_flat(self) -> torch.Tensor:
        return torch.cat(
            [self.autoencoder.parameters_flat(), self.denoiser.parameters_flat()]
        )


def save_backbone(path: str | Path, backbone: LoadedBackbone,
                  schedule_args: dict | None = None) -> None:
    from .schedule import NoiseSchedule  # local import to avoid cycle

    sched = backbone.schedule
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": "tiny_backbone",
        "autoencoder": {
            "config": backbone.autoencoder.config(),
            "state": backbone.autoencoder.state_dict(),
        },
        "denoiser": {
            "config": backbone.denoiser.config(),
            "state": backbone.denoiser.state_dict(),
        },
        "schedule": schedule_args
        or {"T": sched.T, "kind": "linear",
            "beta_min": float(sched.betas[0]), "beta_max": float(sched.betas[-1])},
        "cond_dim": backbone.cond_dim,
        "metrics": backbone.metrics or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def _build_autoencoder(cfg: dict) -> nn.Module:
    if cfg["kind"] == "identity":
        return IdentityAutoencoder(channels=cfg["channels"])
    if cfg["kind"] == "conv":
        return ConvAutoencoder(
            channels=cfg["channels"],
            latent_channels=cfg["latent_channels"],
            base=cfg["base"],
        )
    raise ConfigError(f"unknown autoencoder kind {cfg['kind']!r}")


def load_backbone(path: str | Path) -> LoadedBackbone:
    from .schedule import make_schedule

    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported checkpoint schema_version {version!r} in {path}"
        )
    ae = _build_autoencoder(payload["autoencoder"]["config"])
    ae.load_state_dict(payload["autoencoder"]["state"])
    den = ConditionedDenoiser(**payload["denoiser"]["config"])
    den.load_state_dict(payload["denoiser"]["state"])
    ae.eval()
    den.eval()
    sched = make_schedule(**payload["schedule"])
    cond_dim = payload["cond_dim"]
    return LoadedBackbone(
        autoencoder=ae,
        denoiser=den,
        schedule=sched,
        cond_dim=cond_dim,
        encoder=TokenHashEncoder(cond_dim),
        metrics=payload.get("metrics"),
    )


BackboneLoader = Callable[[str], LoadedBackbone]
_BACKBONE_ADAPTERS: dict[str, BackboneLoader] = {}


def register_backbone_adapter(name: str, loader: BackboneLoader) -> None:
    """Register a loader for externally supplied pretrained weights.

    The loader receives the location string after the ``name:`` prefix
    and must return a LoadedBackbone carrying the external model's own
    schedule and conditioning dimension.
    """
    _BACKBONE_ADAPTERS[name] = loader


def load_external_backbone(spec: str) -> LoadedBackbone:
    """Load a backbone through a registered adapter, spec ``name:location``."""
    name, sep, location = spec.partition(":")
    if not sep:
        raise ConfigError(f"backbone spec {spec!r} is not of the form 'adapter:location'")
    try:
        loader = _BACKBONE_ADAPTERS[name]
    except KeyError:
        known = ", ".join(sorted(_BACKBONE_ADAPTERS)) or "none"
        raise ConfigError(f"no backbone adapter named {name!r} (registered: {known})")
    return loader(location)


register_backbone_adapter("toy", load_backbone)

"""Reconstructive and discriminative networks.

Both are small U-Nets.  The reconstructive net maps an image to its
defect-free version; the discriminative net consumes the image and the
reconstruction stacked on channels and scores each pixel as defective.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ShapeError

DETECTOR_SCHEMA_VERSION = 1


def _block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.GroupNorm(min(8, out_ch), out_ch),
        nn.SiLU(),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.GroupNorm(min(8, out_ch), out_ch),
        nn.SiLU(),
    )


class UNet(nn.Module):
    """Two-level U-Net with skip connections; spatial size preserved."""

    def __init__(self, in_channels: int, out_channels: int, base: int = 32):
        super().__init__()
        self.enc1 = _block(in_channels, base)
        self.enc2 = _block(base, base * 2)
        self.bottleneck = _block(base * 2, base * 4)
        self.up2 = nn.ConvTranspose2d(base * 4, base * 2, 2, stride=2)
        self.dec2 = _block(base * 4, base * 2)
        self.up1 = nn.ConvTranspose2d(base * 2, base, 2, stride=2)
        self.dec1 = _block(base * 2, base)
        self.head = nn.Conv2d(base, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"spatial size {tuple(x.shape[-2:])} must be divisible by 4")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        b = self.bottleneck(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)


class ReconstructiveNet(nn.Module):
    def __init__(self, channels: int = 3, base: int = 32):
        super().__init__()
        self.channels = channels
        self.base = base
        self.net = UNet(channels, channels, base)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x))


class DiscriminativeNet(nn.Module):
    """Scores pixels from the (image, reconstruction) pair.

    Two-channel output; defect_prob applies softmax and returns the
    defect channel.
    """

    def __init__(self, channels: int = 3, base: int = 32):
        super().__init__()
        self.channels = channels
        self.base = base
        self.net = UNet(channels * 2, 2, base)

    def forward(self, image: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
        if image.shape != recon.shape:
            raise ShapeError(
                f"image {tuple(image.shape)} vs reconstruction {tuple(recon.shape)}"
            )
        return self.net(torch.cat([image, recon], dim=1))

    def defect_prob(self, image: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
        logits = self.forward(image, recon)
        return torch.softmax(logits, dim=1)[:, 1]


@dataclass
class DetectorNets:
    reconstructive: ReconstructiveNet
    discriminative: DiscriminativeNet
    channels: int
    metrics: dict | None = None

    def eval(self) -> "DetectorNets":
        self.reconstructive.eval()
        self.discriminative.eval()
        return self

    def score(self, images: torch.Tensor) -> torch.Tensor:
        """Per-pixel defect probabilities for a (B,C,H,W) batch."""
        with torch.no_grad():
            recon = self.reconstructive(images)
            return self.discriminative.defect_prob(images, recon)


def save_detector(path: str | Path, nets: DetectorNets) -> None:
    payload = {
        "schema_version": DETECTOR_SCHEMA_VERSION,
        "channels": nets.channels,
        "recon_base": nets.reconstructive.base,
        "disc_base": nets.discriminative.base,
        "reconstructive": nets.reconstructive.state_dict(),
        "discriminative": nets.discriminative.state_dict(),
        "metrics": nets.metrics or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_detector(path: str | Path) -> DetectorNets:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("schema_version")
    if version != DETECTOR_SCHEMA_VERSION:
        raise ConfigError(f"unsupported detector schema_version {version!r} in {path}")
    recon = ReconstructiveNet(payload["channels"], payload["recon_base"])
    recon.load_state_dict(payload["reconstructive"])
    disc = DiscriminativeNet(payload["channels"], payload["disc_base"])
    disc.load_state_dict(payload["discriminative"])
    nets = DetectorNets(recon, disc, payload["channels"], payload.get("metrics"))
    return nets.eval()

"""Classic synthetic defects: noise-shaped texture blends and cut-paste.

These provide the exact-mask half of the detector's training diet; the
other half comes from the generated defect pool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ParameterError, ShapeError


@dataclass
class TrainingSample:
    """One detector training example.

    ``weak`` marks box labels (mask covers more than the true defect);
    exact masks and all-zero normal masks keep it False.
    """

    image: torch.Tensor        # (C,H,W) in [0,1]
    recon_target: torch.Tensor  # clean version of image
    mask: torch.Tensor         # (H,W) binary
    weak: bool
    kind: str                  # "normal" | "generated" | "blend" | "cutpaste"


def _fade(t: np.ndarray) -> np.ndarray:
    return 6 * t**5 - 15 * t**4 + 10 * t**3


def perlin_noise(rng: np.random.Generator, shape: tuple[int, int],
                 res: tuple[int, int]) -> np.ndarray:
    """Gradient noise on a res-cell lattice, roughly in [-1, 1]."""
    h, w = shape
    ry, rx = res
    if h % ry or w % rx:
        raise ShapeError(f"shape {shape} not divisible by lattice {res}")
    dy, dx = h // ry, w // rx

    angles = 2.0 * np.pi * rng.random((ry + 1, rx + 1))
    gradients = np.dstack((np.cos(angles), np.sin(angles)))
    g00 = gradients[:-1, :-1].repeat(dy, 0).repeat(dx, 1)
    g10 = gradients[1:, :-1].repeat(dy, 0).repeat(dx, 1)
    g01 = gradients[:-1, 1:].repeat(dy, 0).repeat(dx, 1)
    g11 = gradients[1:, 1:].repeat(dy, 0).repeat(dx, 1)

    ys = (np.arange(h) % dy) / dy
    xs = (np.arange(w) % dx) / dx
    gy, gx = np.meshgrid(ys, xs, indexing="ij")

    n00 = g00[..., 0] * gy + g00[..., 1] * gx
    n10 = g10[..., 0] * (gy - 1) + g10[..., 1] * gx
    n01 = g01[..., 0] * gy + g01[..., 1] * (gx - 1)
    n11 = g11[..., 0] * (gy - 1) + g11[..., 1] * (gx - 1)

    ty, tx = _fade(gy), _fade(gx)
    n0 = n00 * (1 - ty) + n10 * ty
    n1 = n01 * (1 - ty) + n11 * ty
    return np.sqrt(2.0) * (n0 * (1 - tx) + n1 * tx)


def _lattice_options(dim: int, max_exp: int) -> list[int]:
    return [2**k for k in range(max_exp + 1) if dim % 2**k == 0]


def perlin_mask(rng: np.random.Generator, shape: tuple[int, int],
                max_exp: int = 4, threshold: float = 0.5,
                retries: int = 5) -> np.ndarray:
    """Blobby binary mask from thresholded gradient noise.

    Lattice sizes are random powers of two that divide the image.  May
    come back empty if every retry thresholds to nothing; callers treat
    that as a normal (defect-free) sample.
    """
    ry_opts = _lattice_options(shape[0], max_exp)
    rx_opts = _lattice_options(shape[1], max_exp)
    if not ry_opts or not rx_opts:
        raise ParameterError(f"no power-of-two lattice divides shape {shape}")
    mask = np.zeros(shape, dtype=np.float32)
    for _ in range(max(1, retries)):
        ry = int(rng.choice(ry_opts))
        rx = int(rng.choice(rx_opts))
        noise = perlin_noise(rng, shape, (ry, rx))
        mask = (noise > threshold).astype(np.float32)
        if mask.any():
            break
    return mask


def _match_size(texture: torch.Tensor, shape: tuple[int, int]) -> torch.Tensor:
    if texture.shape[-2:] == shape:
        return texture
    return F.interpolate(texture.unsqueeze(0), size=shape, mode="bilinear",
                         align_corners=False).squeeze(0)


def texture_blend_anomaly(rng: np.random.Generator, image: torch.Tensor,
                          texture: torch.Tensor,
                          mask: np.ndarray | None = None,
                          opacity: float | None = None,
                          max_exp: int = 4) -> tuple[torch.Tensor, torch.Tensor]:
    """Blend foreign texture into the image under a noise-shaped mask.

    out = (1-M) * I + M * (beta * A + (1-beta) * I), beta the opacity.
    Returns (image, mask); the mask is exact.
    """
    if image.dim() != 3:
        raise ShapeError(f"image must be (C,H,W), got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if mask is None:
        mask = perlin_mask(rng, (h, w), max_exp=max_exp)
    m = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))
    if m.shape != (h, w):
        raise ShapeError(f"mask shape {tuple(m.shape)} != image spatial {(h, w)}")
    beta = float(rng.uniform(0.2, 0.9)) if opacity is None else float(opacity)
    tex = _match_size(texture, (h, w)).clamp(0.0, 1.0)
    out = (1.0 - m) * image + m * (beta * tex + (1.0 - beta) * image)
    return out.clamp(0.0, 1.0), m


def cut_paste_anomaly(rng: np.random.Generator, image: torch.Tensor,
                      size_range: tuple[float, float] = (0.1, 0.3),
                      ) -> tuple[torch.Tensor, torch.Tensor]:
    """Copy a random patch of the image onto a different location.

    Returns (image, mask) with the mask marking the paste destination.
    """
    if image.dim() != 3:
        raise ShapeError(f"image must be (C,H,W), got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    lo, hi = size_range
    ph = max(1, int(round(float(rng.uniform(lo, hi)) * h)))
    pw = max(1, int(round(float(rng.uniform(lo, hi)) * w)))
    sy = int(rng.integers(0, h - ph + 1))
    sx = int(rng.integers(0, w - pw + 1))
    dy = int(rng.integers(0, h - ph + 1))
    dx = int(rng.integers(0, w - pw + 1))
    out = image.clone()
    out[:, dy:dy + ph, dx:dx + pw] = image[:, sy:sy + ph, sx:sx + pw]
    mask = torch.zeros(h, w)
    mask[dy:dy + ph, dx:dx + pw] = 1.0
    return out, mask

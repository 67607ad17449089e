"""Procedural desk-scale dataset in the industrial train/test layout.

Normal images are smooth sinusoid textures; defects are dark blotches
with exactly known masks.  Everything is produced from a seed, so two
exports with the same config are byte-identical, which the caching and
reporting layers rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ParameterError
from .generation import save_image_png
from .seeding import derive_seed, numpy_generator

TEXTURE_FAMILIES = ("weave", "grain")


@dataclass
class ToyWorldConfig:
    image_size: int = 48
    channels: int = 3
    n_train: int = 96
    n_test_good: int = 12
    n_test_defect: int = 12
    k_support: int = 3
    categories: tuple[str, ...] = ("weave",)
    anomaly_types: tuple[str, ...] = ("blotch",)
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image_size % 4:
            raise ParameterError(f"image_size must be divisible by 4, got {self.image_size}")
        for cat in self.categories:
            if cat not in TEXTURE_FAMILIES:
                raise ParameterError(
                    f"unknown category {cat!r}; choose from {TEXTURE_FAMILIES}"
                )
        if self.anomaly_types != ("blotch",) and set(self.anomaly_types) - {"blotch", "bright"}:
            raise ParameterError(f"unknown anomaly types in {self.anomaly_types}")


def make_texture(rng: np.random.Generator, size: int, channels: int,
                 family: str = "weave") -> torch.Tensor:
    """One normal texture image (C,H,W) in [0,1]."""
    xs = np.arange(size) / size
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    if family == "weave":
        f1 = rng.uniform(3.0, 6.0)
        f2 = rng.uniform(3.0, 6.0)
        p1, p2 = rng.uniform(0, 2 * np.pi, 2)
        img = 0.55 + 0.18 * np.sin(2 * np.pi * f1 * gx + p1) * np.sin(
            2 * np.pi * f2 * gy + p2)
    elif family == "grain":
        f = rng.uniform(4.0, 8.0)
        theta = rng.uniform(-0.3, 0.3)
        p = rng.uniform(0, 2 * np.pi)
        coord = gx * np.cos(theta) + gy * np.sin(theta)
        img = 0.55 + 0.2 * np.sin(2 * np.pi * f * coord + p)
    else:
        raise ParameterError(f"unknown texture family {family!r}")
    img = img + rng.normal(0.0, 0.01, img.shape)
    tint = rng.uniform(0.92, 1.08, channels)
    out = np.stack([np.clip(img * t, 0.0, 1.0) for t in tint])
    return torch.from_numpy(out.astype(np.float32))


def make_blotch(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Elliptical defect profile and its exact binary mask, both (H,W)."""
    cy, cx = rng.uniform(0.25, 0.75, 2) * size
    ry = rng.uniform(0.07, 0.14) * size
    rx = rng.uniform(0.07, 0.14) * size
    theta = rng.uniform(0, np.pi)
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dy, dx = ys - cy, xs - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    d2 = (u / rx) ** 2 + (v / ry) ** 2
    mask = (d2 <= 1.0).astype(np.float32)
    # Effect stays >= 40% of full strength everywhere inside the mask so
    # the labeled region is actually altered, not just its center.
    profile = mask * (0.4 + 0.6 * np.clip(1.0 - d2, 0.0, 1.0))
    return profile.astype(np.float32), mask


def apply_anomaly(rng: np.random.Generator, image: torch.Tensor,
                  anomaly_type: str = "blotch") -> tuple[torch.Tensor, torch.Tensor]:
    """Stamp one defect onto a normal image; returns (image, exact mask)."""
    size = image.shape[-1]
    bright = anomaly_type == "bright"
    profile, mask = make_blotch(rng, size)
    # Subtle enough that localization is not trivially saturated.
    strength = float(rng.uniform(0.25, 0.5))
    prof = torch.from_numpy(profile)
    if bright:
        out = image + strength * prof * (1.0 - image)
    else:
        out = image * (1.0 - strength * prof)
    return out.clamp(0.0, 1.0), torch.from_numpy(mask)


def make_texture_bank(rng: np.random.Generator, n: int, size: int,
                      channels: int) -> torch.Tensor:
    """Foreign textures for classic blend defects: smoothed random fields."""
    bank = []
    for _ in range(n):
        field_hw = rng.random((size // 4, size // 4))
        up = np.kron(field_hw, np.ones((4, 4)))
        tint = rng.uniform(0.3, 1.0, channels)
        bank.append(np.stack([np.clip(up * t, 0.0, 1.0) for t in tint]))
    return torch.from_numpy(np.stack(bank).astype(np.float32))


def export_toy_world(root: str | Path, config: ToyWorldConfig | None = None) -> Path:
    """Write the full dataset tree under root and return root.

    Layout per category: train/good, test/good, test/<type>,
    ground_truth/<type> (masks named <id>_mask.png), and
    support/<type> holding k defective images with <id>_mask.png masks.
    """
    cfg = config or ToyWorldConfig()
    root = Path(root)
    for cat in cfg.categories:
        base = root / cat

        rng = numpy_generator(derive_seed(cfg.seed, "toy", cat, "train"))
        for i in range(cfg.n_train):
            img = make_texture(rng, cfg.image_size, cfg.channels, cat)
            save_image_png(base / "train" / "good" / f"{i:03d}.png", img)

        rng = numpy_generator(derive_seed(cfg.seed, "toy", cat, "test-good"))
        for i in range(cfg.n_test_good):
            img = make_texture(rng, cfg.image_size, cfg.channels, cat)
            save_image_png(base / "test" / "good" / f"{i:03d}.png", img)

        for atype in cfg.anomaly_types:
            rng = numpy_generator(derive_seed(cfg.seed, "toy", cat, "test", atype))
            for i in range(cfg.n_test_defect):
                img = make_texture(rng, cfg.image_size, cfg.channels, cat)
                bad, mask = apply_anomaly(rng, img, atype)
                save_image_png(base / "test" / atype / f"{i:03d}.png", bad)
                save_image_png(base / "ground_truth" / atype / f"{i:03d}_mask.png", mask)

            rng = numpy_generator(derive_seed(cfg.seed, "toy", cat, "support", atype))
            for i in range(cfg.k_support):
                img = make_texture(rng, cfg.image_size, cfg.channels, cat)
                bad, mask = apply_anomaly(rng, img, atype)
                save_image_png(base / "support" / atype / f"{i:03d}.png", bad)
                save_image_png(base / "support" / atype / f"{i:03d}_mask.png", mask)
    return root

"""Box-guided anomaly image generation.

The anomaly branch denoises pure noise under the learned embedding
while, after every reverse step, the latent outside the box is replaced
with the source image diffused to the same step.  Decoding then yields
an image that carries the defect inside the box on an otherwise intact
source; a final pixel-space composite makes the outside exactly equal
to the source.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .boxes import BoxMask, box_config_for, extract_foreground, sample_box
from .diffusion import LoadedBackbone, add_noise, denoise_step, step_schedule
from .embedding import AnomalyEmbedding, downsample_mask
from .errors import ParameterError, ShapeError
from .seeding import derive_seed, numpy_generator, torch_generator

MANIFEST_SCHEMA_VERSION = 1


def blend_latents(z_source: torch.Tensor, z_anomaly: torch.Tensor,
                  mask: torch.Tensor) -> torch.Tensor:
    """Keep z_anomaly inside the mask and z_source outside it."""
    if z_source.shape != z_anomaly.shape:
        raise ShapeError(
            f"latent shapes differ: {tuple(z_source.shape)} vs {tuple(z_anomaly.shape)}"
        )
    if mask.shape != z_source.shape[-2:]:
        raise ShapeError(
            f"mask shape {tuple(mask.shape)} != latent spatial shape "
            f"{tuple(z_source.shape[-2:])}"
        )
    return z_source * (1.0 - mask) + z_anomaly * mask


class _GuidedDenoiser:
    """Amplify the conditioning direction: e0 + g * (e_cond - e0)."""

    def __init__(self, model, scale: float):
        self.model = model
        self.scale = scale

    def predict_noise(self, z_t, t, cond):
        e_cond = self.model.predict_noise(z_t, t, cond)
        if self.scale == 1.0:
            return e_cond
        e_base = self.model.predict_noise(z_t, t, torch.zeros_like(cond))
        return e_base + self.scale * (e_cond - e_base)


def generate_anomaly(backbone: LoadedBackbone, embedding: AnomalyEmbedding,
                     source_image: torch.Tensor, box: BoxMask, *,
                     n_steps: int = 50, sampler: str = "deterministic",
                     guidance_scale: float = 1.0,
                     latent_clip: Optional[float] = 3.0,
                     seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Render one defective variant of a normal image.

    Returns (image, mask): the composited image (C,H,W) in [0,1] and the
    pixel-resolution box mask (H,W).  Pixels outside the mask are exactly
    the source pixels.  guidance_scale > 1 amplifies the embedding's
    pull relative to unconditional denoising.  latent_clip bounds the
    per-step clean-latent estimate; latents are standardized, so 3.0
    keeps the chain on-distribution without touching real detail.
    """
    if source_image.dim() != 3:
        raise ShapeError(f"source image must be (C,H,W), got {tuple(source_image.shape)}")
    if embedding.dim != backbone.cond_dim:
        raise ParameterError(
            f"embedding dim {embedding.dim} != backbone conditioning dim "
            f"{backbone.cond_dim}"
        )
    ae = backbone.autoencoder
    schedule = backbone.schedule
    denoiser = _GuidedDenoiser(backbone.denoiser, guidance_scale)
    h, w = source_image.shape[-2:]
    mask_px = torch.from_numpy(box.rasterize(h, w))
    gen = torch_generator(derive_seed(seed, "generate"))

    with torch.no_grad():
        z0 = ae.encode(source_image).data
        mask_lat = downsample_mask(mask_px, ae.stride)
        z = torch.randn(z0.shape, generator=gen)
        timesteps = step_schedule(schedule.T, min(n_steps, schedule.T))
        for i, t in enumerate(timesteps):
            t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
            z = denoise_step(denoiser, schedule, z, t, embedding.vector,
                             t_prev=t_prev, sampler=sampler, generator=gen,
                             clip_denoised=latent_clip)
            if t_prev > 0:
                eps = torch.randn(z0.shape, generator=gen)
                z_src = add_noise(schedule, z0, t_prev, eps)
            else:
                z_src = z0
            z = blend_latents(z_src, z, mask_lat)
        decoded = ae.decode(z).clamp(0.0, 1.0)

    image = source_image * (1.0 - mask_px) + decoded * mask_px
    return image, mask_px


@dataclass
class GenerationConfig:
    boxes_per_source: int = 2
    samples_per_box: int = 2
    n_steps: int = 50
    sampler: str = "deterministic"
    guidance_scale: float = 1.0
    latent_clip: Optional[float] = 3.0
    foreground_method: str = "auto"
    box_table: Optional[dict] = None
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.boxes_per_source < 1 or self.samples_per_box < 1:
            raise ParameterError("boxes_per_source and samples_per_box must be >= 1")


@dataclass
class GeneratedRecord:
    image_path: str
    mask_path: str
    source_id: str
    category: str
    anomaly_type: str
    box: BoxMask
    sample_index: int

    def to_dict(self) -> dict:
        return {
            "image": self.image_path,
            "mask": self.mask_path,
            "source": self.source_id,
            "category": self.category,
            "anomaly_type": self.anomaly_type,
            "box": self.box.to_dict(),
            "sample_index": self.sample_index,
        }


def save_image_png(path: str | Path, image: torch.Tensor | np.ndarray) -> None:
    """Write a (C,H,W) or (H,W) image in [0,1] as a lossless PNG."""
    arr = image.detach().cpu().numpy() if torch.is_tensor(image) else np.asarray(image)
    if arr.ndim == 3:
        arr = np.moveaxis(arr, 0, -1)
        if arr.shape[-1] == 1:
            arr = arr[..., 0]
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")


def load_image_png(path: str | Path, channels: int = 3) -> torch.Tensor:
    """Read a PNG into a (C,H,W) float tensor in [0,1]."""
    img = Image.open(path)
    img = img.convert("RGB" if channels == 3 else "L")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return torch.from_numpy(arr.copy())


def generate_dataset(backbone: LoadedBackbone, embedding: AnomalyEmbedding,
                     sources: Sequence[tuple[str, torch.Tensor]],
                     out_dir: str | Path,
                     config: Optional[GenerationConfig] = None,
                     log_fn=None) -> list[GeneratedRecord]:
    """Generate a defect set over the given normal sources and write it out.

    Layout under out_dir: <category>/<anomaly_type>/images/*.png and
    matching masks/*.png, plus a manifest.json listing every record with
    its box and source.  Output is deterministic in config.seed.
    """
    cfg = config or GenerationConfig()
    out_dir = Path(out_dir)
    base = out_dir / embedding.category / embedding.anomaly_type
    records: list[GeneratedRecord] = []

    for source_id, image in sources:
        fg = extract_foreground(image.numpy(), cfg.foreground_method)
        box_cfg = box_config_for(embedding.category, cfg.box_table)
        for b in range(cfg.boxes_per_source):
            rng = numpy_generator(derive_seed(cfg.seed, "box", source_id, str(b)))
            box = sample_box(rng, fg, box_cfg, embedding.category)
            for k in range(cfg.samples_per_box):
                sample_seed = derive_seed(cfg.seed, "sample", source_id, str(b), str(k))
                img, mask = generate_anomaly(
                    backbone, embedding, image, box,
                    n_steps=cfg.n_steps, sampler=cfg.sampler,
                    guidance_scale=cfg.guidance_scale,
                    latent_clip=cfg.latent_clip, seed=sample_seed,
                )
                stem = f"{source_id}_b{b}_s{k}"
                image_path = base / "images" / f"{stem}.png"
                mask_path = base / "masks" / f"{stem}.png"
                save_image_png(image_path, img)
                save_image_png(mask_path, mask)
                records.append(GeneratedRecord(
                    image_path=str(image_path.relative_to(out_dir)),
                    mask_path=str(mask_path.relative_to(out_dir)),
                    source_id=source_id,
                    category=embedding.category,
                    anomaly_type=embedding.anomaly_type,
                    box=box,
                    sample_index=k,
                ))
                if log_fn:
                    log_fn(source_id, b, k)

    write_manifest(out_dir / "manifest.json", records, cfg)
    return records


def write_manifest(path: str | Path, records: Sequence[GeneratedRecord],
                   config: GenerationConfig) -> None:
    payload = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "config": {
            "boxes_per_source": config.boxes_per_source,
            "samples_per_box": config.samples_per_box,
            "n_steps": config.n_steps,
            "sampler": config.sampler,
            "guidance_scale": config.guidance_scale,
            "latent_clip": config.latent_clip,
            "foreground_method": config.foreground_method,
            "seed": config.seed,
        },
        "count": len(records),
        "records": [r.to_dict() for r in records],
    }
    path = Path(path)
    existing = []
    if path.exists():
        old = json.loads(path.read_text())
        existing = [r for r in old.get("records", [])
                    if r not in payload["records"]]
    payload["records"] = existing + payload["records"]
    payload["count"] = len(payload["records"])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> list[GeneratedRecord]:
    payload = json.loads(Path(path).read_text())
    version = payload.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise ParameterError(f"unsupported manifest schema_version {version!r}")
    out = []
    for r in payload["records"]:
        out.append(GeneratedRecord(
            image_path=r["image"],
            mask_path=r["mask"],
            source_id=r["source"],
            category=r["category"],
            anomaly_type=r["anomaly_type"],
            box=BoxMask.from_dict(r["box"]),
            sample_index=r["sample_index"],
        ))
    return out

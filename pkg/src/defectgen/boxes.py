"""Bounding-box placement over an estimated foreground.

Boxes are axis-aligned rectangles in normalized [0,1] coordinates.
Placement is rejection sampling: draw a size from the category's range
and a position uniformly, keep the box once enough of it lies on the
foreground.  Foreground estimation is a deterministic two-means split
on luminance with connected-component cleanup; flat textures where the
split finds nothing fall back to the full frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DataError, ParameterError, SamplingError, ShapeError


@dataclass(frozen=True)
class BoxMask:
    """Normalized box (x0, y0, x1, y1), origin top-left, end-exclusive."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise ParameterError(
                f"invalid box ({self.x0}, {self.y0}, {self.x1}, {self.y1}); "
                "need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1"
            )

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def rasterize(self, height: int, width: int) -> np.ndarray:
        """Binary float32 mask (height, width). Covers at least one pixel."""
        if height < 1 or width < 1:
            raise ParameterError(f"invalid raster size {(height, width)}")
        r0 = int(np.floor(self.y0 * height))
        r1 = max(r0 + 1, int(np.ceil(self.y1 * height)))
        c0 = int(np.floor(self.x0 * width))
        c1 = max(c0 + 1, int(np.ceil(self.x1 * width)))
        mask = np.zeros((height, width), dtype=np.float32)
        mask[r0:min(r1, height), c0:min(c1, width)] = 1.0
        return mask

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxMask":
        return cls(d["x0"], d["y0"], d["x1"], d["y1"])


@dataclass
class ForegroundMask:
    mask: np.ndarray  # (H, W) bool
    method_used: str

    def __post_init__(self):
        if self.mask.ndim != 2:
            raise ShapeError(f"foreground mask must be 2-d, got {self.mask.ndim}-d")
        self.mask = self.mask.astype(bool)

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


@dataclass
class BoxConfig:
    size_range: tuple[float, float] = (0.1, 0.5)
    min_overlap: float = 0.5
    overlap_mode: str = "coverage"  # "coverage" or "iou"
    max_attempts: int = 1000
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.size_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ParameterError(f"size_range {self.size_range} must satisfy 0 < lo <= hi <= 1")
        if not 0.0 <= self.min_overlap <= 1.0:
            raise ParameterError(f"min_overlap {self.min_overlap} outside [0,1]")
        if self.overlap_mode not in ("coverage", "iou"):
            raise ParameterError(f"unknown overlap_mode {self.overlap_mode!r}")
        if self.max_attempts < 1:
            raise ParameterError(f"max_attempts must be >= 1, got {self.max_attempts}")


def _luminance(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image.astype(np.float64)
    if image.ndim == 3 and image.shape[0] in (1, 3):
        if image.shape[0] == 1:
            return image[0].astype(np.float64)
        r, g, b = image.astype(np.float64)
        return 0.299 * r + 0.587 * g + 0.114 * b
    raise ShapeError(f"expected (H,W) or (C,H,W) image, got shape {tuple(image.shape)}")


def _two_means_threshold(gray: np.ndarray, max_iters: int = 100) -> float:
    """Ridler-Calvard iterative threshold: midpoint of the two class means."""
    t = float(gray.mean())
    for _ in range(max_iters):
        lo = gray[gray <= t]
        hi = gray[gray > t]
        if lo.size == 0 or hi.size == 0:
            break
        t_new = (float(lo.mean()) + float(hi.mean())) / 2.0
        if abs(t_new - t) < 1e-7:
            break
        t = t_new
    return t


def extract_foreground(image: np.ndarray, method: str = "auto",
                       min_coverage: float = 0.02,
                       max_coverage: float = 0.98) -> ForegroundMask:
    """Estimate the object region of an image in [0,1].

    "auto": two-means luminance split, border-referenced polarity,
    largest connected component with holes filled.  Degenerate splits
    (nearly empty or nearly full) fall back to the full frame, which is
    the right answer for texture categories.  "full" skips estimation.
    """
    if method == "full":
        gray = _luminance(image)
        return ForegroundMask(np.ones(gray.shape, dtype=bool), "full")
    if method != "auto":
        raise ParameterError(f"unknown foreground method {method!r}")

    gray = _luminance(image)
    t = _two_means_threshold(gray)
    above = gray > t

    # Borders are assumed background; pick the side the border disagrees with.
    border = np.concatenate([above[0, :], above[-1, :], above[:, 0], above[:, -1]])
    fg = above if border.mean() < 0.5 else ~above

    if min_coverage < fg.mean() < max_coverage:
        fg = ndimage.binary_closing(fg, structure=np.ones((3, 3)))
        labels, n = ndimage.label(fg)
        if n > 1:
            sizes = ndimage.sum_labels(np.ones_like(labels), labels, range(1, n + 1))
            fg = labels == (int(np.argmax(sizes)) + 1)
        fg = ndimage.binary_fill_holes(fg)

    if not min_coverage < fg.mean() < max_coverage:
        return ForegroundMask(np.ones(gray.shape, dtype=bool), "full-fallback")
    return ForegroundMask(fg, "two-means")


def overlap_fraction(box: BoxMask, foreground: ForegroundMask,
                     mode: str = "coverage") -> float:
    """How strongly a box sits on the foreground.

    "coverage" is |box & fg| / |box|; "iou" is |box & fg| / |box | fg|.
    """
    raster = box.rasterize(*foreground.mask.shape).astype(bool)
    inter = float(np.logical_and(raster, foreground.mask).sum())
    if mode == "coverage":
        return inter / float(raster.sum())
    if mode == "iou":
        union = float(np.logical_or(raster, foreground.mask).sum())
        return inter / union if union else 0.0
    raise ParameterError(f"unknown overlap mode {mode!r}")


def sample_box(rng: np.random.Generator, foreground: ForegroundMask,
               config: Optional[BoxConfig] = None,
               category: str = "") -> BoxMask:
    """Rejection-sample one box meeting the overlap constraint.

    Width and height fractions are drawn independently from size_range;
    position is uniform over placements that keep the box inside the
    frame.  Raises SamplingError after max_attempts misses.
    """
    cfg = config or BoxConfig()
    lo, hi = cfg.size_range
    for _ in range(cfg.max_attempts):
        w = float(rng.uniform(lo, hi))
        h = float(rng.uniform(lo, hi))
        x0 = float(rng.uniform(0.0, 1.0 - w))
        y0 = float(rng.uniform(0.0, 1.0 - h))
        box = BoxMask(x0, y0, x0 + w, y0 + h)
        if overlap_fraction(box, foreground, cfg.overlap_mode) >= cfg.min_overlap:
            return box
    where = f" for category {category!r}" if category else ""
    raise SamplingError(
        f"no box met overlap >= {cfg.min_overlap} ({cfg.overlap_mode}) in "
        f"{cfg.max_attempts} attempts{where}; foreground coverage is "
        f"{foreground.coverage:.3f}, size_range {cfg.size_range}"
    )


def sample_boxes(rng: np.random.Generator, foreground: ForegroundMask, n: int,
                 config: Optional[BoxConfig] = None,
                 category: str = "") -> list[BoxMask]:
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    return [sample_box(rng, foreground, config, category) for _ in range(n)]


def box_config_for(category: str, table: dict | None) -> BoxConfig:
    """Resolve a per-category box config from a mapping, with defaults.

    ``table`` maps category name to a dict of BoxConfig fields; the
    "default" key applies to categories not listed.
    """
    if not table:
        return BoxConfig()
    entry = dict(table.get("default", {}))
    entry.update(table.get(category, {}))
    if not entry:
        return BoxConfig()
    known = {"size_range", "min_overlap", "overlap_mode", "max_attempts"}
    unknown = set(entry) - known
    if unknown:
        raise DataError(f"unknown box config keys for {category!r}: {sorted(unknown)}")
    if "size_range" in entry:
        entry["size_range"] = tuple(float(v) for v in entry["size_range"])
    return BoxConfig(**entry)

"""Loading the on-disk train/test/ground-truth/support layout.

Validation is collect-then-raise: every structural problem found is
listed in one LayoutError instead of failing on the first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch

from .embedding import SupportRecord, SupportSet
from .errors import LayoutError
from .generation import load_image_png


@dataclass
class TestRecord:
    image_id: str
    anomaly_type: str  # "good" for defect-free
    image: torch.Tensor
    mask: torch.Tensor  # (H,W); all zeros for good images

    @property
    def is_defective(self) -> bool:
        return self.anomaly_type != "good"


@dataclass
class CategoryData:
    name: str
    train: list[tuple[str, torch.Tensor]]
    test: list[TestRecord]
    support: dict[str, SupportSet] = field(default_factory=dict)

    @property
    def anomaly_types(self) -> list[str]:
        return sorted({r.anomaly_type for r in self.test if r.is_defective})


def _pngs(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix == ".png")


def _binarize(mask_image: torch.Tensor) -> torch.Tensor:
    return (mask_image[0] > 0.5).float()


def load_category(root: Path, category: str, channels: int = 3,
                  problems: list[str] | None = None) -> CategoryData:
    own_problems = problems if problems is not None else []
    base = root / category
    train: list[tuple[str, torch.Tensor]] = []
    test: list[TestRecord] = []
    support: dict[str, SupportSet] = {}

    train_dir = base / "train" / "good"
    if not train_dir.is_dir() or not _pngs(train_dir):
        own_problems.append(f"{category}: no training images under train/good")
    else:
        for p in _pngs(train_dir):
            train.append((p.stem, load_image_png(p, channels)))

    test_dir = base / "test"
    if not test_dir.is_dir():
        own_problems.append(f"{category}: missing test/ directory")
    else:
        for sub in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            atype = sub.name
            for p in _pngs(sub):
                image = load_image_png(p, channels)
                if atype == "good":
                    mask = torch.zeros(image.shape[-2:])
                else:
                    mask_path = base / "ground_truth" / atype / f"{p.stem}_mask.png"
                    if not mask_path.exists():
                        own_problems.append(
                            f"{category}: test/{atype}/{p.name} has no mask at "
                            f"ground_truth/{atype}/{p.stem}_mask.png"
                        )
                        continue
                    mask = _binarize(load_image_png(mask_path, 1))
                    if mask.shape != image.shape[-2:]:
                        own_problems.append(
                            f"{category}: mask shape {tuple(mask.shape)} != image "
                            f"shape {tuple(image.shape[-2:])} for test/{atype}/{p.name}"
                        )
                        continue
                    if not mask.any():
                        own_problems.append(
                            f"{category}: empty defect mask for test/{atype}/{p.name}"
                        )
                        continue
                test.append(TestRecord(p.stem, atype, image, mask))

    support_dir = base / "support"
    if support_dir.is_dir():
        for sub in sorted(d for d in support_dir.iterdir() if d.is_dir()):
            atype = sub.name
            records = []
            for p in _pngs(sub):
                if p.stem.endswith("_mask"):
                    continue
                mask_path = sub / f"{p.stem}_mask.png"
                if not mask_path.exists():
                    own_problems.append(
                        f"{category}: support/{atype}/{p.name} has no mask"
                    )
                    continue
                image = load_image_png(p, channels)
                mask = _binarize(load_image_png(mask_path, 1))
                if mask.shape != image.shape[-2:]:
                    own_problems.append(
                        f"{category}: support mask shape mismatch for "
                        f"support/{atype}/{p.name}"
                    )
                    continue
                records.append(SupportRecord(image, mask))
            if records:
                support[atype] = SupportSet(category, atype, records)

    if problems is None and own_problems:
        raise LayoutError(
            f"dataset at {root} has {len(own_problems)} problem(s)",
            problems=own_problems,
        )
    return CategoryData(category, train, test, support)


def load_dataset(root: str | Path, categories: list[str] | None = None,
                 channels: int = 3) -> dict[str, CategoryData]:
    """Load one or all categories under root.

    A category is any direct subdirectory containing a train/ folder.
    Raises LayoutError listing every problem across all categories.
    """
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"dataset root {root} is not a directory")
    if categories is None:
        categories = sorted(
            d.name for d in root.iterdir() if (d / "train").is_dir()
        )
    if not categories:
        raise LayoutError(f"no categories found under {root}")
    problems: list[str] = []
    out: dict[str, CategoryData] = {}
    for cat in categories:
        if not (root / cat).is_dir():
            problems.append(f"{cat}: category directory missing")
            continue
        out[cat] = load_category(root, cat, channels, problems)
    if problems:
        raise LayoutError(
            f"dataset at {root} has {len(problems)} problem(s)", problems=problems
        )
    return out

"""Report artifacts: canonical JSON, delimited metrics, and figures.

report.json is the reproducibility anchor: canonical key order, no
timestamps, so identical config and seed produce identical bytes.
Figures are rendered headless next to the delimited output.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalRecord, EvalResult, pr_points, roc_points

REPORT_SCHEMA_VERSION = 1
_PNG_META = {"Software": None}  # drop the library tag for stable bytes


def write_json_report(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_metrics_csv(path: str | Path, result: EvalResult) -> Path:
    """Flat scope,metric,value rows covering overall and per-category."""
    rows: list[tuple[str, str, str]] = []

    def emit(scope: str, group: dict):
        for key in sorted(group):
            if key in ("undefined", "per_anomaly_type"):
                continue
            value = group[key]
            rows.append((scope, key, "" if value is None else repr(float(value))
                         if isinstance(value, float) else str(value)))

    emit("overall", result.overall)
    for cat in sorted(result.per_category):
        group = result.per_category[cat]
        emit(cat, group)
        for atype in sorted(group.get("per_anomaly_type", {})):
            emit(f"{cat}/{atype}", group["per_anomaly_type"][atype])

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scope", "metric", "value"])
        writer.writerows(rows)
    return path


def _pooled(records: Sequence[EvalRecord]):
    img_y = np.array([r.image_label for r in records])
    img_s = np.array([r.image_score for r in records])
    pix_y = np.concatenate([r.pixel_labels.ravel() for r in records])
    pix_s = np.concatenate([r.pixel_scores.ravel() for r in records])
    return img_y, img_s, pix_y, pix_s


def dump_curve_csvs(report_dir: Path, records: Sequence[EvalRecord]) -> list[Path]:
    img_y, img_s, pix_y, pix_s = _pooled(records)
    out = []
    for name, y, s, fn, cols in [
        ("roc_pixel", pix_y, pix_s, roc_points, "threshold,fpr,tpr"),
        ("pr_pixel", pix_y, pix_s, pr_points, "threshold,recall,precision"),
        ("roc_image", img_y, img_s, roc_points, "threshold,fpr,tpr"),
        ("pr_image", img_y, img_s, pr_points, "threshold,recall,precision"),
    ]:
        path = report_dir / f"{name}.csv"
        np.savetxt(path, fn(y, s), fmt="%.10g", delimiter=",",
                   header=cols, comments="")
        out.append(path)
    return out


def render_curve_figure(path: str | Path, records: Sequence[EvalRecord]) -> Path:
    img_y, img_s, pix_y, pix_s = _pooled(records)
    fig, (ax_roc, ax_pr) = plt.subplots(1, 2, figsize=(9, 4))
    for label, y, s in [("pixel", pix_y, pix_s), ("image", img_y, img_s)]:
        try:
            roc = roc_points(y, s)
            ax_roc.plot(roc[:, 1], roc[:, 2], label=label)
            pr = pr_points(y, s)
            ax_pr.plot(pr[:, 1], pr[:, 2], label=label)
        except Exception:
            continue
    ax_roc.plot([0, 1], [0, 1], ls=":", c="gray", lw=0.8)
    ax_roc.set_xlabel("false positive rate")
    ax_roc.set_ylabel("true positive rate")
    ax_roc.set_title("ROC")
    ax_pr.set_xlabel("recall")
    ax_pr.set_ylabel("precision")
    ax_pr.set_ylim(0, 1.02)
    ax_pr.set_title("precision-recall")
    for ax in (ax_roc, ax_pr):
        ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def render_loss_figure(path: str | Path, csv_paths: dict[str, Path]) -> Optional[Path]:
    """Overlay loss traces from stage CSV logs (iteration, *losses)."""
    series = {}
    for label, p in csv_paths.items():
        p = Path(p)
        if not p.exists():
            continue
        data = np.genfromtxt(p, delimiter=",", names=True)
        if data.size:
            series[label] = data
    if not series:
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, data in series.items():
        names = [n for n in data.dtype.names if n != "iteration"]
        for col in names:
            suffix = f":{col}" if len(names) > 1 else ""
            ax.plot(np.atleast_1d(data["iteration"]),
                    np.atleast_1d(data[col]), label=f"{label}{suffix}", lw=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def render_sample_grid(path: str | Path, image_paths: Sequence[Path],
                       max_images: int = 16) -> Optional[Path]:
    chosen = list(image_paths)[:max_images]
    if not chosen:
        return None
    cols = min(4, len(chosen))
    rows = (len(chosen) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows))
    axes = np.atleast_1d(axes).ravel()
    for ax in axes:
        ax.axis("off")
    for ax, p in zip(axes, chosen):
        ax.imshow(plt.imread(str(p)))
        ax.set_title(Path(p).stem, fontsize=6)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def render_ablation_figure(path: str | Path, axis: str,
                           table: list[dict], metric: str = "pixel_aupr") -> Optional[Path]:
    xs = [str(row["value"]) for row in table]
    ys = [row["metrics"]["overall"].get(metric) for row in table]
    if not xs or all(y is None for y in ys):
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(xs, [0 if y is None else y for y in ys], color="#4878a8")
    ax.set_xlabel(axis)
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1.0)
    for x, y in zip(xs, ys):
        if y is not None:
            ax.text(x, y + 0.01, f"{y:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path

"""Stage orchestration: backbone -> embedding -> generation -> detector
-> evaluation, with content-addressed caching of every intermediate.

Each stage's artifact directory is keyed by a hash of its own config,
its derived seed, and its upstream hashes, so an ablation that only
changes a late stage (a tau sweep, say) reuses everything before it.
Failures surface as StageError tagged with the stage name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import (EvalConfig, PipelineConfig, config_hash, config_to_dict)
from .dataset import CategoryData, load_dataset
from .detector import (DetectorTrainConfig, GeneratedExample, load_detector,
                       predict, save_detector, train_detector)
from .diffusion import (LoadedBackbone, load_backbone, load_external_backbone,
                        save_backbone, train_tiny_backbone)
from .embedding import (AnomalyEmbedding, SupportSet, learn_embedding,
                        load_embedding, save_embedding)
from .errors import ConfigError, StageError
from .generation import (GeneratedRecord, generate_dataset, load_image_png,
                         load_manifest)
from .metrics import EvalRecord, EvalResult, evaluate_records
from .report import (REPORT_SCHEMA_VERSION, dump_curve_csvs,
                     render_ablation_figure, render_curve_figure,
                     render_loss_figure, render_sample_grid,
                     write_json_report, write_metrics_csv)
from .seeding import derive_seed
from .toyworld import make_texture_bank


def fingerprint_dataset(root: str | Path) -> str:
    """Content digest of every file under root, order-independent."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode("utf-8"))
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()[:16]


@dataclass
class StageOutputs:
    """Everything the run produced, keyed for the report."""

    backbone_paths: dict = field(default_factory=dict)
    embedding_paths: dict = field(default_factory=dict)
    generated_dirs: dict = field(default_factory=dict)
    detector_paths: dict = field(default_factory=dict)
    loss_csvs: dict = field(default_factory=dict)
    stage_hashes: dict = field(default_factory=dict)
    cache_hits: list = field(default_factory=list)


@dataclass
class PipelineResult:
    report_path: Path | None
    report_dir: Path | None
    result: EvalResult | None
    outputs: StageOutputs
    run_hash: str


def _wrap(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc


def _resolve_n_generated(cfg: PipelineConfig, total: int) -> PipelineConfig:
    boxes = 1 if total == 1 else 2
    if total % boxes:
        raise ConfigError(f"n_generated {total} not divisible by {boxes} boxes")
    gen = dataclasses.replace(cfg.generation, boxes_per_source=boxes,
                              samples_per_box=total // boxes)
    return dataclasses.replace(cfg, generation=gen)


def _ensure_backbone(cfg: PipelineConfig, cat: CategoryData, out: Path,
                     outputs: StageOutputs) -> LoadedBackbone:
    if cfg.backbone_kind != "toy":
        return _wrap("backbone", load_external_backbone, cfg.backbone_kind)
    seed = derive_seed(cfg.seed, "backbone", cat.name)
    bcfg = dataclasses.replace(cfg.backbone, seed=seed)
    h = config_hash(bcfg, outputs.stage_hashes["data"], cat.name)
    path = out / "stages" / "backbone" / f"{cat.name}-{h}" / "backbone.pt"
    outputs.stage_hashes[f"backbone/{cat.name}"] = h
    outputs.backbone_paths[cat.name] = str(path)
    if path.exists():
        outputs.cache_hits.append(f"backbone/{cat.name}")
        return _wrap("backbone", load_backbone, path)
    images = torch.stack([img for _, img in cat.train])
    backbone = _wrap("backbone", train_tiny_backbone, images, bcfg)
    save_backbone(path, backbone, {"T": bcfg.timesteps, "kind": "linear",
                                   "beta_min": bcfg.beta_min,
                                   "beta_max": bcfg.beta_max})
    return backbone


def _ensure_embedding(cfg: PipelineConfig, backbone: LoadedBackbone,
                      cat: CategoryData, atype: str, out: Path,
                      outputs: StageOutputs) -> AnomalyEmbedding:
    support = cat.support[atype]
    if cfg.inversion.k_shot:
        support = SupportSet(support.category, support.anomaly_type,
                             support.records[:cfg.inversion.k_shot])
    seed = derive_seed(cfg.seed, "invert", cat.name, atype)
    icfg = dataclasses.replace(cfg.inversion, seed=seed)
    up = outputs.stage_hashes[f"backbone/{cat.name}"]
    h = config_hash(icfg, up, atype)
    key = f"{cat.name}/{atype}"
    stage_dir = out / "stages" / "embedding" / f"{cat.name}-{atype}-{h}"
    path = stage_dir / "embedding.json"
    outputs.stage_hashes[f"embedding/{key}"] = h
    outputs.embedding_paths[key] = str(path)
    outputs.loss_csvs[f"inversion {key}"] = stage_dir / "inversion_loss.csv"
    if path.exists():
        outputs.cache_hits.append(f"embedding/{key}")
        return _wrap("embedding", load_embedding, path)
    emb = _wrap("embedding", learn_embedding, backbone, support, icfg,
                stage_dir / "inversion_loss.csv")
    save_embedding(path, emb)
    return emb


def _ensure_generated(cfg: PipelineConfig, backbone: LoadedBackbone,
                      embedding: AnomalyEmbedding, cat: CategoryData,
                      atype: str, out: Path,
                      outputs: StageOutputs) -> tuple[Path, list[GeneratedRecord]]:
    seed = derive_seed(cfg.seed, "generate", cat.name, atype)
    gcfg = dataclasses.replace(cfg.generation, seed=seed)
    key = f"{cat.name}/{atype}"
    up = outputs.stage_hashes[f"embedding/{key}"]
    h = config_hash(gcfg, up)
    gen_dir = out / "stages" / "generated" / f"{cat.name}-{atype}-{h}"
    manifest = gen_dir / "manifest.json"
    outputs.stage_hashes[f"generated/{key}"] = h
    outputs.generated_dirs[key] = str(gen_dir)
    if manifest.exists():
        outputs.cache_hits.append(f"generated/{key}")
        return gen_dir, _wrap("generate", load_manifest, manifest)
    records = _wrap("generate", generate_dataset, backbone, embedding,
                    cat.train, gen_dir, gcfg)
    return gen_dir, records


def load_generated_pool(gen_dir: Path, records: list[GeneratedRecord],
                        sources: dict[str, torch.Tensor],
                        channels: int) -> list[GeneratedExample]:
    pool = []
    for rec in records:
        image = load_image_png(gen_dir / rec.image_path, channels)
        mask_img = load_image_png(gen_dir / rec.mask_path, 1)
        mask = (mask_img[0] > 0.5).float()
        pool.append(GeneratedExample(image=image, mask=mask,
                                     source=sources[rec.source_id]))
    return pool


def _ensure_detector(cfg: PipelineConfig, cat: CategoryData,
                     pool: list[GeneratedExample], out: Path,
                     outputs: StageOutputs, pool_hash: str):
    seed = derive_seed(cfg.seed, "detect", cat.name)
    dcfg = dataclasses.replace(cfg.detector, seed=seed)
    h = config_hash(dcfg, pool_hash)
    stage_dir = out / "stages" / "detector" / f"{cat.name}-{h}"
    path = stage_dir / "detector.pt"
    outputs.stage_hashes[f"detector/{cat.name}"] = h
    outputs.detector_paths[cat.name] = str(path)
    outputs.loss_csvs[f"detector {cat.name}"] = stage_dir / "detector_loss.csv"
    if path.exists():
        outputs.cache_hits.append(f"detector/{cat.name}")
        return _wrap("detect", load_detector, path)
    normals = torch.stack([img for _, img in cat.train])
    bank_rng = np.random.default_rng(derive_seed(cfg.seed, "textures", cat.name))
    textures = make_texture_bank(bank_rng, 12, normals.shape[-1], normals.shape[1])
    nets = _wrap("detect", train_detector, normals, pool, dcfg, textures,
                 stage_dir / "detector_loss.csv")
    save_detector(path, nets)
    return nets


def _evaluate_category(nets, cat: CategoryData,
                       eval_cfg: EvalConfig) -> list[EvalRecord]:
    records = []
    for rec in cat.test:
        score = predict(nets, rec.image, eval_cfg.smooth_kernel)
        records.append(EvalRecord(
            category=cat.name,
            anomaly_type=rec.anomaly_type,
            image_label=int(rec.is_defective),
            image_score=score.image_score,
            pixel_labels=rec.mask.numpy().astype(np.int64),
            pixel_scores=score.pixel.numpy(),
        ))
    return records


STAGE_ORDER = ("backbone", "embedding", "generate", "detect", "evaluate")


def run_pipeline(cfg: PipelineConfig, out_dir: str | Path,
                 stop_after: str | None = None) -> PipelineResult:
    """Run the stages in order and write the report; cached stages reload.

    ``stop_after`` ends the run early (one of STAGE_ORDER); partial runs
    return no report or metrics, just the artifacts produced so far.
    """
    if stop_after is not None and stop_after not in STAGE_ORDER:
        raise ConfigError(f"stop_after must be one of {STAGE_ORDER}")
    out = Path(out_dir)
    outputs = StageOutputs()
    data = _wrap("data", load_dataset, cfg.data_root, cfg.categories, cfg.channels)
    outputs.stage_hashes["data"] = _wrap("data", fingerprint_dataset, cfg.data_root)

    eval_records: list[EvalRecord] = []
    sample_paths: list[Path] = []
    for cat in data.values():
        backbone = _ensure_backbone(cfg, cat, out, outputs)
        if stop_after == "backbone":
            continue
        pool: list[GeneratedExample] = []
        pool_hashes = []
        sources = dict(cat.train)
        for atype in sorted(cat.support):
            emb = _ensure_embedding(cfg, backbone, cat, atype, out, outputs)
            if stop_after == "embedding":
                continue
            gen_dir, records = _ensure_generated(cfg, backbone, emb, cat,
                                                 atype, out, outputs)
            pool.extend(load_generated_pool(gen_dir, records, sources,
                                            cfg.channels))
            pool_hashes.append(outputs.stage_hashes[f"generated/{cat.name}/{atype}"])
            sample_paths.extend(sorted((gen_dir / cat.name / atype / "images").glob("*.png"))[:4])
        if stop_after in ("embedding", "generate"):
            continue
        nets = _ensure_detector(cfg, cat, pool, out, outputs,
                                pool_hash="+".join(pool_hashes) or "none")
        if stop_after == "detect":
            continue
        eval_records.extend(_wrap("evaluate", _evaluate_category, nets, cat,
                                  cfg.evaluation))

    if stop_after is not None and stop_after != "evaluate":
        return PipelineResult(report_path=None, report_dir=None, result=None,
                              outputs=outputs, run_hash="")
    result = _wrap("evaluate", evaluate_records, eval_records)

    run_hash = config_hash(cfg, outputs.stage_hashes["data"], __version__)
    report_dir = out / "reports" / run_hash
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "tool_version": __version__,
        "config_hash": run_hash,
        "config": config_to_dict(cfg),
        "dataset_fingerprint": outputs.stage_hashes["data"],
        "stage_hashes": dict(sorted(outputs.stage_hashes.items())),
        "pixel_metric_pooling": "pooled over all test pixels",
        "metrics": result.to_dict(),
    }
    report_path = write_json_report(report_dir / "report.json", payload)
    write_metrics_csv(report_dir / "metrics.csv", result)
    if cfg.evaluation.dump_curves:
        _wrap("report", dump_curve_csvs, report_dir, eval_records)
    if cfg.evaluation.render_figures:
        _wrap("report", render_curve_figure, report_dir / "curves.png", eval_records)
        render_loss_figure(report_dir / "losses.png", outputs.loss_csvs)
        render_sample_grid(report_dir / "samples.png", sample_paths)
    return PipelineResult(report_path=report_path, report_dir=report_dir,
                          result=result, outputs=outputs, run_hash=run_hash)


ABLATION_AXES = ("tau", "k_shot", "n_generated", "mask_guided", "anomaly_mix")


def _apply_axis(cfg: PipelineConfig, axis: str, value) -> PipelineConfig:
    if axis == "tau":
        return dataclasses.replace(
            cfg, detector=dataclasses.replace(cfg.detector, tau=float(value)))
    if axis == "k_shot":
        return dataclasses.replace(
            cfg, inversion=dataclasses.replace(cfg.inversion, k_shot=int(value)))
    if axis == "n_generated":
        return _resolve_n_generated(cfg, int(value))
    if axis == "mask_guided":
        return dataclasses.replace(
            cfg, inversion=dataclasses.replace(cfg.inversion,
                                               mask_guided=bool(value)))
    if axis == "anomaly_mix":
        return dataclasses.replace(
            cfg, detector=dataclasses.replace(cfg.detector,
                                              mix_probability=float(value)))
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def run_ablation(cfg: PipelineConfig, axis: str, values: list,
                 out_dir: str | Path) -> dict:
    """One pipeline run per value; shared stages come from the cache.

    Returns the aggregated table and writes ablation.json/.csv and a
    bar figure under out_dir/ablations.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    if not values:
        raise ConfigError("ablation needs at least one value")
    out = Path(out_dir)
    table = []
    for value in values:
        run_cfg = _apply_axis(cfg, axis, value)
        res = run_pipeline(run_cfg, out)
        table.append({
            "value": value,
            "run_hash": res.run_hash,
            "report": str(res.report_path),
            "metrics": res.result.to_dict(),
        })

    abl_hash = config_hash(cfg, axis, json.dumps(values, sort_keys=True))
    abl_dir = out / "ablations" / f"{axis}-{abl_hash}"
    payload = {"axis": axis, "values": values, "table": table,
               "schema_version": REPORT_SCHEMA_VERSION}
    write_json_report(abl_dir / "ablation.json", payload)

    import csv as _csv
    metrics_of_interest = ["pixel_aupr", "pixel_auroc", "image_aupr", "image_auroc"]
    with open(abl_dir / "ablation.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow([axis] + metrics_of_interest)
        for row in table:
            overall = row["metrics"]["overall"]
            writer.writerow([row["value"]] +
                            [overall.get(m) for m in metrics_of_interest])
    render_ablation_figure(abl_dir / "ablation.png", axis, table)
    payload["dir"] = str(abl_dir)
    return payload

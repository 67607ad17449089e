"""Command-line entry point.

Subcommands mirror the pipeline stages so each is independently
inspectable; `evaluate` (alias `run`) executes everything and writes
the report.  Exit code 0 on success, 2 on a diagnosed failure with a
stage-tagged message on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import yaml

from .boxes import box_config_for, extract_foreground, sample_boxes
from .config import PipelineConfig, load_config, toy_profile
from .errors import ConfigError, DefectGenError
from .pipeline import (ABLATION_AXES, _resolve_n_generated, run_ablation,
                       run_pipeline)
from .report import write_json_report
from .seeding import derive_seed, numpy_generator
from .toyworld import export_toy_world


def _add_common(p: argparse.ArgumentParser, config_required: bool = True):
    p.add_argument("--config", type=Path, required=config_required,
                   help="pipeline config file (YAML)")
    p.add_argument("--seed", type=int, default=None, help="override root seed")
    p.add_argument("--out", type=Path, default=Path("runs"),
                   help="output directory for artifacts and reports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defectgen",
        description="few-shot defect generation and weakly supervised detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-world", help="write the procedural dataset")
    _add_common(p, config_required=False)

    p = sub.add_parser("train-backbone", help="stage 0: train the tiny backbone")
    _add_common(p)

    p = sub.add_parser("learn-embedding", help="stages 0-1: invert the defect embedding")
    _add_common(p)
    p.add_argument("--k-shot", type=int, default=None,
                   help="cap on support examples used")

    p = sub.add_parser("sample-boxes", help="draw candidate boxes over the foreground")
    _add_common(p)
    p.add_argument("--n", type=int, default=8, help="boxes per category")

    p = sub.add_parser("generate", help="stages 0-2: render the defect set")
    _add_common(p)
    p.add_argument("--n", type=int, default=None,
                   help="generated images per source (overrides config counts)")
    p.add_argument("--steps", type=int, default=None, help="denoising steps")
    p.add_argument("--k-shot", type=int, default=None)

    p = sub.add_parser("train", help="stages 0-3: train the detector")
    _add_common(p)
    p.add_argument("--tau", type=float, default=None,
                   help="confidence threshold for box-label release")
    p.add_argument("--mix-prob", type=float, default=None,
                   help="probability an anomalous slot uses generated data")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--k-shot", type=int, default=None)

    for name in ("evaluate", "run"):
        p = sub.add_parser(name, help="all stages plus metrics and report")
        _add_common(p)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--mix-prob", type=float, default=None)
        p.add_argument("--n", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--k-shot", type=int, default=None)

    p = sub.add_parser("ablate", help="sweep one axis, one pipeline run per value")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated values, e.g. 0.9,0.8")
    return parser


def _load_cfg(args) -> PipelineConfig:
    if getattr(args, "config", None) is not None:
        cfg = load_config(args.config)
    else:
        cfg = toy_profile()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    for attr, apply in [
        ("tau", lambda c, v: dataclasses.replace(
            c, detector=dataclasses.replace(c.detector, tau=v))),
        ("mix_prob", lambda c, v: dataclasses.replace(
            c, detector=dataclasses.replace(c.detector, mix_probability=v))),
        ("k_shot", lambda c, v: dataclasses.replace(
            c, inversion=dataclasses.replace(c.inversion, k_shot=v))),
        ("steps", lambda c, v: dataclasses.replace(
            c, generation=dataclasses.replace(c.generation, n_steps=v))),
    ]:
        value = getattr(args, attr, None)
        if value is not None:
            cfg = apply(cfg, value)
    if getattr(args, "n", None) is not None and args.command != "sample-boxes":
        cfg = _resolve_n_generated(cfg, args.n)
    return cfg


def _cmd_toy_world(args) -> int:
    cfg = _load_cfg(args)
    toy = cfg.toy
    if args.seed is not None:
        toy = dataclasses.replace(toy, seed=args.seed)
    root = export_toy_world(args.out, toy)
    print(f"toy dataset written to {root}")
    return 0


def _cmd_sample_boxes(args) -> int:
    cfg = _load_cfg(args)
    from .dataset import load_dataset

    data = load_dataset(cfg.data_root, cfg.categories, cfg.channels)
    out = {}
    for cat in data.values():
        _, image = cat.train[0]
        fg = extract_foreground(image.numpy(), cfg.generation.foreground_method)
        rng = numpy_generator(derive_seed(cfg.seed, "box-preview", cat.name))
        boxes = sample_boxes(rng, fg, args.n,
                             box_config_for(cat.name, cfg.generation.box_table),
                             cat.name)
        out[cat.name] = {
            "foreground_method": fg.method_used,
            "foreground_coverage": fg.coverage,
            "boxes": [b.to_dict() for b in boxes],
        }
    path = write_json_report(Path(args.out) / "boxes.json", out)
    print(yaml.safe_dump(out, sort_keys=True).rstrip())
    print(f"written to {path}")
    return 0


_STAGE_FOR_COMMAND = {
    "train-backbone": "backbone",
    "learn-embedding": "embedding",
    "generate": "generate",
    "train": "detect",
    "evaluate": None,
    "run": None,
}


def _cmd_pipeline(args) -> int:
    cfg = _load_cfg(args)
    stop_after = _STAGE_FOR_COMMAND[args.command]
    res = run_pipeline(cfg, args.out, stop_after=stop_after)
    for hit in res.outputs.cache_hits:
        print(f"reused cached {hit}")
    if stop_after is not None:
        for label, paths in [("backbone", res.outputs.backbone_paths),
                             ("embedding", res.outputs.embedding_paths),
                             ("generated", res.outputs.generated_dirs),
                             ("detector", res.outputs.detector_paths)]:
            for key, path in paths.items():
                print(f"{label} {key}: {path}")
        return 0
    overall = res.result.overall
    for metric in ("image_auroc", "image_aupr", "pixel_auroc", "pixel_aupr"):
        value = overall.get(metric)
        shown = "undefined" if value is None else f"{value:.4f}"
        print(f"{metric}: {shown}")
    print(f"report: {res.report_path}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    values = [yaml.safe_load(v) for v in args.values.split(",") if v.strip()]
    payload = run_ablation(cfg, args.axis, values, args.out)
    for row in payload["table"]:
        overall = row["metrics"]["overall"]
        aupr = overall.get("pixel_aupr")
        shown = "undefined" if aupr is None else f"{aupr:.4f}"
        print(f"{args.axis}={row['value']}: pixel_aupr={shown}")
    print(f"ablation table: {payload['dir']}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "toy-world":
            return _cmd_toy_world(args)
        if args.command == "sample-boxes":
            return _cmd_sample_boxes(args)
        if args.command == "ablate":
            return _cmd_ablate(args)
        if args.command in _STAGE_FOR_COMMAND:
            return _cmd_pipeline(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except DefectGenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

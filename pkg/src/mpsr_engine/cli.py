from __future__ import annotations
import argparse, json, sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import torch
from rich import print

from . import __version__, config
from .datamodel.schemas import ClassSplit
from .datamodel.store import ANNOTATIONS_FILE, load_dataset, save_dataset
from .errors import ConfigError, MpsrError
from .telemetry.telemetry import setup_logging, setup_tracing
from .telemetry.telemetry_context import run_logging_session
from .telemetry.trainlog import fingerprint

PROVENANCE_FILE = "provenance.json"
CONFIG_SNAPSHOT = "config.json"

REFINE_FLAGS = {"rpn": (True, False), "roi": (False, True), "both": (True, True)}
STAGE_FLAGS = {"base": "base_only", "fewshot": "fewshot_only", "both": "both"}

DEFAULT_BINS = tuple(range(0, 1024 + 32, 32))


def _out_dir(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else Path(config.OUT_DIR) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_hash(path: str | Path) -> str:
    p = Path(path) / ANNOTATIONS_FILE
    return fingerprint(p.read_bytes()) if p.exists() else "na"


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, default=str), encoding="utf-8")


def _provenance(args, **extra) -> dict:
    return {
        "command": args.cmd,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        **extra,
    }


def _parse_ids(raw: Optional[str]) -> tuple[int, ...]:
    if not raw:
        return ()
    try:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as e:
        raise ConfigError(f"expected comma-separated class ids, got {raw!r}") from e


def _train_config(args):
    from .trainer.schemas import load_train_config

    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.mode:
        overrides["mode"] = args.mode
    if args.refine:
        rpn, roi = REFINE_FLAGS[args.refine]
        overrides.update(refine_rpn=str(rpn), refine_roi=str(roi))
    if args.refine_stage:
        overrides["refine_stage"] = STAGE_FLAGS[args.refine_stage]
    if args.pyramid_selection:
        overrides["pyramid_selection"] = args.pyramid_selection
    if args.multiscale:
        overrides["multiscale"] = args.multiscale
    return load_train_config(args.config, preset=args.preset, overrides=overrides)


# ---- commands ----------------------------------------------------------------

def _cmd_generate(args) -> None:
    from .config import read_config_file
    from .synthetic import PRESETS, SyntheticSpec, generate_dataset

    spec = PRESETS[args.preset]
    if args.config:
        spec = SyntheticSpec.from_mapping(read_config_file(args.config), base=spec)
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    out = _out_dir(args, "dataset")
    ds = generate_dataset(spec)
    save_dataset(ds, out)
    _write_json(out / PROVENANCE_FILE, _provenance(args, spec=asdict(spec)))
    print(f"[green]Generated {len(ds.images)} images / {sum(1 for _ in ds.annotations())} objects in {out}[/green]")


def _cmd_prepare(args) -> None:
    from .fewshot import KShotConfig, ScaleRange, build_kshot_subset, build_limited_scale_subset

    ds = load_dataset(args.dataset)
    out = _out_dir(args, "fewshot")
    seed = 0 if args.seed is None else args.seed
    novel = _parse_ids(args.novel)
    if args.base_only:
        if not novel:
            raise ConfigError("--base-only needs --novel to know which classes to drop")
        split = ClassSplit.from_novel(ds.num_classes, novel)
        subset = ds.restrict_to_classes(split.base_classes)
    else:
        if args.k is None:
            raise ConfigError("prepare needs --k (or --base-only)")
        classes = frozenset(range(ds.num_classes))
        cfg = KShotConfig(k=args.k, seed=seed, classes=classes)
        if args.scale_lo is not None or args.scale_hi is not None:
            scale_range = ScaleRange(args.scale_lo or 0.0, args.scale_hi if args.scale_hi is not None else float("inf"))
            side = None if args.raw else args.shorter_side
            # with --novel only the novel classes are held to the window
            confined = frozenset(novel) if novel else None
            subset = build_limited_scale_subset(ds, cfg, scale_range, shorter_side=side, confined=confined)
        else:
            subset = build_kshot_subset(ds, cfg)
    save_dataset(subset, out)
    _write_json(out / PROVENANCE_FILE, _provenance(args, source=str(args.dataset), source_hash=_dataset_hash(args.dataset), seed=seed))
    print(f"[green]Wrote {sum(1 for _ in subset.annotations())} instances in {len(subset.images)} images to {out}[/green]")


def _cmd_train_base(args) -> None:
    from .trainer.pipeline import train_base

    cfg = _train_config(args)
    ds = load_dataset(args.dataset)
    out = _out_dir(args, "base")
    _write_json(out / CONFIG_SNAPSHOT, cfg.to_dict())
    ckpt = train_base(ds, cfg, out_dir=out / "checkpoint", log_path=out / "train_log.jsonl")
    _write_json(out / PROVENANCE_FILE, _provenance(args, source_hash=_dataset_hash(args.dataset), config_hash=fingerprint(cfg.to_dict())))
    print(f"[green]Base training done: {ckpt.iteration} iterations, checkpoint at {ckpt.path}[/green]")


def _cmd_finetune(args) -> None:
    from .trainer.pipeline import finetune

    cfg = _train_config(args)
    ds = load_dataset(args.dataset)
    out = _out_dir(args, "finetune")
    _write_json(out / CONFIG_SNAPSHOT, cfg.to_dict())
    ckpt = finetune(args.checkpoint, ds, cfg, out_dir=out / "checkpoint", log_path=out / "train_log.jsonl")
    _write_json(out / PROVENANCE_FILE, _provenance(
        args, source_hash=_dataset_hash(args.dataset), base_checkpoint=str(args.checkpoint),
        config_hash=fingerprint(cfg.to_dict()),
    ))
    print(f"[green]Fine-tuning done: {ckpt.iteration} iterations, checkpoint at {ckpt.path}[/green]")


def _cmd_eval(args) -> None:
    from .eval.report import evaluate, print_report

    ds = load_dataset(args.dataset)
    split = ClassSplit.from_novel(ds.num_classes, _parse_ids(args.novel))
    out = _out_dir(args, "eval")
    rep = evaluate(args.checkpoint, ds, split, iou_thr=args.iou, device=config.DEVICE)
    rep.to_json(out / "report.json")
    rep.to_csv(out / "per_class.csv")
    _write_json(out / PROVENANCE_FILE, _provenance(args, source_hash=_dataset_hash(args.dataset), config_hash=rep.config_hash))
    print_report(rep)


def _cmd_analyze_scales(args) -> None:
    from .fewshot import render_histogram_chart, scale_histogram

    ds = load_dataset(args.dataset)
    try:
        bins = [float(b) for b in args.bins.split(",")] if args.bins else DEFAULT_BINS
    except ValueError as e:
        raise ConfigError(f"--bins expects comma-separated numbers, got {args.bins!r}") from e
    side = None if args.raw else args.shorter_side
    hist = scale_histogram(ds, bins, shorter_side=side)
    out = _out_dir(args, "scales")
    hist.to_csv(out / "scales.csv", ds.class_names)
    if args.chart:
        render_histogram_chart(hist, out / "scales.png", ds.class_names)
    _write_json(out / PROVENANCE_FILE, _provenance(args, source_hash=_dataset_hash(args.dataset)))
    lo, hi = hist.mode_bin()
    print(f"[green]{hist.measured} objects measured ({hist.out_of_range} outside the bins); mode bin [{lo:g}, {hi:g})[/green]")


def _cmd_benchmark(args) -> None:
    from .benchmark import BENCH_PRESETS, print_benchmark, run_benchmark
    from .trainer.schemas import load_train_config

    bench = BENCH_PRESETS[args.preset]
    if args.seeds:
        bench = replace(bench, seeds=tuple(range(args.seeds)))
    if args.ablations:
        bench = replace(bench, ablations=True)
    train_cfg = load_train_config(args.config, preset=bench.train) if args.config else None
    out = _out_dir(args, "benchmark")
    res = run_benchmark(bench, train_cfg=train_cfg, out_dir=out, device=config.DEVICE)
    _write_json(out / PROVENANCE_FILE, _provenance(args))
    print_benchmark(res)


# ---- parser ------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="KEY=VALUE training config file")
    p.add_argument("--preset", default="desk", choices=["desk", "full", "tiny"])
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["baseline", "baseline_fpn", "mpsr"])
    p.add_argument("--refine", choices=sorted(REFINE_FLAGS))
    p.add_argument("--refine-stage", choices=sorted(STAGE_FLAGS))
    p.add_argument("--pyramid-selection", choices=["manual", "anchor_match"])
    p.add_argument("--multiscale", choices=["none", "scale_aug", "image_pyramids"])
    p.add_argument("--out", help="Output directory (default: $MPSR_OUT_DIR/<command>)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser("mpsrdet", description="Few-shot detection with multi-scale positive sample refinement")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p_gen = sub.add_parser("generate", help="Render a synthetic shapes dataset")
    p_gen.add_argument("--preset", default="tiny", choices=["trend", "tiny"])
    p_gen.add_argument("--config", help="KEY=VALUE synthetic spec (CLASSES=..., INSTANCES=..., SCALES=s:w,...)")
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--out")
    p_gen.set_defaults(func=_cmd_generate)

    p_prep = sub.add_parser("prepare", help="Build a k-shot (optionally limited-scale) or base-class subset")
    p_prep.add_argument("--dataset", required=True, help="Dataset directory holding annotations.json")
    p_prep.add_argument("--k", type=int)
    p_prep.add_argument("--seed", type=int)
    p_prep.add_argument("--novel", help="Comma-separated novel class ids (the only classes a scale window confines)")
    p_prep.add_argument("--base-only", action="store_true", help="Write the base-class training set instead")
    p_prep.add_argument("--scale-lo", type=float)
    p_prep.add_argument("--scale-hi", type=float)
    p_prep.add_argument("--shorter-side", type=int, default=800, help="Resize policy the scale range refers to")
    p_prep.add_argument("--raw", action="store_true", help="Measure scales in raw image pixels")
    p_prep.add_argument("--out")
    p_prep.set_defaults(func=_cmd_prepare)

    p_base = sub.add_parser("train-base", help="Base training on base classes")
    p_base.add_argument("--dataset", required=True)
    _add_train_flags(p_base)
    p_base.set_defaults(func=_cmd_train_base)

    p_ft = sub.add_parser("finetune", help="Few-shot fine-tuning of a base checkpoint")
    p_ft.add_argument("--checkpoint", required=True, help="Checkpoint directory from train-base")
    p_ft.add_argument("--dataset", required=True)
    _add_train_flags(p_ft)
    p_ft.set_defaults(func=_cmd_finetune)

    p_eval = sub.add_parser("eval", help="AP@0.5 per class, novel and base mAP")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--novel", help="Comma-separated novel class ids")
    p_eval.add_argument("--iou", type=float, default=0.5)
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=_cmd_eval)

    p_sc = sub.add_parser("analyze-scales", help="Per-class object-scale histogram")
    p_sc.add_argument("--dataset", required=True)
    p_sc.add_argument("--bins", help="Comma-separated bin edges (default 0,32,...,1024)")
    p_sc.add_argument("--shorter-side", type=int, default=800)
    p_sc.add_argument("--raw", action="store_true", help="Measure scales in raw image pixels")
    p_sc.add_argument("--chart", action="store_true", help="Also render scales.png")
    p_sc.add_argument("--out")
    p_sc.set_defaults(func=_cmd_analyze_scales)

    p_bench = sub.add_parser("benchmark", help="Trend experiment: Baseline-FPN vs MPSR over seeds")
    p_bench.add_argument("--preset", default="trend", choices=["trend", "tiny"])
    p_bench.add_argument("--config", help="KEY=VALUE training config file")
    p_bench.add_argument("--seeds", type=int, help="Number of seeds (0..n-1)")
    p_bench.add_argument("--ablations", action="store_true", help="Also run the refinement ablations")
    p_bench.add_argument("--out")
    p_bench.set_defaults(func=_cmd_benchmark)
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    if config.TRACE_EXPORTER != "off":
        setup_tracing("mpsr", config.TRACE_EXPORTER)
    if config.NUM_THREADS:
        torch.set_num_threads(config.NUM_THREADS)

    with run_logging_session(args.cmd):
        try:
            args.func(args)
        except FileNotFoundError as e:
            print(f"[red]error:[/red] {e}. Check the path, or create it with `mpsrdet generate` / `mpsrdet prepare`.")
            return 2
        except (MpsrError, OSError) as e:
            print(f"[red]error:[/red] {e}")
            return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

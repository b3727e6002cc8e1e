# mpsr_engine/benchmark.py
"""
Trend experiment on synthetic shapes: base-train, fine-tune on a random-scale
and a limited-scale k-shot set, evaluate novel-class mAP on a held-out set,
for Baseline-FPN and MPSR over several seeds; optionally the ablation
switches (RPN-only / RoI-only refinement, refinement stage, anchor matching)
and the scale-augmentation and image-pyramid baselines.
"""
from __future__ import annotations
import json, logging, time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from opentelemetry import trace
from opentelemetry.trace import Status, StatusCode
from rich.console import Console
from rich.table import Table

from .datamodel.schemas import ClassSplit, Dataset
from .detector.checkpoint import Checkpoint
from .errors import ConfigError
from .eval.report import evaluate
from .fewshot import KShotConfig, ScaleRange, build_kshot_subset, build_limited_scale_subset
from .synthetic import PRESETS as DATA_PRESETS, SyntheticSpec, generate_dataset
from .telemetry.trainlog import fingerprint
from .trainer.pipeline import finetune, train_base
from .trainer.schemas import PRESETS as TRAIN_PRESETS, TrainConfig

logger = logging.getLogger("mpsr.benchmark")
tracer = trace.get_tracer("mpsr.benchmark")

TEST_SEED_OFFSET = 10_000


@dataclass(frozen=True)
class BenchmarkConfig:
    data: str = "trend"
    train: str = "desk"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    k: int = 5
    novel: tuple[int, ...] = (3, 4)
    limited: tuple[float, float] = (28.0, 45.0)   # post-resize scale window of the limited regime
    ablations: bool = False


BENCH_PRESETS: dict[str, BenchmarkConfig] = {
    "trend": BenchmarkConfig(),
    "tiny": BenchmarkConfig(data="tiny", train="tiny", seeds=(0, 1), k=1, novel=(1,), limited=(20.0, 30.0)),
}

# variant name -> changes on top of the training config
VARIANTS: dict[str, dict] = {
    "baseline_fpn": {"mode": "baseline_fpn"},
    "mpsr": {"mode": "mpsr"},
}
ABLATIONS: dict[str, dict] = {
    "mpsr_rpn_only": {"mode": "mpsr", "refine_roi": False},
    "mpsr_roi_only": {"mode": "mpsr", "refine_rpn": False},
    "mpsr_base_only": {"mode": "mpsr", "refine_stage": "base_only"},
    "mpsr_fewshot_only": {"mode": "mpsr", "refine_stage": "fewshot_only"},
    "mpsr_anchor_match": {"mode": "mpsr", "pyramid_selection": "anchor_match"},
    "fpn_scale_aug": {"mode": "baseline_fpn", "multiscale": "scale_aug"},
    "fpn_image_pyramids": {"mode": "baseline_fpn", "multiscale": "image_pyramids"},
}
# multi-scale input baselines are compared with MPSR on both regimes
BOTH_REGIMES = frozenset(VARIANTS) | {"fpn_scale_aug", "fpn_image_pyramids"}


@dataclass
class BenchmarkResult:
    config: dict
    rows: list[dict] = field(default_factory=list)

    def novel_map(self, seed: int, variant: str, regime: str) -> float:
        for r in self.rows:
            if (r["seed"], r["variant"], r["regime"]) == (seed, variant, regime):
                return r["novel_map"] or 0.0
        raise KeyError((seed, variant, regime))

    def wins(self) -> dict[str, int]:
        seeds = sorted({r["seed"] for r in self.rows})
        ge = lambda regime: sum(
            self.novel_map(s, "mpsr", regime) >= self.novel_map(s, "baseline_fpn", regime) for s in seeds
        )
        return {
            "seeds": len(seeds),
            "mpsr_ge_baseline": ge("limited"),
            "mpsr_ge_baseline_random": ge("random"),
            "limited_below_random": sum(
                self.novel_map(s, "baseline_fpn", "limited") < self.novel_map(s, "baseline_fpn", "random")
                for s in seeds
            ),
        }

    def to_dict(self) -> dict:
        return {"config": self.config, "rows": self.rows, "wins": self.wins()}

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


def print_benchmark(res: BenchmarkResult) -> None:
    console = Console()
    w = res.wins()
    console.rule("[bold]Benchmark[/bold]")
    console.print(
        f"MPSR >= Baseline-FPN: {w['mpsr_ge_baseline']}/{w['seeds']} seeds (limited), "
        f"{w['mpsr_ge_baseline_random']}/{w['seeds']} (random)"
    )
    console.print(f"Baseline-FPN limited < random: {w['limited_below_random']}/{w['seeds']} seeds")
    t = Table(title="Novel-class mAP (%)")
    t.add_column("Seed"); t.add_column("Variant"); t.add_column("Regime"); t.add_column("Novel"); t.add_column("Base"); t.add_column("Config")
    for r in res.rows:
        fmt = lambda x: "-" if x is None else f"{100 * x:.1f}"
        t.add_row(str(r["seed"]), r["variant"], r["regime"], fmt(r["novel_map"]), fmt(r["base_map"]), r["config_hash"])
    console.print(t)


def _kshot_sets(data: Dataset, bench: BenchmarkConfig, train_cfg: TrainConfig, seed: int) -> dict[str, Dataset]:
    cfg = KShotConfig(k=bench.k, seed=seed, classes=frozenset(range(data.num_classes)))
    det = train_cfg.detector
    return {
        "random": build_kshot_subset(data, cfg),
        # base classes keep the random-scale draw
        "limited": build_limited_scale_subset(
            data, cfg, ScaleRange(*bench.limited), shorter_side=det.min_size, max_size=det.max_size,
            confined=frozenset(bench.novel),
        ),
    }


def run_benchmark(
    bench: BenchmarkConfig,
    *,
    train_cfg: Optional[TrainConfig] = None,
    data_spec: Optional[SyntheticSpec] = None,
    out_dir: Optional[str | Path] = None,
    device: Optional[str] = None,
) -> BenchmarkResult:
    if bench.data not in DATA_PRESETS and data_spec is None:
        raise ConfigError(f"unknown data preset {bench.data!r}")
    if bench.train not in TRAIN_PRESETS and train_cfg is None:
        raise ConfigError(f"unknown training preset {bench.train!r}")
    spec = data_spec or DATA_PRESETS[bench.data]
    base_cfg = train_cfg or TRAIN_PRESETS[bench.train]
    out = Path(out_dir) if out_dir else None
    variants = dict(VARIANTS)
    if bench.ablations:
        variants.update(ABLATIONS)

    result = BenchmarkResult(config={"benchmark": asdict(bench), "train": base_cfg.to_dict(), "data_seed_offset": TEST_SEED_OFFSET})
    for seed in bench.seeds:
        t0 = time.perf_counter()
        with tracer.start_as_current_span("benchmark.seed", attributes={"benchmark.seed": seed}) as span:
            try:
                data = generate_dataset(spec.with_seed(seed))
                test = generate_dataset(replace(spec.with_seed(seed + TEST_SEED_OFFSET), prefix="test"))
                split = ClassSplit.from_novel(data.num_classes, bench.novel)
                base_set = data.restrict_to_classes(split.base_classes)
                kshot = _kshot_sets(data, bench, base_cfg, seed)

                base_cache: dict[str, Checkpoint] = {}
                for name, changes in variants.items():
                    cfg = replace(base_cfg, seed=seed, **changes)
                    # single-scale base stages without refinement are identical across variants
                    plain = not cfg.refines_in("base") and cfg.multiscale == "none" and cfg.mode != "baseline"
                    key = "plain" if plain else fingerprint(cfg.to_dict())
                    logs = out / "logs" if out else None
                    if key not in base_cache:
                        base_cache[key] = train_base(
                            base_set, cfg, device=device,
                            log_path=logs / f"{seed}_{name}_base.jsonl" if logs else None,
                        )
                    regimes = ("random", "limited") if name in BOTH_REGIMES else ("random",)
                    for regime in regimes:
                        ft = finetune(
                            base_cache[key], kshot[regime], cfg, device=device,
                            log_path=logs / f"{seed}_{name}_{regime}.jsonl" if logs else None,
                        )
                        rep = evaluate(ft, test, split, device=device or "cpu")
                        result.rows.append({
                            "seed": seed, "variant": name, "regime": regime,
                            "novel_map": rep.novel_map, "base_map": rep.base_map,
                            "config_hash": fingerprint(cfg.to_dict()),
                        })
                        logger.info("benchmark.run", extra={
                            "seed": seed, "variant": name, "regime": regime, "novel_map": rep.novel_map,
                        })
                span.set_attribute("benchmark.elapsed_ms", int((time.perf_counter() - t0) * 1000))
            except Exception as e:
                logger.exception("benchmark.error", extra={"seed": seed})
                span.record_exception(e)
                span.set_status(Status(StatusCode.ERROR, str(e)))
                raise

    if out:
        out.mkdir(parents=True, exist_ok=True)
        result.to_json(out / "benchmark.json")
    logger.info("benchmark.done", extra=result.wins())
    return result

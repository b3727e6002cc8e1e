from __future__ import annotations
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal, Mapping, Optional

from ..config import apply_mapping, read_config_file
from ..detector.schemas import FULL_SCALE_INPUT, DetectorConfig
from ..errors import ConfigError, ValidationError

Mode = Literal["baseline", "baseline_fpn", "mpsr"]
RefineStage = Literal["base_only", "fewshot_only", "both"]
PyramidSelection = Literal["manual", "anchor_match"]
Multiscale = Literal["none", "scale_aug", "image_pyramids"]
Stage = Literal["base", "finetune"]

# Shorter sides of the multi-scale baselines at min_size = 800
MULTISCALE_SIDES: tuple[int, ...] = (480, 576, 688, 864, 1200)


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = "mpsr"
    refine_rpn: bool = True
    refine_roi: bool = True
    refine_stage: RefineStage = "both"
    pyramid_selection: PyramidSelection = "manual"
    multiscale: Multiscale = "none"
    multiscale_sides: tuple[int, ...] = MULTISCALE_SIDES
    lam: float = 0.1
    # SGD
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: tuple[tuple[int, float], ...] = ((2000, 0.01), (500, 0.001))            # base training
    finetune_schedule: tuple[tuple[int, float], ...] = ((300, 0.01), (100, 0.001))
    batch_size: int = 2
    seed: int = 0
    # sampling
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    roi_batch: int = 32
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    shift_frac: float = 0.1
    log_every: int = 20
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self) -> None:
        if self.mode == "mpsr" and not (self.refine_rpn or self.refine_roi):
            raise ValidationError("mode=mpsr needs refine_rpn or refine_roi")
        if self.batch_size < 1 or self.rpn_batch < 1 or self.roi_batch < 1:
            raise ValidationError("batch sizes must be >= 1")
        for name in ("rpn_pos_fraction", "roi_fg_fraction", "roi_fg_iou"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValidationError(f"{name} must be in (0, 1], got {v}")
        if self.lam < 0:
            raise ValidationError(f"lam must be >= 0, got {self.lam}")
        for name in ("schedule", "finetune_schedule"):
            for iters, lr in getattr(self, name):
                if iters < 0 or lr <= 0:
                    raise ValidationError(f"{name}: bad phase ({iters}, {lr})")
        if not self.multiscale_sides or any(s <= 0 for s in self.multiscale_sides):
            raise ValidationError(f"multiscale_sides must be positive, got {self.multiscale_sides}")

    def refines_in(self, stage: Stage) -> bool:
        """Whether the refinement branch is active in `stage`."""
        if self.mode != "mpsr":
            return False
        if stage == "base":
            return self.refine_stage in ("base_only", "both")
        return self.refine_stage in ("fewshot_only", "both")

    def schedule_for(self, stage: Stage) -> tuple[tuple[int, float], ...]:
        return self.schedule if stage == "base" else self.finetune_schedule

    def detector_for(self, class_ids) -> DetectorConfig:
        """Detector config for this mode serving `class_ids` (single-level neck for plain baseline)."""
        return replace(self.detector, use_fpn=self.mode != "baseline", class_ids=tuple(int(c) for c in class_ids))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        det = DetectorConfig.from_dict(d.pop("detector", {}))
        for k in ("schedule", "finetune_schedule"):
            if k in d:
                d[k] = tuple((int(i), float(lr)) for i, lr in d[k])
        if "multiscale_sides" in d:
            d["multiscale_sides"] = tuple(d["multiscale_sides"])
        return cls(detector=det, **d)


PRESETS: dict[str, TrainConfig] = {
    "desk": TrainConfig(),
    "full": TrainConfig(
        schedule=((240000, 0.005), (8000, 0.0005), (4000, 0.00005)),
        finetune_schedule=((1300, 0.005), (400, 0.0005), (300, 0.00005)),
        batch_size=4,
        rpn_batch=256,
        roi_batch=512,
        detector=DetectorConfig(
            backbone_width=64, fpn_channels=256, head_hidden=1024,
            pre_nms_topk=2000, post_nms_topk=1000, **FULL_SCALE_INPUT,
        ),
    ),
    "tiny": TrainConfig(
        schedule=((6, 0.01),),
        finetune_schedule=((4, 0.01),),
        batch_size=1,
        rpn_batch=32,
        roi_batch=16,
        log_every=1,
        detector=DetectorConfig(
            backbone_width=4, backbone_depth=0, fpn_channels=8, head_hidden=16,
            pre_nms_topk=64, post_nms_topk=16, min_size=64, max_size=107,
        ),
    ),
}


def load_train_config(
    path: Optional[str | Path] = None,
    *,
    preset: str = "desk",
    overrides: Optional[Mapping[str, str]] = None,
) -> TrainConfig:
    """
    Preset, then KEY=VALUE file, then `overrides` (CLI flags). Keys naming
    DetectorConfig fields are applied to the nested detector config.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {sorted(PRESETS)})")
    values: dict[str, str] = {}
    if path:
        values.update(read_config_file(path))
    values.update({k.lower(): str(v) for k, v in (overrides or {}).items()})

    base = PRESETS[preset]
    try:
        cfg, rest = apply_mapping(base, {k: v for k, v in values.items() if k != "detector"}, strict=False)
        det, _ = apply_mapping(cfg.detector, rest, strict=True)
        return replace(cfg, detector=det)
    except ValidationError as e:
        raise ConfigError(f"invalid training config: {e}") from e

from __future__ import annotations
from dataclasses import asdict, dataclass

import torch

from ..datamodel.schemas import Box
from ..errors import ValidationError

LEVEL_STRIDES = {2: 4, 3: 8, 4: 16, 5: 32, 6: 64}
CANVAS_MULTIPLE = 64


@dataclass
class FPNFeatures:
    """Feature maps keyed by pyramid level; each tensor is (N, C, H_l, W_l)."""
    maps: dict[int, torch.Tensor]

    @property
    def levels(self) -> list[int]:
        return sorted(self.maps)

    @property
    def channels(self) -> int:
        return next(iter(self.maps.values())).shape[1]

    def shape(self, level: int) -> tuple[int, int, int]:
        _, c, h, w = self.maps[level].shape
        return int(c), int(h), int(w)

    def shapes(self) -> dict[int, tuple[int, int, int]]:
        return {l: self.shape(l) for l in self.levels}

    def __getitem__(self, level: int) -> torch.Tensor:
        return self.maps[level]


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float


@dataclass(frozen=True)
class DetectorConfig:
    # backbone
    backbone_width: int = 16           # channels of the first stage; doubles per stage up to 8x
    backbone_depth: int = 1            # extra 3x3 convs per stage
    fpn_channels: int = 64
    use_fpn: bool = True               # False: single stride-16 map (the plain Faster R-CNN baseline)
    # heads
    roi_output_size: int = 7
    roi_sampling_ratio: int = 2
    head_hidden: int = 256
    class_ids: tuple[int, ...] = (0,)  # global class ids; classifier output j+1 <-> class_ids[j]
    class_agnostic_regression: bool = True
    # anchors / matching
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    box_stds: tuple[float, ...] = (0.1, 0.1, 0.2, 0.2)
    # proposals / inference
    pre_nms_topk: int = 256
    post_nms_topk: int = 64
    rpn_nms_iou: float = 0.7
    nms_iou: float = 0.5
    score_threshold: float = 0.05
    max_detections: int = 100
    # input
    min_size: int = 128
    max_size: int = 213
    pixel_mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    pixel_std: tuple[float, ...] = (0.25, 0.25, 0.25)

    def __post_init__(self) -> None:
        positive = {
            "backbone_width": self.backbone_width, "fpn_channels": self.fpn_channels,
            "roi_output_size": self.roi_output_size, "head_hidden": self.head_hidden,
            "pre_nms_topk": self.pre_nms_topk, "post_nms_topk": self.post_nms_topk,
            "max_detections": self.max_detections, "min_size": self.min_size, "max_size": self.max_size,
            "num_classes": len(self.class_ids),
        }
        bad = [k for k, v in positive.items() if v <= 0]
        if bad:
            raise ValidationError(f"detector config counts must be positive: {bad}")
        if self.backbone_depth < 0:
            raise ValidationError("backbone_depth must be >= 0")
        if not self.class_agnostic_regression:
            raise ValidationError("class-specific regression is not supported")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValidationError(f"duplicate class ids: {self.class_ids}")

    @property
    def num_classes(self) -> int:
        """K, excluding background."""
        return len(self.class_ids)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        for k in ("class_ids", "box_stds", "pixel_mean", "pixel_std"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# Full-scale input policy of the `full` preset
FULL_SCALE_INPUT = {"min_size": 800, "max_size": 1333}

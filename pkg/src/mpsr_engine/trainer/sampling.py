"""Per-step sampling: which object gets a pyramid, which anchors and RoIs enter the losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..datamodel.schemas import Annotation, ImageRecord
from ..geometry import BoxCoder, MatchResult, pairwise_iou
from ..mpsr.pyramid import ObjectPyramid, PyramidScaleSet, build_object_pyramid
from .schemas import TrainConfig


def choose_annotation(image: ImageRecord, rng: np.random.Generator) -> Optional[Annotation]:
    if not image.annotations:
        return None
    return image.annotations[int(rng.integers(len(image.annotations)))]


def sample_pyramid_for_image(
    image: ImageRecord,
    rng: np.random.Generator,
    *,
    shift_frac: float = 0.1,
    scales: PyramidScaleSet = PyramidScaleSet(),
    pixels: Optional[np.ndarray] = None,
) -> Optional[ObjectPyramid]:
    """Object pyramid of one uniformly chosen annotation; None when the image has none."""
    ann = choose_annotation(image, rng)
    if ann is None:
        return None
    return build_object_pyramid(image, ann, rng, shift_frac=shift_frac, scales=scales, pixels=pixels)


def sample_anchors(
    match: MatchResult,
    rng: np.random.Generator,
    batch: int = 64,
    pos_fraction: float = 0.5,
) -> np.ndarray:
    """Up to batch*pos_fraction positives, negatives fill the rest. Sorted anchor indices."""
    pos, neg = match.positives, match.negatives
    n_pos = min(len(pos), int(batch * pos_fraction))
    n_neg = min(len(neg), batch - n_pos)
    chosen = np.concatenate([
        rng.choice(pos, size=n_pos, replace=False) if n_pos else np.zeros(0, dtype=np.int64),
        rng.choice(neg, size=n_neg, replace=False) if n_neg else np.zeros(0, dtype=np.int64),
    ])
    return np.sort(chosen.astype(np.int64))


@dataclass(frozen=True)
class RoISample:
    boxes: np.ndarray     # (R, 4) proposals in resized-image pixels
    labels: np.ndarray    # (R,) 0 = background, j + 1 = class_ids[j]
    targets: np.ndarray   # (R, 4) encoded deltas, zero for background

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def sample_rois(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    rng: np.random.Generator,
    *,
    batch: int = 32,
    fg_fraction: float = 0.25,
    fg_iou: float = 0.5,
    coder: BoxCoder = BoxCoder(),
) -> RoISample:
    """
    GT boxes join the proposals; a proposal is foreground when its best IoU
    with a GT is >= fg_iou, background otherwise.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    boxes = np.concatenate([np.asarray(proposals, dtype=np.float64).reshape(-1, 4), gt_boxes], axis=0)
    if gt_boxes.shape[0]:
        ious = pairwise_iou(boxes, gt_boxes)
        best = ious.argmax(axis=1)
        max_iou = ious[np.arange(len(boxes)), best]
    else:
        best = np.zeros(len(boxes), dtype=np.int64)
        max_iou = np.zeros(len(boxes))

    fg = np.flatnonzero(max_iou >= fg_iou)
    bg = np.flatnonzero(max_iou < fg_iou)
    n_fg = min(len(fg), int(round(batch * fg_fraction)))
    n_bg = min(len(bg), batch - n_fg)
    fg = rng.choice(fg, size=n_fg, replace=False) if n_fg else fg[:0]
    bg = rng.choice(bg, size=n_bg, replace=False) if n_bg else bg[:0]
    keep = np.concatenate([fg, bg]).astype(np.int64)

    labels = np.zeros(len(keep), dtype=np.int64)
    targets = np.zeros((len(keep), 4), dtype=np.float64)
    if n_fg:
        labels[:n_fg] = np.asarray(gt_labels, dtype=np.int64)[best[fg]]
        targets[:n_fg] = coder.encode(boxes[fg], gt_boxes[best[fg]])
    return RoISample(boxes[keep], labels, targets)


def multiscale_sides(cfg: TrainConfig) -> tuple[int, ...]:
    """The multi-scale side set rescaled to the detector's input size."""
    f = cfg.detector.min_size / 800.0
    return tuple(max(1, int(round(s * f))) for s in cfg.multiscale_sides)


def shorter_sides_for_image(cfg: TrainConfig, rng: np.random.Generator) -> tuple[Optional[int], ...]:
    """
    Input sides one image is trained at in one step: the detector's own size,
    one random side (scale_aug), or every side (image_pyramids).
    """
    if cfg.multiscale == "none":
        return (None,)
    sides = multiscale_sides(cfg)
    if cfg.multiscale == "scale_aug":
        return (sides[int(rng.integers(len(sides)))],)
    return sides


def max_size_for(cfg: TrainConfig, side: Optional[int]) -> Optional[int]:
    """Longer-side cap that keeps the detector's max/min ratio at `side`."""
    if side is None:
        return None
    return int(round(side * cfg.detector.max_size / cfg.detector.min_size))

"""Box arithmetic, anchors, IoU matching and object crop windows.

Boxes are (x1, y1, x2, y2) in continuous pixels with exclusive x2/y2, so a
box's width is x2 - x1. Batched functions take (N, 4) float arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .datamodel.schemas import Box, ImageRecord
from .errors import ValidationError

# (width : height) ratios; anchors are laid out in this order inside a cell
ASPECT_RATIOS: tuple[float, ...] = (0.5, 1.0, 2.0)

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class LevelSpec:
    level: int
    stride: int
    areas: tuple[float, ...]


# P2..P6: stride 2^l, one anchor area per level
FPN_LEVELS: tuple[LevelSpec, ...] = tuple(
    LevelSpec(level=l, stride=2 ** l, areas=(float(s * s),))
    for l, s in zip(range(2, 7), (32, 64, 128, 256, 512))
)

# Single stride-16 map carrying every area (the non-FPN baseline detector)
SINGLE_LEVEL: tuple[LevelSpec, ...] = (
    LevelSpec(level=4, stride=16, areas=tuple(float(s * s) for s in (32, 64, 128, 256, 512))),
)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix of shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def pairwise_intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    return wh[..., 0] * wh[..., 1]


def object_scale(b: Box) -> float:
    """s = sqrt(w * h); an object of "32^2 pixels" has s = 32."""
    return math.sqrt(b.width * b.height)


def resize_factor(width: int, height: int, shorter_side: int | None, max_size: int | None = 1333) -> float:
    """Factor that brings the shorter side to `shorter_side` without the longer side exceeding `max_size`."""
    if shorter_side is None:
        return 1.0
    f = shorter_side / min(width, height)
    if max_size is not None and max(width, height) * f > max_size:
        f = max_size / max(width, height)
    return f


# ---- anchors -----------------------------------------------------------------

def _cell_anchors(areas: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """Zero-centred anchors ordered area-major, ratio-minor."""
    out = []
    for area in areas:
        for r in ratios:
            w = math.sqrt(area * r)
            h = math.sqrt(area / r)
            out.append((-w / 2, -h / 2, w / 2, h / 2))
    return np.asarray(out, dtype=np.float64)


@dataclass(frozen=True)
class AnchorGrid:
    levels: tuple[LevelSpec, ...]
    shapes: tuple[tuple[int, int], ...]   # (H_l, W_l) per level
    ratios: tuple[float, ...]
    anchors: np.ndarray                   # (N, 4), order: level, row, col, area, ratio
    offsets: tuple[int, ...]              # first anchor index of each level

    @property
    def num_anchors(self) -> int:
        return int(self.anchors.shape[0])

    def per_cell(self, i: int = 0) -> int:
        return len(self.levels[i].areas) * len(self.ratios)

    def level_index(self, level: int) -> int:
        for i, spec in enumerate(self.levels):
            if spec.level == level:
                return i
        raise KeyError(f"level P{level} not in grid")

    def index(self, level: int, row: int, col: int, k: int) -> int:
        """Flat anchor index of anchor k in cell (row, col) of `level`."""
        i = self.level_index(level)
        _, w = self.shapes[i]
        return self.offsets[i] + (row * w + col) * self.per_cell(i) + k

    def level_slice(self, level: int) -> slice:
        i = self.level_index(level)
        h, w = self.shapes[i]
        start = self.offsets[i]
        return slice(start, start + h * w * self.per_cell(i))


def generate_anchors(
    image_size: tuple[int, int],
    levels: Sequence[LevelSpec] = FPN_LEVELS,
    ratios: Sequence[float] = ASPECT_RATIOS,
) -> AnchorGrid:
    """
    Anchors for a padded canvas of `image_size` = (H, W). Every cell of level l
    (H_l = ceil(H / stride)) gets one anchor per (area, ratio), centred on the
    cell centre ((col + 0.5) * stride, (row + 0.5) * stride).
    """
    height, width = image_size
    chunks, shapes, offsets = [], [], []
    total = 0
    for spec in levels:
        h, w = math.ceil(height / spec.stride), math.ceil(width / spec.stride)
        base = _cell_anchors(spec.areas, ratios)
        cx = (np.arange(w) + 0.5) * spec.stride
        cy = (np.arange(h) + 0.5) * spec.stride
        sx, sy = np.meshgrid(cx, cy)                       # (h, w)
        shifts = np.stack([sx, sy, sx, sy], axis=-1).reshape(-1, 1, 4)
        anchors = (shifts + base[None, :, :]).reshape(-1, 4)
        chunks.append(anchors)
        shapes.append((h, w))
        offsets.append(total)
        total += anchors.shape[0]
    return AnchorGrid(
        levels=tuple(levels),
        shapes=tuple(shapes),
        ratios=tuple(ratios),
        anchors=np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 4)),
        offsets=tuple(offsets),
    )


# ---- box coding ----------------------------------------------------------------

@dataclass(frozen=True)
class BoxCoder:
    """(dx/w, dy/h, log dw, log dh) deltas, normalized by means/stds."""
    means: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    stds: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)
    clamp: float = math.log(1000.0 / 16)

    def encode(self, ref: np.ndarray, gt: np.ndarray) -> np.ndarray:
        ref = np.asarray(ref, dtype=np.float64).reshape(-1, 4)
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
        rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
        rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
        gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
        gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
        d = np.stack([(gx - rx) / rw, (gy - ry) / rh, np.log(gw / rw), np.log(gh / rh)], axis=1)
        return (d - np.asarray(self.means)) / np.asarray(self.stds)

    def decode(self, ref: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
        means = deltas.new_tensor(self.means)
        stds = deltas.new_tensor(self.stds)
        d = deltas * stds + means
        rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
        rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
        cx = d[:, 0] * rw + rx
        cy = d[:, 1] * rh + ry
        w = torch.exp(d[:, 2].clamp(max=self.clamp)) * rw
        h = torch.exp(d[:, 3].clamp(max=self.clamp)) * rh
        return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, height: float, width: float) -> torch.Tensor:
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


# ---- matching ------------------------------------------------------------------

@dataclass(frozen=True)
class MatchResult:
    labels: np.ndarray       # (N,) int8: POSITIVE / NEGATIVE / IGNORE
    matched_gt: np.ndarray   # (N,) int64, -1 unless positive
    targets: np.ndarray      # (N, 4) regression targets, zero unless positive
    max_iou: np.ndarray      # (N,) best IoU with any GT

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def match_anchors(
    grid: AnchorGrid | np.ndarray,
    gts: Sequence[Box] | np.ndarray,
    pos_thr: float = 0.7,
    neg_thr: float = 0.3,
    coder: BoxCoder = BoxCoder(),
) -> MatchResult:
    """
    Faster R-CNN labelling: positive if IoU >= pos_thr with some GT, or the anchor
    is a highest-IoU anchor for some GT (ties included); negative if its max IoU
    < neg_thr; everything else is ignored.
    """
    if not 0.0 <= neg_thr <= pos_thr <= 1.0:
        raise ValueError(f"need 0 <= neg_thr <= pos_thr <= 1, got {neg_thr}, {pos_thr}")
    anchors = grid.anchors if isinstance(grid, AnchorGrid) else np.asarray(grid, dtype=np.float64)
    n = anchors.shape[0]
    gt_arr = (
        np.stack([g.as_array() for g in gts]) if len(gts) and isinstance(gts[0], Box)
        else np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    )

    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)
    if gt_arr.shape[0] == 0 or n == 0:
        return MatchResult(labels, matched, targets, np.zeros(n))

    ious = pairwise_iou(anchors, gt_arr)            # (N, G)
    best_gt = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), best_gt]

    labels[:] = IGNORE
    labels[max_iou < neg_thr] = NEGATIVE
    pos = max_iou >= pos_thr
    gt_best = ious.max(axis=0)                        # (G,)
    for g in range(gt_arr.shape[0]):
        if gt_best[g] > 0:
            pos |= ious[:, g] == gt_best[g]
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    if pos.any():
        targets[pos] = coder.encode(anchors[pos], gt_arr[best_gt[pos]])
    return MatchResult(labels, matched, targets, max_iou)


# ---- object crops ----------------------------------------------------------------

def crop_window(b: Box, image: ImageRecord, rng: np.random.Generator, shift_frac: float = 0.1) -> Box:
    """
    Square window of side L = max(w, h) around `b`, centre displaced by
    U(-shift_frac*L, shift_frac*L) per axis, then pulled back so it still
    contains `b`. The window may overhang the image; callers zero-pad.
    """
    if b.x1 < 0 or b.y1 < 0 or b.x2 > image.width or b.y2 > image.height:
        raise ValidationError(f"image {image.image_id}: box {b.as_array().tolist()} outside the image")
    side = max(b.width, b.height)
    cx, cy = b.center
    dx, dy = rng.uniform(-shift_frac, shift_frac, size=2) * side
    x1 = cx + dx - side / 2
    y1 = cy + dy - side / 2
    # containment: x1 in [b.x2 - side, b.x1]
    x1 = min(max(x1, b.x2 - side), b.x1)
    y1 = min(max(y1, b.y2 - side), b.y1)
    return Box(x1, y1, x1 + side, y1 + side)

"""Manual level and location selection for object pyramids.

Instead of matching anchors on a single-object crop, every pyramid scale gets
one RPN level and one RoI level from a fixed table, the RPN positives are the
anchors on the centric 2x2 cells of the object's region, and the RoI sample
is the whole object region of the RoI level pooled to the RoI size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from ..detector.schemas import LEVEL_STRIDES, FPNFeatures
from ..geometry import ASPECT_RATIOS, FPN_LEVELS, AnchorGrid, MatchResult, generate_anchors, match_anchors
from .pyramid import ObjectPyramid


@dataclass(frozen=True)
class LevelAssignment:
    side: int
    rpn_level: int
    roi_level: int


# scale -> (RPN level, RoI level)
LEVEL_TABLE: tuple[LevelAssignment, ...] = (
    LevelAssignment(32, 2, 2),
    LevelAssignment(64, 3, 2),
    LevelAssignment(128, 4, 2),
    LevelAssignment(256, 5, 3),
    LevelAssignment(512, 6, 4),
    LevelAssignment(800, 6, 5),
)


def assign_levels(scale_index: int) -> tuple[int, int]:
    if not 0 <= scale_index < len(LEVEL_TABLE):
        raise IndexError(f"scale index {scale_index} not in [0, {len(LEVEL_TABLE)})")
    a = LEVEL_TABLE[scale_index]
    return a.rpn_level, a.roi_level


def content_cells(side: int, level: int) -> int:
    """Cells of `level` covered by a crop of `side` pixels (partial cells count)."""
    return int(math.ceil(side / LEVEL_STRIDES[level]))


def centric_indices(n: int) -> tuple[int, ...]:
    """Two central indices of a length-n axis; lower pair for odd n, one index for n == 1."""
    if n < 1:
        raise ValueError(f"axis length must be >= 1, got {n}")
    start = max(0, (n - 2) // 2)
    return tuple(range(start, min(start + 2, n)))


def select_rpn_positives(
    feature_map_shape: tuple[int, int],
    num_ratios: int = len(ASPECT_RATIOS),
) -> list[tuple[int, int, int]]:
    """(row, col, ratio index) positives: up to 4 centric cells x every ratio."""
    h, w = feature_map_shape
    return [(r, c, k) for r in centric_indices(h) for c in centric_indices(w) for k in range(num_ratios)]


@dataclass(frozen=True)
class RefinementTargets:
    scale_index: int
    rpn_level: int
    cells: tuple[tuple[int, int], ...]
    anchor_indices: tuple[int, ...]     # into the level's flattened (row, col, ratio) anchor map
    roi_level: int
    roi_region: tuple[int, int]         # content (rows, cols) of the RoI level pooled as one RoI
    class_id: int

    @property
    def num_rpn_positives(self) -> int:
        return len(self.anchor_indices)


def refinement_targets(
    pyramid: ObjectPyramid,
    scale_index: int,
    num_ratios: int = len(ASPECT_RATIOS),
) -> RefinementTargets:
    side = pyramid.scales[scale_index]
    canvas = pyramid.canvas_sides[scale_index]
    rpn_level, roi_level = assign_levels(scale_index)

    n = content_cells(side, rpn_level)
    positives = select_rpn_positives((n, n), num_ratios)
    map_w = canvas // LEVEL_STRIDES[rpn_level]
    indices = tuple((r * map_w + c) * num_ratios + k for r, c, k in positives)
    cells = tuple(dict.fromkeys((r, c) for r, c, _ in positives))

    m = content_cells(side, roi_level)
    return RefinementTargets(
        scale_index=scale_index,
        rpn_level=rpn_level,
        cells=cells,
        anchor_indices=indices,
        roi_level=roi_level,
        roi_region=(m, m),
        class_id=pyramid.class_id,
    )


def select_roi_refinement(
    fpn_features: FPNFeatures,
    roi_level: int,
    output_size: int = 7,
    content_shape: Optional[tuple[int, int]] = None,
) -> torch.Tensor:
    """
    Adaptive average pooling of the content region (top-left `content_shape`
    cells, default the whole map) of `roi_level` to output_size x output_size.
    Returns (N, C, output_size, output_size).
    """
    fmap = fpn_features[roi_level]
    if content_shape is not None:
        fmap = fmap[:, :, : content_shape[0], : content_shape[1]]
    return F.adaptive_avg_pool2d(fmap, output_size)


def anchor_match_on_pyramids(
    pyramid: ObjectPyramid,
    grids: Optional[Sequence[AnchorGrid]] = None,
    pos_thr: float = 0.7,
    neg_thr: float = 0.3,
) -> list[MatchResult]:
    """
    Standard IoU matching on every crop with its object box as the only GT.
    Unlike the manual selection above, this produces negatives on the crops.
    """
    if grids is None:
        grids = [generate_anchors((c, c), FPN_LEVELS) for c in pyramid.canvas_sides]
    return [
        match_anchors(grid, [box], pos_thr=pos_thr, neg_thr=neg_thr)
        for grid, box in zip(grids, pyramid.object_boxes)
    ]

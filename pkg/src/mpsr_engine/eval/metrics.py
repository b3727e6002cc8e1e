from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from ..geometry import NEGATIVE, AnchorGrid, MatchResult, pairwise_intersection, pairwise_iou

# intersection-with-GT / anchor-area at which a negative anchor counts as improper
IMPROPER_NEGATIVE_THR = 0.3


@dataclass(frozen=True)
class ScoredBox:
    image_id: str
    box: np.ndarray   # (4,)
    score: float


def average_precision(recall: Sequence[float], precision: Sequence[float]) -> float:
    """
    All-points interpolated AP: area under the precision envelope, where the
    precision at recall r is the best precision at any recall >= r.
    """
    rec = np.asarray(recall, dtype=np.float64)
    pre = np.asarray(precision, dtype=np.float64)
    order = np.argsort(rec, kind="stable")
    mrec = np.concatenate(([0.0], rec[order], [1.0]))
    mpre = np.concatenate(([0.0], pre[order], [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[i] - mrec[i - 1]) * mpre[i]))


def voc_ap(
    detections: Sequence[ScoredBox],
    ground_truth: Mapping[str, np.ndarray],
    iou_thr: float = 0.5,
) -> Optional[float]:
    """
    AP of one class. Detections are visited by descending score (stable on
    ties); each one takes its highest-IoU GT in the same image, and is a true
    positive only if that GT is unmatched and the IoU reaches `iou_thr`.
    Returns None when the class has no GT.
    """
    gts = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in ground_truth.items()}
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    if not detections:
        return 0.0

    scores = np.array([d.score for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        d = detections[i]
        g = gts.get(d.image_id)
        if g is None or len(g) == 0:
            continue
        ious = pairwise_iou(d.box[None], g)[0]
        j = int(ious.argmax())
        if ious[j] >= iou_thr and not used[d.image_id][j]:
            used[d.image_id][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    return average_precision(recall, precision)


def improper_negative_count(
    grid: AnchorGrid | np.ndarray,
    match: MatchResult,
    gts: np.ndarray,
    thr: float = IMPROPER_NEGATIVE_THR,
) -> int:
    """Negative anchors that still contain a substantial object part (intersection / anchor area >= thr)."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    neg = np.flatnonzero(match.labels == NEGATIVE)
    if gts.shape[0] == 0 or neg.size == 0:
        return 0
    anchors = (grid.anchors if isinstance(grid, AnchorGrid) else np.asarray(grid, dtype=np.float64))[neg]
    inter = pairwise_intersection(anchors, gts)
    area = (anchors[:, 2] - anchors[:, 0]) * (anchors[:, 3] - anchors[:, 1])
    cover = inter.max(axis=1) / np.maximum(area, 1e-12)
    return int(np.count_nonzero(cover >= thr))

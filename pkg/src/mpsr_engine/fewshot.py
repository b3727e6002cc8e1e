"""k-shot and limited-scale subsets, and object-scale histograms.

Object scale is s = sqrt(w * h) measured after the detector's resize policy
(shorter side to `shorter_side`, longer side capped at 1333), so "between
128^2 and 256^2 pixels" reads as 128 <= s < 256.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datamodel.schemas import Annotation, Dataset, ImageRecord
from .errors import FewShotError, ValidationError
from .geometry import object_scale, resize_factor

logger = logging.getLogger("mpsr.fewshot")

MAX_SIZE = 1333


@dataclass(frozen=True)
class KShotConfig:
    k: int
    seed: int
    classes: frozenset[int]

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class ScaleRange:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        # lo may be 0 so that [0, inf) expresses "no constraint"
        if not (0 <= self.lo < self.hi):
            raise ValidationError(f"scale range needs 0 <= lo < hi, got [{self.lo}, {self.hi})")

    def __contains__(self, s: float) -> bool:
        return self.lo <= s < self.hi

    @classmethod
    def unbounded(cls) -> "ScaleRange":
        return cls(0.0, math.inf)


@dataclass(frozen=True)
class ScaleHistogram:
    edges: tuple[float, ...]
    counts: dict[int, np.ndarray]      # class_id -> counts per bin
    shorter_side: int | None
    max_size: int | None = MAX_SIZE
    measured: int = 0                  # instances that fell into some bin
    out_of_range: int = 0              # instances outside [edges[0], edges[-1])

    def total(self) -> int:
        return int(sum(int(c.sum()) for c in self.counts.values()))

    def mode_bin(self, class_id: int | None = None) -> tuple[float, float]:
        if class_id is None:
            agg = np.sum(list(self.counts.values()), axis=0)
        else:
            agg = self.counts[class_id]
        i = int(np.argmax(agg))
        return self.edges[i], self.edges[i + 1]

    def to_csv(self, path: str | Path, class_names: Sequence[str]) -> None:
        """Rows `class,bin_lo,bin_hi,count`, one per class and bin."""
        with Path(path).open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["class", "bin_lo", "bin_hi", "count"])
            for cid in sorted(self.counts):
                for i, c in enumerate(self.counts[cid]):
                    w.writerow([class_names[cid], self.edges[i], self.edges[i + 1], int(c)])


def instance_scale(image: ImageRecord, ann: Annotation, shorter_side: int | None, max_size: int | None = MAX_SIZE) -> float:
    return object_scale(ann.box) * resize_factor(image.width, image.height, shorter_side, max_size)


def _sample(
    dataset: Dataset,
    cfg: KShotConfig,
    eligible: Callable[[ImageRecord, Annotation], bool],
) -> tuple[Dataset, dict[int, int]]:
    # candidate pool per class in dataset order: (image index, annotation index)
    pools: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for i, im in enumerate(dataset.images):
        for j, a in enumerate(im.annotations):
            if a.class_id in cfg.classes and eligible(im, a):
                pools[a.class_id].append((i, j))

    available = {c: len(pools[c]) for c in sorted(cfg.classes)}
    short = {c: n for c, n in available.items() if n < cfg.k}
    if short:
        c, n = next(iter(short.items()))
        raise FewShotError(f"class {c} has {n} < {cfg.k} (candidates per class: {available})")

    rng = np.random.default_rng(cfg.seed)
    chosen: dict[int, set[int]] = defaultdict(set)
    for c in sorted(cfg.classes):
        pool = pools[c]
        for p in rng.choice(len(pool), size=cfg.k, replace=False):
            i, j = pool[int(p)]
            chosen[i].add(j)

    images = []
    for i, im in enumerate(dataset.images):
        if i in chosen:
            keep = [a for j, a in enumerate(im.annotations) if j in chosen[i]]
            images.append(im.with_annotations(keep))
    return Dataset(tuple(images), dataset.class_names), available


def build_kshot_subset(dataset: Dataset, cfg: KShotConfig) -> Dataset:
    """
    Exactly cfg.k annotations per class in cfg.classes, drawn uniformly without
    replacement at instance level. Only selected annotations survive; images
    without a selected annotation are dropped.
    """
    subset, available = _sample(dataset, cfg, lambda im, a: True)
    logger.info(
        "fewshot.kshot",
        extra={"k": cfg.k, "seed": cfg.seed, "classes": len(cfg.classes), "images": len(subset.images)},
    )
    return subset


def build_limited_scale_subset(
    dataset: Dataset,
    cfg: KShotConfig,
    scale_range: ScaleRange,
    shorter_side: int | None = 800,
    max_size: int | None = MAX_SIZE,
    confined: frozenset[int] | None = None,
) -> Dataset:
    """
    As build_kshot_subset, but instances of the `confined` classes (all of
    cfg.classes when None) are eligible only when their post-resize scale lies
    in [lo, hi). The other classes keep the unconstrained draw.
    """
    confined = cfg.classes if confined is None else frozenset(confined)
    subset, available = _sample(
        dataset, cfg,
        lambda im, a: a.class_id not in confined or instance_scale(im, a, shorter_side, max_size) in scale_range,
    )
    logger.info(
        "fewshot.limited",
        extra={"k": cfg.k, "seed": cfg.seed, "lo": scale_range.lo, "hi": scale_range.hi,
               "confined": sorted(confined), "in_range": available},
    )
    return subset


def scale_histogram(
    dataset: Dataset,
    bins: Sequence[float],
    shorter_side: int | None = 800,
    max_size: int | None = MAX_SIZE,
) -> ScaleHistogram:
    """Per-class counts of post-resize object scale over bins [edges[i], edges[i+1])."""
    edges = tuple(float(b) for b in bins)
    if len(edges) < 2 or any(b >= a for a, b in zip(edges[1:], edges[:-1])):
        raise ValidationError(f"bins must be strictly increasing with >= 2 edges, got {list(bins)}")

    counts = {c: np.zeros(len(edges) - 1, dtype=np.int64) for c in range(dataset.num_classes)}
    measured = out = 0
    for im in dataset.images:
        for a in im.annotations:
            s = instance_scale(im, a, shorter_side, max_size)
            i = int(np.searchsorted(edges, s, side="right")) - 1
            if 0 <= i < len(edges) - 1:
                counts[a.class_id][i] += 1
                measured += 1
            else:
                out += 1
    return ScaleHistogram(edges, counts, shorter_side, max_size, measured, out)


def render_histogram_chart(hist: ScaleHistogram, path: str | Path, class_names: Sequence[str]) -> None:
    """Grouped bar chart, one bar group per scale bin."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [f"{lo:g}-{hi:g}" for lo, hi in zip(hist.edges[:-1], hist.edges[1:])]
    x = np.arange(len(labels))
    classes = [c for c in sorted(hist.counts) if hist.counts[c].sum() > 0] or sorted(hist.counts)
    width = 0.8 / max(1, len(classes))

    fig, ax = plt.subplots(figsize=(max(6, len(labels) * 0.9), 4))
    for n, c in enumerate(classes):
        ax.bar(x + n * width - 0.4 + width / 2, hist.counts[c], width, label=class_names[c])
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_xlabel("object scale sqrt(w*h), px" + (f" (shorter side {hist.shorter_side})" if hist.shorter_side else ""))
    ax.set_ylabel("instances")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)

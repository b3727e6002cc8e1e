from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..datamodel.schemas import Annotation, Box, ImageRecord
from ..detector.schemas import CANVAS_MULTIPLE
from ..errors import ValidationError
from ..geometry import crop_window

PYRAMID_SIDES: tuple[int, ...] = (32, 64, 128, 256, 512, 800)


@dataclass(frozen=True)
class PyramidScaleSet:
    sides: tuple[int, ...] = PYRAMID_SIDES

    def __post_init__(self) -> None:
        if len(self.sides) != 6 or any(b <= a for a, b in zip(self.sides, self.sides[1:])):
            raise ValidationError(f"pyramid needs 6 strictly increasing sides, got {self.sides}")

    def __len__(self) -> int:
        return len(self.sides)

    def __getitem__(self, i: int) -> int:
        return self.sides[i]


def canvas_side(side: int, multiple: int = CANVAS_MULTIPLE) -> int:
    return int(math.ceil(side / multiple) * multiple)


@dataclass(frozen=True)
class ObjectPyramid:
    """
    One object cropped by a square window and resized to every pyramid side.
    Crop i is (S_i, S_i, 3) and sits at the top-left of a zero canvas of side
    canvas_sides[i]; `object_boxes[i]` is the object in that crop's pixels.
    """
    annotation: Annotation
    window: Box
    crops: tuple[np.ndarray, ...]
    object_boxes: tuple[Box, ...]
    scales: PyramidScaleSet = PyramidScaleSet()

    @property
    def class_id(self) -> int:
        return self.annotation.class_id

    @property
    def canvas_sides(self) -> tuple[int, ...]:
        return tuple(canvas_side(s) for s in self.scales.sides)


def _sample_square(pixels: np.ndarray, window: Box, side: int) -> np.ndarray:
    """Bilinear crop-and-resize of `window` to side x side; outside the image reads as 0."""
    h, w = pixels.shape[:2]
    src = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float64)).permute(2, 0, 1)[None]
    step = window.width / side
    xs = window.x1 + (torch.arange(side, dtype=torch.float64) + 0.5) * step
    ys = window.y1 + (torch.arange(side, dtype=torch.float64) + 0.5) * step
    gx = 2.0 * xs / w - 1.0
    gy = 2.0 * ys / h - 1.0
    grid = torch.stack(torch.meshgrid(gx, gy, indexing="xy"), dim=-1)[None]
    out = F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[0].permute(1, 2, 0).numpy().astype(np.float32)


def build_object_pyramid(
    image: ImageRecord,
    ann: Annotation,
    rng: np.random.Generator,
    *,
    shift_frac: float = 0.1,
    scales: PyramidScaleSet = PyramidScaleSet(),
    pixels: Optional[np.ndarray] = None,
) -> ObjectPyramid:
    if ann.image_id != image.image_id or ann not in image.annotations:
        raise ValidationError(f"annotation does not belong to image {image.image_id}")
    if ann.box.width < 2 or ann.box.height < 2:
        raise ValidationError(
            f"image {image.image_id}: box {ann.box.as_array().tolist()} too small for an object pyramid"
        )
    window = crop_window(ann.box, image, rng, shift_frac)
    pix = image.load_pixels() if pixels is None else pixels

    crops, boxes = [], []
    b = ann.box
    for side in scales.sides:
        crops.append(_sample_square(pix, window, side))
        f = side / window.width
        boxes.append(Box(
            max(0.0, (b.x1 - window.x1) * f), max(0.0, (b.y1 - window.y1) * f),
            min(float(side), (b.x2 - window.x1) * f), min(float(side), (b.y2 - window.y1) * f),
        ))
    return ObjectPyramid(ann, window, tuple(crops), tuple(boxes), scales)

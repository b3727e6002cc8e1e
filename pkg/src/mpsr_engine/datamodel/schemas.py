from __future__ import annotations
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from ..errors import ValidationError


@dataclass(frozen=True)
class Box:
    """Continuous pixel box; (x1, y1) inclusive, (x2, y2) exclusive, width = x2 - x1."""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"box has non-finite coordinates: {vals}")
        if not self.x2 > self.x1:
            raise ValidationError(f"box needs x2 > x1, got x1={self.x1} x2={self.x2}")
        if not self.y2 > self.y1:
            raise ValidationError(f"box needs y2 > y1, got y1={self.y1} y2={self.y2}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def scaled(self, factor: float) -> "Box":
        return Box(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)

    @classmethod
    def from_array(cls, a) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in a)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class Annotation:
    box: Box
    class_id: int
    image_id: str


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    annotations: tuple[Annotation, ...] = ()
    # exactly one of these is set
    file: Optional[Path] = field(default=None, compare=False)
    pixels: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        # ids double as file names under images/
        if not self.image_id or self.image_id in (".", "..") or any(c in self.image_id for c in "/\\"):
            raise ValidationError(f"image id {self.image_id!r} is not usable as a file name")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image {self.image_id}: non-positive size {self.width}x{self.height}")
        for a in self.annotations:
            b = a.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise ValidationError(
                    f"image {self.image_id}: box {b.as_array().tolist()} outside [0,{self.width}]x[0,{self.height}]"
                )
            if a.image_id != self.image_id:
                raise ValidationError(f"image {self.image_id}: annotation carries image_id {a.image_id}")
        if self.pixels is not None and self.pixels.shape[:2] != (self.height, self.width):
            raise ValidationError(
                f"image {self.image_id}: pixel array {self.pixels.shape} does not match {self.height}x{self.width}"
            )

    def load_pixels(self) -> np.ndarray:
        """H x W x 3 float32 array in [0, 1]."""
        if self.pixels is not None:
            return self.pixels.astype(np.float32, copy=False)
        if self.file is None:
            raise ValidationError(f"image {self.image_id} has neither a file nor pixels")
        with Image.open(self.file) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return arr

    def with_annotations(self, annotations) -> "ImageRecord":
        return ImageRecord(self.image_id, self.width, self.height, tuple(annotations), self.file, self.pixels)


@dataclass(frozen=True)
class ClassSplit:
    base_classes: frozenset[int]
    novel_classes: frozenset[int]

    def __post_init__(self) -> None:
        overlap = self.base_classes & self.novel_classes
        if overlap:
            raise ValidationError(f"classes both base and novel: {sorted(overlap)}")

    @property
    def all_classes(self) -> frozenset[int]:
        return self.base_classes | self.novel_classes

    def validate_for(self, num_classes: int) -> None:
        if self.all_classes != frozenset(range(num_classes)):
            raise ValidationError(
                f"split covers {sorted(self.all_classes)}, dataset has classes 0..{num_classes - 1}"
            )

    @classmethod
    def from_novel(cls, num_classes: int, novel) -> "ClassSplit":
        novel_set = frozenset(int(c) for c in novel)
        split = cls(frozenset(range(num_classes)) - novel_set, novel_set)
        split.validate_for(num_classes)
        return split


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...]
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for im in self.images:
            if im.image_id in seen:
                raise ValidationError(f"duplicate image_id: {im.image_id}")
            seen.add(im.image_id)
            for a in im.annotations:
                if not 0 <= a.class_id < len(self.class_names):
                    raise ValidationError(
                        f"image {im.image_id}: class_id {a.class_id} not in [0, {len(self.class_names)})"
                    )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def annotations(self) -> Iterator[Annotation]:
        for im in self.images:
            yield from im.annotations

    def instance_count(self, class_id: int) -> int:
        return sum(1 for a in self.annotations() if a.class_id == class_id)

    def class_ids(self) -> list[int]:
        """Classes that actually have instances, sorted."""
        return sorted({a.class_id for a in self.annotations()})

    def restrict_to_classes(self, classes) -> "Dataset":
        """Drop annotations of other classes, then drop images left without annotations."""
        keep = set(classes)
        images = []
        for im in self.images:
            anns = [a for a in im.annotations if a.class_id in keep]
            if anns:
                images.append(im.with_annotations(anns))
        return Dataset(tuple(images), self.class_names)

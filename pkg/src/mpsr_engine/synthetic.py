"""
Synthetic shapes datasets with controllable object scale.

Every instance is a filled shape whose bounding square has side s drawn from
its class's scale distribution (optionally jittered); the stored box is the
exact extent of the rendered mask. Same spec and seed give byte-identical
output.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Optional

import numpy as np
from PIL import Image, ImageDraw

from .config import parse_value
from .datamodel.schemas import Annotation, Box, Dataset, ImageRecord
from .errors import ConfigError, ValidationError

logger = logging.getLogger("mpsr.synthetic")

SHAPES = ("disk", "square", "triangle", "ring", "cross")
_PLACEMENT_TRIES = 50


@dataclass(frozen=True)
class ShapeClass:
    name: str
    shape: str
    instances: int
    scales: tuple[tuple[float, float], ...]   # (s, weight)

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise ValidationError(f"class {self.name}: unknown shape {self.shape!r} (choose from {SHAPES})")
        if self.instances < 0:
            raise ValidationError(f"class {self.name}: instances must be >= 0")
        if not self.scales or any(s < 4 or w <= 0 for s, w in self.scales):
            raise ValidationError(f"class {self.name}: scales need s >= 4 and positive weights, got {self.scales}")


@dataclass(frozen=True)
class SyntheticSpec:
    classes: tuple[ShapeClass, ...]
    image_width: int = 192
    image_height: int = 192
    objects_per_image: int = 3
    scale_jitter: float = 0.0      # s is multiplied by U(1 - j, 1 + j)
    noise: float = 0.05
    seed: int = 0
    prefix: str = "img"

    def __post_init__(self) -> None:
        if not self.classes:
            raise ValidationError("spec needs at least one class")
        if self.image_width < 8 or self.image_height < 8 or self.objects_per_image < 1:
            raise ValidationError("image size must be >= 8 and objects_per_image >= 1")
        if not 0.0 <= self.scale_jitter < 1.0 or self.noise < 0:
            raise ValidationError("scale_jitter must be in [0, 1) and noise >= 0")
        biggest = max(s for c in self.classes for s, _ in c.scales) * (1 + self.scale_jitter)
        if biggest > min(self.image_width, self.image_height):
            raise ValidationError(f"scale {biggest:g} does not fit a {self.image_width}x{self.image_height} image")

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.classes)

    def with_seed(self, seed: int) -> "SyntheticSpec":
        return replace(self, seed=seed)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: Optional["SyntheticSpec"] = None) -> "SyntheticSpec":
        """
        Build from KEY=VALUE config (lower-cased keys):
        CLASSES=disk,square; SHAPES=disk,square (default: the class names);
        INSTANCES=200,200 (one value applies to all); SCALES=32:1,64:1;
        SCALES_<CLASS>=128:1 per class; plus the scalar fields of this spec.
        """
        v = dict(values)
        base = base or PRESETS["tiny"]
        try:
            if "classes" in v:
                names = parse_value(v.pop("classes"), tuple[str, ...])
                shapes = parse_value(v.pop("shapes"), tuple[str, ...]) if "shapes" in v else names
                counts = parse_value(v.pop("instances", "10"), tuple[int, ...])
                default_scales = parse_value(v.pop("scales", "32:1"), tuple[tuple[float, float], ...])
                if len(shapes) != len(names) or len(counts) not in (1, len(names)):
                    raise ConfigError("CLASSES, SHAPES and INSTANCES must have matching lengths")
                classes = []
                for i, (n, s) in enumerate(zip(names, shapes)):
                    raw = v.pop(f"scales_{n.lower()}", None)
                    scales = parse_value(raw, tuple[tuple[float, float], ...]) if raw else default_scales
                    classes.append(ShapeClass(n, s, counts[i if len(counts) > 1 else 0], scales))
                base = replace(base, classes=tuple(classes))
            scalars = {"image_width": int, "image_height": int, "objects_per_image": int,
                       "scale_jitter": float, "noise": float, "seed": int, "prefix": str}
            updates = {k: parse_value(v.pop(k), t) for k, t in scalars.items() if k in v}
        except ValueError as e:
            raise ConfigError(f"bad synthetic spec: {e}") from e
        if v:
            raise ConfigError(f"unknown config key: {sorted(v)[0].upper()}")
        return replace(base, **updates)


_SPREAD = ((24, 1.0), (32, 1.0), (48, 1.0), (64, 1.0), (96, 1.0), (128, 1.0), (160, 1.0))

PRESETS: dict[str, SyntheticSpec] = {
    # 3 base classes with 200 instances each, 2 novel classes with a pool to draw k-shot sets from
    "trend": SyntheticSpec(
        classes=(
            ShapeClass("disk", "disk", 200, _SPREAD),
            ShapeClass("square", "square", 200, _SPREAD),
            ShapeClass("triangle", "triangle", 200, _SPREAD),
            ShapeClass("ring", "ring", 60, _SPREAD),
            ShapeClass("cross", "cross", 60, _SPREAD),
        ),
        image_width=192, image_height=192, objects_per_image=3, scale_jitter=0.1, noise=0.05,
    ),
    "tiny": SyntheticSpec(
        classes=(
            ShapeClass("disk", "disk", 6, ((24, 1.0), (40, 1.0))),
            ShapeClass("square", "square", 6, ((24, 1.0), (40, 1.0))),
        ),
        image_width=96, image_height=96, objects_per_image=2, noise=0.02,
    ),
}


def _draw(draw: ImageDraw.ImageDraw, shape: str, x: int, y: int, s: int) -> None:
    x2, y2 = x + s - 1, y + s - 1
    if shape == "disk":
        draw.ellipse([x, y, x2, y2], fill=255)
    elif shape == "square":
        draw.rectangle([x, y, x2, y2], fill=255)
    elif shape == "triangle":
        draw.polygon([(x, y2), (x2, y2), (x + (s - 1) / 2, y)], fill=255)
    elif shape == "ring":
        t = max(2, s // 5)
        draw.ellipse([x, y, x2, y2], fill=255)
        draw.ellipse([x + t, y + t, x2 - t, y2 - t], fill=0)
    elif shape == "cross":
        t = max(2, s // 4)
        c0 = x + (s - t) // 2
        r0 = y + (s - t) // 2
        draw.rectangle([c0, y, c0 + t - 1, y2], fill=255)
        draw.rectangle([x, r0, x2, r0 + t - 1], fill=255)


def _instances(spec: SyntheticSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    """(class index, side) for every instance, shuffled."""
    out = []
    for ci, c in enumerate(spec.classes):
        sides = np.array([s for s, _ in c.scales], dtype=np.float64)
        w = np.array([w for _, w in c.scales], dtype=np.float64)
        drawn = rng.choice(sides, size=c.instances, p=w / w.sum())
        if spec.scale_jitter:
            drawn = drawn * rng.uniform(1 - spec.scale_jitter, 1 + spec.scale_jitter, size=c.instances)
        out.extend((ci, max(4, int(round(s)))) for s in drawn)
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def generate_dataset(spec: SyntheticSpec) -> Dataset:
    """Render the spec into an in-memory dataset (pixels quantized to 8 bits)."""
    rng = np.random.default_rng(spec.seed)
    W, H = spec.image_width, spec.image_height
    pending = _instances(spec, rng)
    images: list[ImageRecord] = []

    while pending:
        image_id = f"{spec.prefix}{len(images):05d}"
        bg = rng.uniform(0.05, 0.35)
        canvas = np.full((H, W, 3), bg, dtype=np.float64)
        placed: list[np.ndarray] = []
        anns: list[Annotation] = []
        while pending and len(anns) < spec.objects_per_image:
            ci, s = pending[0]
            spot = None
            for _ in range(_PLACEMENT_TRIES):
                x = int(rng.integers(0, W - s + 1))
                y = int(rng.integers(0, H - s + 1))
                cand = np.array([x, y, x + s, y + s], dtype=np.float64)
                if all(cand[0] >= p[2] or cand[2] <= p[0] or cand[1] >= p[3] or cand[3] <= p[1] for p in placed):
                    spot = (x, y)
                    break
            if spot is None:
                if not anns:
                    raise ValidationError(f"cannot place a {s}px object in a {W}x{H} image")
                break
            pending.pop(0)
            mask_img = Image.new("L", (W, H), 0)
            _draw(ImageDraw.Draw(mask_img), spec.classes[ci].shape, spot[0], spot[1], s)
            bbox = mask_img.getbbox()
            if bbox is None:
                continue
            mask = np.asarray(mask_img) > 0
            canvas[mask] = rng.uniform(0.55, 1.0, size=3)
            placed.append(np.array([spot[0], spot[1], spot[0] + s, spot[1] + s], dtype=np.float64))
            anns.append(Annotation(Box(*map(float, bbox)), ci, image_id))

        if spec.noise:
            canvas = canvas + rng.normal(0.0, spec.noise, size=canvas.shape)
        pixels = (np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8).astype(np.float32)) / 255.0
        images.append(ImageRecord(image_id, W, H, tuple(anns), pixels=pixels))

    logger.info("synthetic.generated", extra={
        "images": len(images), "instances": sum(len(im.annotations) for im in images), "seed": spec.seed,
    })
    return Dataset(tuple(images), spec.class_names)

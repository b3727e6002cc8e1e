from __future__ import annotations

import json
import logging
import shutil
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
from PIL import Image

from ..errors import DatasetFormatError, ValidationError
from .schemas import Annotation, Box, Dataset, ImageRecord

logger = logging.getLogger("mpsr.datamodel.store")

ANNOTATIONS_FILE = "annotations.json"
IMAGE_DIR = "images"


def _parse_image(rec: Dict[str, Any], root: Path, num_classes: int) -> ImageRecord:
    image_id = str(rec["id"])
    width, height = int(rec["width"]), int(rec["height"])
    anns: List[Annotation] = []
    for j, b in enumerate(rec.get("boxes", [])):
        xyxy = b["xyxy"]
        if len(xyxy) != 4:
            raise DatasetFormatError(f"image {image_id}: boxes[{j}].xyxy needs 4 numbers, got {xyxy!r}")
        try:
            box = Box.from_array(xyxy)
        except ValidationError as e:
            raise ValidationError(f"image {image_id}: boxes[{j}]: {e}") from e
        class_id = int(b["class"])
        if not 0 <= class_id < num_classes:
            raise ValidationError(f"image {image_id}: boxes[{j}] class {class_id} not in [0, {num_classes})")
        anns.append(Annotation(box=box, class_id=class_id, image_id=image_id))
    return ImageRecord(
        image_id=image_id, width=width, height=height,
        annotations=tuple(anns), file=root / str(rec["file"]),
    )


def load_dataset(path: str | Path) -> Dataset:
    """
    Load a dataset directory holding annotations.json and its images:
      {"classes": [...], "images": [{"id", "file", "width", "height", "boxes": [{"class", "xyxy"}]}]}
    Every type invariant is validated; errors name the offending image.
    """
    root = Path(path)
    ann_path = root / ANNOTATIONS_FILE
    if not ann_path.exists():
        raise FileNotFoundError(f"No such file: {ann_path}")
    try:
        doc = json.loads(ann_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{ann_path}: invalid JSON at line {e.lineno}: {e.msg}") from e

    if not isinstance(doc, dict) or "classes" not in doc or "images" not in doc:
        raise DatasetFormatError(f"{ann_path}: expected an object with 'classes' and 'images'")
    class_names = tuple(str(c) for c in doc["classes"])

    images: List[ImageRecord] = []
    for i, rec in enumerate(doc["images"]):
        try:
            images.append(_parse_image(rec, root, len(class_names)))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ValidationError | DatasetFormatError):
                raise
            rid = rec.get("id", "?") if isinstance(rec, dict) else "?"
            raise DatasetFormatError(f"{ann_path}: images[{i}] (id={rid}) malformed: {e!r}") from e

    ds = Dataset(images=tuple(images), class_names=class_names)
    logger.debug("dataset.loaded", extra={"path": str(root), "images": len(images)})
    return ds


def _image_entry(im: ImageRecord, rel: str) -> Dict[str, Any]:
    return {
        "id": im.image_id,
        "file": rel,
        "width": im.width,
        "height": im.height,
        "boxes": [
            {"class": a.class_id, "xyxy": [a.box.x1, a.box.y1, a.box.x2, a.box.y2]}
            for a in im.annotations
        ],
    }


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """
    Write `dataset` to directory `path` in the annotations.json format.
    In-memory pixels are encoded as 8-bit PNG (values quantized to 1/255 and
    clipped to [0, 1]); file-backed images are copied.
    """
    root = Path(path)
    try:
        (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
        entries = []
        for im in dataset.images:
            rel = f"{IMAGE_DIR}/{im.image_id}.png"
            dest = root / rel
            if im.pixels is not None:
                arr = np.clip(np.rint(im.pixels * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(arr).save(dest, format="PNG")
            elif im.file is not None and Path(im.file).resolve() != dest.resolve():
                shutil.copyfile(im.file, dest)
            entries.append(_image_entry(im, rel))
        doc = {"classes": list(dataset.class_names), "images": entries}
        (root / ANNOTATIONS_FILE).write_text(json.dumps(doc, indent=1), encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write dataset to {root}: {e}") from e
    logger.debug("dataset.saved", extra={"path": str(root), "images": len(dataset.images)})

import os

import numpy as np
import pytest

from mpsr_engine.datamodel.schemas import Annotation, Box, Dataset, ImageRecord


def pytest_collection_modifyitems(config, items):
    if os.getenv("MPSR_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow; set MPSR_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_image(image_id, boxes, width=100, height=100, fill=0.2):
    """boxes: [(class_id, (x1, y1, x2, y2)), ...]; objects are painted white on a flat background."""
    pixels = np.full((height, width, 3), fill, dtype=np.float32)
    anns = []
    for class_id, xyxy in boxes:
        b = Box(*map(float, xyxy))
        pixels[int(b.y1):int(b.y2), int(b.x1):int(b.x2)] = 1.0
        anns.append(Annotation(b, class_id, image_id))
    return ImageRecord(image_id, width, height, tuple(anns), pixels=pixels)


@pytest.fixture
def toy_dataset():
    """Two classes, five images, scales 10..60 raw pixels."""
    images = (
        make_image("a", [(0, (0, 0, 10, 10)), (1, (50, 50, 70, 70))]),
        make_image("b", [(0, (10, 10, 30, 30))]),
        make_image("c", [(1, (20, 20, 60, 60)), (0, (70, 70, 100, 100))]),
        make_image("d", [(0, (0, 0, 60, 60))]),
        make_image("e", [(1, (5, 5, 15, 15))]),
    )
    return Dataset(images, ("disk", "square"))


@pytest.fixture
def tiny_data():
    from mpsr_engine.synthetic import PRESETS, generate_dataset

    return generate_dataset(PRESETS["tiny"])


@pytest.fixture
def tiny_cfg():
    from mpsr_engine.trainer.schemas import PRESETS

    return PRESETS["tiny"]

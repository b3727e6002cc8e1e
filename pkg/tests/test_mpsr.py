import numpy as np
import pytest
import torch

from conftest import make_image
from mpsr_engine.detector.schemas import LEVEL_STRIDES, FPNFeatures
from mpsr_engine.errors import ValidationError
from mpsr_engine.geometry import FPN_LEVELS, generate_anchors
from mpsr_engine.mpsr import (
    PYRAMID_SIDES,
    PyramidScaleSet,
    anchor_match_on_pyramids,
    assign_levels,
    build_object_pyramid,
    refinement_targets,
    select_roi_refinement,
    select_rpn_positives,
)
from mpsr_engine.mpsr.selection import centric_indices


@pytest.fixture
def pyramid():
    image = make_image("a", [(0, (60, 80, 140, 120))], width=200, height=200)
    return build_object_pyramid(image, image.annotations[0], np.random.default_rng(0), shift_frac=0.1)


def test_level_table_is_exact():
    expected = [(2, 2), (3, 2), (4, 2), (5, 3), (6, 4), (6, 5)]
    assert [assign_levels(i) for i in range(6)] == expected
    assert PYRAMID_SIDES == (32, 64, 128, 256, 512, 800)
    with pytest.raises(IndexError):
        assign_levels(6)


def test_centric_indices():
    assert centric_indices(8) == (3, 4)
    assert centric_indices(13) == (5, 6)
    assert centric_indices(5) == (1, 2)
    assert centric_indices(2) == (0, 1)
    assert centric_indices(1) == (0,)


def test_rpn_positives_are_four_cells_times_three_ratios():
    pos = select_rpn_positives((8, 8))
    assert len(pos) == 12
    assert {(r, c) for r, c, _ in pos} == {(3, 3), (3, 4), (4, 3), (4, 4)}
    assert {k for _, _, k in pos} == {0, 1, 2}
    assert len(select_rpn_positives((1, 1))) == 3


def test_pyramid_crops_and_boxes(pyramid):
    assert [c.shape for c in pyramid.crops] == [(s, s, 3) for s in PYRAMID_SIDES]
    assert pyramid.canvas_sides == (64, 64, 128, 256, 512, 832)
    for side, box in zip(PYRAMID_SIDES, pyramid.object_boxes):
        assert box.width == pytest.approx(side)              # the long side fills the window
        assert box.width / box.height == pytest.approx(2.0)


def test_pyramid_samples_object_pixels():
    image = make_image("a", [(0, (60, 80, 140, 120))], width=200, height=200)
    p = build_object_pyramid(image, image.annotations[0], np.random.default_rng(0), shift_frac=0.0)
    crop = p.crops[0]
    np.testing.assert_allclose(crop[16, 16], 1.0, atol=1e-5)
    np.testing.assert_allclose(crop[2, 16], 0.2, atol=1e-5)


def test_pyramid_window_overhang_reads_zero():
    image = make_image("a", [(0, (0, 0, 20, 10))], width=50, height=50)
    p = build_object_pyramid(image, image.annotations[0], np.random.default_rng(0), shift_frac=0.0)
    assert p.window.y1 < 0
    assert p.crops[0][0].max() == 0.0


def test_pyramid_rejects_foreign_annotation():
    a = make_image("a", [(0, (0, 0, 20, 20))])
    b = make_image("b", [(0, (0, 0, 20, 20))])
    with pytest.raises(ValidationError):
        build_object_pyramid(a, b.annotations[0], np.random.default_rng(0))


def test_scale_set_needs_six_increasing_sides():
    with pytest.raises(ValidationError):
        PyramidScaleSet((32, 64))
    with pytest.raises(ValidationError):
        PyramidScaleSet((32, 64, 64, 128, 256, 512))


@pytest.mark.parametrize("scale_index", range(6))
def test_refinement_targets_pick_twelve_centric_anchors(pyramid, scale_index):
    tgt = refinement_targets(pyramid, scale_index)
    side = PYRAMID_SIDES[scale_index]
    canvas = pyramid.canvas_sides[scale_index]
    assert (tgt.rpn_level, tgt.roi_level) == assign_levels(scale_index)
    assert tgt.num_rpn_positives == 12
    assert len(set(tgt.anchor_indices)) == 12
    assert len(tgt.cells) == 4
    assert tgt.class_id == 0

    grid = generate_anchors((canvas, canvas), FPN_LEVELS)
    start = grid.level_slice(tgt.rpn_level).start
    stride = LEVEL_STRIDES[tgt.rpn_level]
    for i in tgt.anchor_indices:
        a = grid.anchors[start + i]
        cx, cy = (a[0] + a[2]) / 2, (a[1] + a[3]) / 2
        assert abs(cx - side / 2) <= stride and abs(cy - side / 2) <= stride


def test_roi_region_covers_crop_content(pyramid):
    regions = [refinement_targets(pyramid, i).roi_region for i in range(6)]
    assert regions == [(8, 8), (16, 16), (32, 32), (32, 32), (32, 32), (25, 25)]


def test_select_roi_refinement_pools_content_region():
    fmap = torch.zeros(1, 2, 16, 16)
    fmap[:, :, :8, :8] = 1.0
    feats = FPNFeatures({2: fmap})
    pooled = select_roi_refinement(feats, 2, output_size=7, content_shape=(8, 8))
    assert pooled.shape == (1, 2, 7, 7)
    assert torch.allclose(pooled, torch.ones_like(pooled))
    whole = select_roi_refinement(feats, 2, output_size=7)
    assert whole.mean().item() == pytest.approx(0.25, abs=0.05)


def test_anchor_matching_ablation_produces_negatives(pyramid):
    matches = anchor_match_on_pyramids(pyramid)
    assert len(matches) == 6
    assert all(len(m.positives) >= 1 for m in matches)
    assert sum(len(m.negatives) for m in matches) >= 1

import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import make_image
from mpsr_engine.detector import Checkpoint, FasterRCNN, load_checkpoint, load_model, roi_level_for_scale
from mpsr_engine.detector.checkpoint import MANIFEST_FILE, META_FILE, WEIGHTS_FILE, save_checkpoint
from mpsr_engine.errors import CheckpointError, ShapeError, ValidationError
from mpsr_engine.mpsr import build_object_pyramid


@pytest.fixture
def det_cfg(tiny_cfg):
    return replace(tiny_cfg.detector, class_ids=(0, 1))


@pytest.fixture
def model(det_cfg):
    torch.manual_seed(0)
    return FasterRCNN(det_cfg)


def test_feature_maps_follow_strides(model):
    feats = model.forward_backbone(torch.zeros(1, 3, 64, 128))
    assert feats.levels == [2, 3, 4, 5, 6]
    assert {l: feats.shape(l)[1:] for l in feats.levels} == {
        2: (16, 32), 3: (8, 16), 4: (4, 8), 5: (2, 4), 6: (1, 2),
    }


def test_unpadded_input_is_rejected(model):
    with pytest.raises(ShapeError):
        model.forward_backbone(torch.zeros(1, 3, 60, 64))


def test_prepare_canvas_pads_to_multiple_of_64(model):
    canvas = model.prepare_canvas(torch.zeros(3, 50, 70))
    assert canvas.shape == (1, 3, 64, 128)
    # padding stays zero after normalization
    assert canvas[0, :, 50:, :].abs().max() == 0


def test_pyramid_crop_sits_at_canvas_origin(model):
    image = make_image("a", [(0, (60, 80, 140, 120))], width=200, height=200)
    pyramid = build_object_pyramid(image, image.annotations[0], np.random.default_rng(0))
    for crop, side, canvas_side in zip(pyramid.crops[:3], pyramid.scales.sides, pyramid.canvas_sides):
        canvas = model.prepare_canvas(crop)
        assert canvas.shape == (1, 3, canvas_side, canvas_side)
        mean = torch.tensor(model.cfg.pixel_mean).view(3, 1, 1)
        std = torch.tensor(model.cfg.pixel_std).view(3, 1, 1)
        content = (torch.as_tensor(crop).permute(2, 0, 1) - mean) / std
        assert torch.allclose(canvas[0, :, :side, :side].float(), content.float(), atol=1e-5)
        assert canvas[0, :, side:, :].abs().sum() == 0 and canvas[0, :, :, side:].abs().sum() == 0


def test_rpn_outputs_match_anchor_grid(model):
    feats = model.forward_backbone(torch.zeros(1, 3, 64, 64))
    logits, deltas = model.rpn_forward(feats)
    assert logits.shape == (model.anchor_grid((64, 64)).num_anchors,)
    assert deltas.shape == (logits.shape[0], 4)


def test_single_level_baseline(det_cfg):
    m = FasterRCNN(replace(det_cfg, use_fpn=False))
    feats = m.forward_backbone(torch.zeros(1, 3, 64, 64))
    assert feats.levels == [4]
    logits, _ = m.rpn_forward(feats)
    assert logits.shape == (4 * 4 * 15,)


@pytest.mark.parametrize("s,level", [(10, 2), (111.9, 2), (112, 3), (223.9, 3), (224, 4), (448, 5), (5000, 5)])
def test_roi_level_brackets(s, level):
    assert roi_level_for_scale(s) == level


def test_roi_head_shapes(model):
    feats = model.forward_backbone(torch.zeros(1, 3, 64, 64))
    proposals = torch.tensor([[0, 0, 20, 20], [10, 10, 60, 50.0]])
    cls, deltas = model.roi_forward(feats, proposals)
    assert cls.shape == (2, 3) and deltas.shape == (2, 4)


def test_predict_returns_boxes_inside_image(model, tiny_data):
    image = tiny_data.images[0]
    dets = model.predict(image)
    assert dets, "an untrained 2-class head scores ~1/3 per class, above the threshold"
    for d in dets:
        assert 0 <= d.box.x1 < d.box.x2 <= image.width
        assert 0 <= d.box.y1 < d.box.y2 <= image.height
        assert d.class_id in (0, 1)
        assert 0 < d.score <= 1
    assert model.training  # mode is restored


def test_predict_is_repeatable(model, tiny_data):
    image = tiny_data.images[1]
    assert model.predict(image) == model.predict(image)


def test_bn_frozen_restores_modes(model):
    model.train()
    bns = [m for m in model.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    with model.bn_frozen():
        assert not any(m.training for m in bns)
        assert model.rpn_head.training
    assert all(m.training for m in bns)


def test_bn_frozen_keeps_running_stats(model):
    model.train()
    before = {k: v.clone() for k, v in model.state_dict().items() if "running" in k}
    with model.bn_frozen():
        model.forward_backbone(torch.randn(1, 3, 64, 64))
    after = model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_replace_classifier(model):
    gen = torch.Generator().manual_seed(3)
    model.roi_head.replace_classifier(4, generator=gen)
    layer = model.roi_head.cls_score
    assert layer.out_features == 5
    assert torch.count_nonzero(layer.bias) == 0
    assert layer.weight.std().item() == pytest.approx(0.01, rel=0.3)


def test_detector_config_validation(det_cfg):
    with pytest.raises(ValidationError):
        replace(det_cfg, class_ids=(0, 0))
    with pytest.raises(ValidationError):
        replace(det_cfg, class_ids=())
    with pytest.raises(ValidationError):
        replace(det_cfg, class_agnostic_regression=False)


def _ckpt(model):
    return Checkpoint(
        detector=model.cfg, weights={k: v.clone() for k, v in model.state_dict().items()},
        stage="base", iteration=3, train={"seed": 0}, rng={"cursor": 1},
        optimizer={"rpn_head.conv.weight": torch.ones(2, 2, dtype=torch.float64)},
        torch_rng=torch.get_rng_state(),
    )


def test_checkpoint_save_load(tmp_path, model):
    save_checkpoint(_ckpt(model), tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.detector == model.cfg
    assert back.iteration == 3 and back.stage == "base"
    assert back.rng == {"cursor": 1}
    assert set(back.weights) == set(model.state_dict())
    assert all(torch.equal(back.weights[k], v) for k, v in model.state_dict().items())
    assert back.optimizer["rpn_head.conv.weight"].dtype == torch.float64
    assert torch.equal(back.torch_rng, torch.get_rng_state())

    loaded = load_model(tmp_path / "ck")
    assert not loaded.training
    manifest = json.loads((tmp_path / "ck" / MANIFEST_FILE).read_text())
    assert manifest["version"] == 1
    assert manifest["total_bytes"] == (tmp_path / "ck" / WEIGHTS_FILE).stat().st_size


def test_checkpoint_rejects_truncated_blob(tmp_path, model):
    d = save_checkpoint(_ckpt(model), tmp_path / "ck")
    blob = (d / WEIGHTS_FILE).read_bytes()
    (d / WEIGHTS_FILE).write_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(d)


def test_checkpoint_rejects_other_version(tmp_path, model):
    d = save_checkpoint(_ckpt(model), tmp_path / "ck")
    meta = json.loads((d / META_FILE).read_text())
    meta["version"] = 99
    (d / META_FILE).write_text(json.dumps(meta))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(d)


def test_checkpoint_missing_directory(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


def test_load_model_rejects_mismatched_weights(tmp_path, model):
    ck = _ckpt(model)
    ck.detector = replace(model.cfg, class_ids=(0, 1, 2))
    save_checkpoint(ck, tmp_path / "ck")
    with pytest.raises(CheckpointError, match="do not fit"):
        load_model(tmp_path / "ck")

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from typing import Iterator, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, nms, roi_align

from ..datamodel.schemas import Box, ImageRecord
from ..errors import ShapeError
from ..geometry import FPN_LEVELS, SINGLE_LEVEL, AnchorGrid, BoxCoder, clip_boxes, generate_anchors, resize_factor
from .backbone import FPN, SingleLevelNeck, TinyBackbone
from .heads import RoIHead, RPNHead
from .schemas import CANVAS_MULTIPLE, LEVEL_STRIDES, Detection, DetectorConfig, FPNFeatures

logger = logging.getLogger("mpsr.detector")

# RoI scale partitions over P2..P5: (0,112), [112,224), [224,448), [448,inf)
ROI_SCALE_BOUNDS = (112.0, 224.0, 448.0)


def roi_level_for_scale(s: float) -> int:
    """FPN level a proposal of scale s = sqrt(area) is pooled from; brackets are lower-inclusive."""
    level = 2
    for bound in ROI_SCALE_BOUNDS:
        if s >= bound:
            level += 1
    return level


class FasterRCNN(nn.Module):
    """
    Two-stage detector: tiny backbone (+FPN), RPN, RoI-Align and a box head with
    class-agnostic regression. Holds no training-only state; the refinement
    branch lives in the trainer and only calls into the public pieces below.
    """

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = TinyBackbone(cfg.backbone_width, cfg.backbone_depth)
        if cfg.use_fpn:
            self.neck: nn.Module = FPN(self.backbone.out_channels, cfg.fpn_channels)
            self.anchor_levels = FPN_LEVELS
            self.roi_levels = (2, 3, 4, 5)
        else:
            self.neck = SingleLevelNeck(self.backbone.out_channels, cfg.fpn_channels)
            self.anchor_levels = SINGLE_LEVEL
            self.roi_levels = (4,)
        per_cell = len(self.anchor_levels[0].areas) * 3
        self.rpn_head = RPNHead(cfg.fpn_channels, per_cell)
        self.roi_head = RoIHead(cfg.fpn_channels, cfg.roi_output_size, cfg.head_hidden, cfg.num_classes)
        self.coder = BoxCoder(stds=tuple(cfg.box_stds))
        self._grids: dict[tuple[int, int], AnchorGrid] = {}

    # ---- input ---------------------------------------------------------------
    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def resize_image(
        self, pixels: np.ndarray, shorter_side: int | None = None, max_size: int | None = None
    ) -> tuple[torch.Tensor, float]:
        """H x W x 3 in [0,1] -> (3, h, w) tensor resized by the min/max size policy, and the factor."""
        h, w = pixels.shape[:2]
        f = resize_factor(w, h, shorter_side or self.cfg.min_size, max_size or self.cfg.max_size)
        x = torch.as_tensor(np.ascontiguousarray(pixels), dtype=self.dtype, device=self.device).permute(2, 0, 1)
        nh, nw = max(1, round(h * f)), max(1, round(w * f))
        if (nh, nw) != (h, w):
            x = F.interpolate(x[None], size=(nh, nw), mode="bilinear", align_corners=False)[0]
        return x, f

    def prepare_canvas(self, x: torch.Tensor | np.ndarray) -> torch.Tensor:
        """Normalize a (3,h,w) tensor or (h,w,3) array and zero-pad to a multiple of 64 -> (1,3,H,W)."""
        if isinstance(x, np.ndarray):
            x = torch.as_tensor(np.ascontiguousarray(x), dtype=self.dtype, device=self.device).permute(2, 0, 1)
        mean = x.new_tensor(self.cfg.pixel_mean).view(3, 1, 1)
        std = x.new_tensor(self.cfg.pixel_std).view(3, 1, 1)
        x = (x - mean) / std
        h, w = x.shape[-2:]
        ph = math.ceil(h / CANVAS_MULTIPLE) * CANVAS_MULTIPLE - h
        pw = math.ceil(w / CANVAS_MULTIPLE) * CANVAS_MULTIPLE - w
        return F.pad(x, (0, pw, 0, ph))[None]

    # ---- stages ----------------------------------------------------------------
    def forward_backbone(self, x: torch.Tensor) -> FPNFeatures:
        h, w = x.shape[-2:]
        if h % CANVAS_MULTIPLE or w % CANVAS_MULTIPLE:
            raise ShapeError(f"input {h}x{w} is not padded to a multiple of {CANVAS_MULTIPLE}")
        return FPNFeatures(self.neck(self.backbone(x)))

    def anchor_grid(self, canvas_hw: tuple[int, int]) -> AnchorGrid:
        key = (int(canvas_hw[0]), int(canvas_hw[1]))
        if key not in self._grids:
            self._grids[key] = generate_anchors(key, self.anchor_levels)
        return self._grids[key]

    def rpn_forward(self, features: FPNFeatures) -> tuple[torch.Tensor, torch.Tensor]:
        """Objectness logits (A,) and deltas (A, 4) for image 0, in anchor_grid order."""
        logits, deltas = [], []
        for spec in self.anchor_levels:
            lg, dl = self.rpn_head.forward_level(features[spec.level])
            logits.append(lg[0])
            deltas.append(dl[0])
        return torch.cat(logits), torch.cat(deltas)

    def roi_pool(self, features: FPNFeatures, proposals: torch.Tensor) -> torch.Tensor:
        """RoI-Align each proposal from its level -> (R, C, P, P)."""
        p = self.cfg.roi_output_size
        out = proposals.new_zeros((proposals.shape[0], features.channels, p, p))
        if proposals.shape[0] == 0:
            return out
        if len(self.roi_levels) == 1:
            levels = torch.full((proposals.shape[0],), self.roi_levels[0], dtype=torch.long)
        else:
            wh = (proposals[:, 2:] - proposals[:, :2]).clamp(min=0)
            scales = torch.sqrt(wh[:, 0] * wh[:, 1]).detach().cpu().tolist()
            levels = torch.tensor([roi_level_for_scale(s) for s in scales], dtype=torch.long)
        for level in self.roi_levels:
            idx = torch.nonzero(levels == level).flatten().to(proposals.device)
            if idx.numel() == 0:
                continue
            rois = torch.cat([proposals.new_zeros((idx.numel(), 1)), proposals[idx]], dim=1)
            out[idx] = roi_align(
                features[level], rois, output_size=p,
                spatial_scale=1.0 / LEVEL_STRIDES[level],
                sampling_ratio=self.cfg.roi_sampling_ratio, aligned=True,
            )
        return out

    def roi_forward(self, features: FPNFeatures, proposals: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Class logits (R, K+1) and class-agnostic deltas (R, 4)."""
        return self.roi_head(self.roi_pool(features, proposals))

    @torch.no_grad()
    def propose(
        self, logits: torch.Tensor, deltas: torch.Tensor, grid: AnchorGrid, image_hw: tuple[int, int]
    ) -> torch.Tensor:
        """Decode, clip, keep pre_nms_topk, NMS, keep post_nms_topk -> (P, 4)."""
        anchors = torch.as_tensor(grid.anchors, dtype=deltas.dtype, device=deltas.device)
        boxes = clip_boxes(self.coder.decode(anchors, deltas.detach()), *image_hw)
        scores = logits.detach()
        wh = boxes[:, 2:] - boxes[:, :2]
        keep = torch.nonzero((wh[:, 0] > 1e-3) & (wh[:, 1] > 1e-3)).flatten()
        boxes, scores = boxes[keep], scores[keep]
        k = min(self.cfg.pre_nms_topk, scores.numel())
        top = torch.topk(scores, k).indices
        boxes, scores = boxes[top], scores[top]
        keep = nms(boxes, scores, self.cfg.rpn_nms_iou)[: self.cfg.post_nms_topk]
        return boxes[keep]

    @torch.no_grad()
    def detect(
        self, features: FPNFeatures, proposals: torch.Tensor, image_hw: tuple[int, int]
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Boxes (D,4), scores (D,), label indices (D,) in 1..K after class-wise NMS."""
        cls_logits, deltas = self.roi_forward(features, proposals)
        probs = F.softmax(cls_logits, dim=1)
        boxes = clip_boxes(self.coder.decode(proposals, deltas), *image_hw)
        k = probs.shape[1] - 1
        all_boxes = boxes[:, None, :].expand(-1, k, 4).reshape(-1, 4)
        all_scores = probs[:, 1:].reshape(-1)
        all_labels = torch.arange(1, k + 1, device=probs.device).repeat(boxes.shape[0])
        wh = all_boxes[:, 2:] - all_boxes[:, :2]
        keep = (all_scores > self.cfg.score_threshold) & (wh[:, 0] > 0) & (wh[:, 1] > 0)
        all_boxes, all_scores, all_labels = all_boxes[keep], all_scores[keep], all_labels[keep]
        keep = batched_nms(all_boxes, all_scores, all_labels, self.cfg.nms_iou)[: self.cfg.max_detections]
        return all_boxes[keep], all_scores[keep], all_labels[keep]

    @contextmanager
    def bn_frozen(self) -> Iterator[None]:
        """Batch-norm layers use (and do not update) their running statistics inside the block."""
        bns = [m for m in self.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
        modes = [m.training for m in bns]
        for m in bns:
            m.eval()
        try:
            yield
        finally:
            for m, mode in zip(bns, modes):
                m.train(mode)

    def predict(self, image: Union[ImageRecord, np.ndarray]) -> list[Detection]:
        """Full two-stage inference on one image; boxes are in the image's own pixels."""
        pixels = image.load_pixels() if isinstance(image, ImageRecord) else image
        h0, w0 = pixels.shape[:2]
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                x, f = self.resize_image(pixels)
                canvas = self.prepare_canvas(x)
                feats = self.forward_backbone(canvas)
                grid = self.anchor_grid(tuple(canvas.shape[-2:]))
                logits, deltas = self.rpn_forward(feats)
                image_hw = (x.shape[-2], x.shape[-1])
                proposals = self.propose(logits, deltas, grid, image_hw)
                boxes, scores, labels = self.detect(feats, proposals, image_hw)
        finally:
            self.train(was_training)

        out: list[Detection] = []
        boxes = clip_boxes(boxes / f, h0, w0).cpu().double().numpy()
        for b, s, l in zip(boxes, scores.cpu().tolist(), labels.cpu().tolist()):
            if b[2] <= b[0] or b[3] <= b[1]:
                continue
            out.append(Detection(Box.from_array(b), self.cfg.class_ids[l - 1], float(s)))
        return out

from __future__ import annotations
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


def normal_init(m: nn.Module, std: float, generator: Optional[torch.Generator] = None) -> None:
    with torch.no_grad():
        m.weight.normal_(0.0, std, generator=generator)
        if m.bias is not None:
            m.bias.zero_()


class RPNHead(nn.Module):
    """Shared 3x3 conv, then per-anchor objectness and 4 box deltas, for every level."""

    def __init__(self, channels: int, anchors_per_cell: int):
        super().__init__()
        self.anchors_per_cell = anchors_per_cell
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, anchors_per_cell, 1)
        self.deltas = nn.Conv2d(channels, 4 * anchors_per_cell, 1)
        for m in (self.conv, self.objectness, self.deltas):
            normal_init(m, 0.01)

    def forward_level(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(N, C, H, W) -> logits (N, H*W*A), deltas (N, H*W*A, 4), ordered row, col, anchor."""
        n, _, h, w = x.shape
        a = self.anchors_per_cell
        t = F.relu(self.conv(x))
        logits = self.objectness(t).permute(0, 2, 3, 1).reshape(n, h * w * a)
        deltas = self.deltas(t).view(n, a, 4, h, w).permute(0, 3, 4, 1, 2).reshape(n, h * w * a, 4)
        return logits, deltas


class RoIHead(nn.Module):
    """Two FC layers, a (K+1)-way classifier and one class-agnostic box regressor."""

    def __init__(self, channels: int, pool: int, hidden: int, num_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(channels * pool * pool, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls_score = nn.Linear(hidden, num_classes + 1)
        self.bbox_pred = nn.Linear(hidden, 4)
        normal_init(self.cls_score, 0.01)
        normal_init(self.bbox_pred, 0.001)

    def features(self, pooled: torch.Tensor) -> torch.Tensor:
        x = pooled.flatten(1)
        return F.relu(self.fc2(F.relu(self.fc1(x))))

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.features(pooled)
        return self.cls_score(x), self.bbox_pred(x)

    def replace_classifier(self, num_classes: int, generator: Optional[torch.Generator] = None) -> None:
        """Fresh (K+1)-way classifier: N(0, 0.01) weights, zero bias."""
        ref = self.cls_score.weight
        layer = nn.Linear(self.cls_score.in_features, num_classes + 1).to(device=ref.device, dtype=ref.dtype)
        normal_init(layer, 0.01, generator)
        self.cls_score = layer

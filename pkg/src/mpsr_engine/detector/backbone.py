from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv_bn(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """Five stride-2 stages (C1..C5, strides 2..32); C2..C5 feed the neck."""

    def __init__(self, width: int = 16, depth: int = 1):
        super().__init__()
        chans = [width, 2 * width, 4 * width, 8 * width, 8 * width]
        stages = []
        cin = 3
        for cout in chans:
            layers = [conv_bn(cin, cout, stride=2)]
            layers += [conv_bn(cout, cout) for _ in range(depth)]
            stages.append(nn.Sequential(*layers))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.out_channels = {2: chans[1], 3: chans[2], 4: chans[3], 5: chans[4]}

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        out = {}
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i >= 2:
                out[i] = x
        return out


class FPN(nn.Module):
    """Lateral 1x1 + top-down nearest upsampling + 3x3 smoothing; P6 subsamples P5."""

    def __init__(self, in_channels: dict[int, int], channels: int = 64):
        super().__init__()
        self.in_levels = sorted(in_channels)
        self.lateral = nn.ModuleDict({str(l): nn.Conv2d(in_channels[l], channels, 1) for l in self.in_levels})
        self.output = nn.ModuleDict({str(l): nn.Conv2d(channels, channels, 3, padding=1) for l in self.in_levels})

    def forward(self, feats: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        out: dict[int, torch.Tensor] = {}
        top = None
        for l in reversed(self.in_levels):
            lat = self.lateral[str(l)](feats[l])
            if top is not None:
                lat = lat + F.interpolate(top, size=lat.shape[-2:], mode="nearest")
            top = lat
            out[l] = self.output[str(l)](lat)
        last = self.in_levels[-1]
        out[last + 1] = F.max_pool2d(out[last], kernel_size=1, stride=2)
        return out


class SingleLevelNeck(nn.Module):
    """Plain Faster R-CNN: one stride-16 map from C4."""

    def __init__(self, in_channels: dict[int, int], channels: int = 64, level: int = 4):
        super().__init__()
        self.level = level
        self.lateral = nn.Conv2d(in_channels[level], channels, 1)
        self.output = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, feats: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        return {self.level: self.output(self.lateral(feats[self.level]))}

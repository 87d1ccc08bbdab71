"""Pluggable five-level feature extractors with a fixed stride/channel contract.

Every backbone returns ``f1..f5`` at strides 2, 4, 8, 16 and 32. Weights can
be loaded from a ``.npz`` archive whose array names match
``Backbone.state_dict()`` keys; the archive is its own name->shape manifest.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import BBNetError, DimsError

STRIDES = (2, 4, 8, 16, 32)

CHANNELS = {
    "tiny_cnn": (16, 32, 64, 96, 128),
    "res2net50_like": (64, 256, 512, 1024, 2048),
    "resnet50_like": (64, 256, 512, 1024, 2048),
    "vgg16_like": (64, 128, 256, 512, 512),
}


class WeightLoadError(BBNetError):
    pass


@dataclass(frozen=True)
class BackboneDescriptor:
    id: str
    channels: tuple[int, ...]
    pretrained_path: str | None = None

    def __post_init__(self):
        if len(self.channels) != 5:
            raise ValueError("a backbone declares exactly five channel counts")
        if self.id != "vgg16_like" and any(a >= b for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"{self.id}: channel counts must be strictly increasing")

    @classmethod
    def named(cls, backbone_id: str, pretrained_path: str | None = None) -> "BackboneDescriptor":
        if backbone_id not in CHANNELS:
            raise ValueError(f"unknown backbone {backbone_id!r}")
        return cls(backbone_id, CHANNELS[backbone_id], pretrained_path)


@dataclass
class FeaturePyramid:
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor
    f5: torch.Tensor

    def levels(self) -> list[torch.Tensor]:
        return [self.f1, self.f2, self.f3, self.f4, self.f5]


def conv_relu(cin, cout, k=3, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride, k // 2), nn.ReLU(inplace=True))


def conv_gn_relu(cin, cout, stride=1, groups=8):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(groups, cout), nn.ReLU(inplace=True)
    )


class TinyCNN(nn.Module):
    """Five stride-2 stages of 3x3 conv + GroupNorm + ReLU, one extra such conv each.

    GroupNorm normalizes each image on its own, so images in a group never
    share statistics through the backbone.
    """

    def __init__(self, channels=CHANNELS["tiny_cnn"]):
        super().__init__()
        stages, cin = [], 3
        for cout in channels:
            stages.append(nn.Sequential(conv_gn_relu(cin, cout, stride=2), conv_gn_relu(cout, cout)))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride=1):
        super().__init__()
        cout = planes * self.expansion
        self.conv1 = nn.Conv2d(cin, planes, 1, bias=False)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride, 1, bias=False)
        self.conv3 = nn.Conv2d(planes, cout, 1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        out = F.relu(self.conv1(x))
        out = F.relu(self.conv2(out))
        out = self.conv3(out)
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Res2NetBottleneck(nn.Module):
    """Bottleneck whose 3x3 stage runs hierarchically over ``scale`` channel splits."""

    expansion = 4

    def __init__(self, cin, planes, stride=1, base_width=26, scale=4):
        super().__init__()
        width = planes * base_width // 64
        cout = planes * self.expansion
        self.scale, self.width, self.stride = scale, width, stride
        self.conv1 = nn.Conv2d(cin, width * scale, 1, bias=False)
        self.convs = nn.ModuleList(
            nn.Conv2d(width, width, 3, stride, 1, bias=False) for _ in range(scale - 1)
        )
        self.pool = nn.AvgPool2d(3, stride, 1) if stride != 1 else None
        self.conv3 = nn.Conv2d(width * scale, cout, 1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        out = F.relu(self.conv1(x))
        splits = torch.split(out, self.width, 1)
        parts, prev = [], None
        for i, conv in enumerate(self.convs):
            # the first block of a stage strides every split and drops the cascade
            sp = splits[i] if (prev is None or self.stride != 1) else prev + splits[i]
            prev = F.relu(conv(sp))
            parts.append(prev)
        last = splits[-1] if self.pool is None else self.pool(splits[-1])
        out = self.conv3(torch.cat(parts + [last], 1))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class ResidualFamily(nn.Module):
    def __init__(self, block, layers=(3, 4, 6, 3)):
        super().__init__()
        self.stem = conv_relu(3, 64, k=7, stride=2)
        self.pool = nn.MaxPool2d(3, 2, 1)
        cin, stages = 64, []
        for i, (planes, n) in enumerate(zip((64, 128, 256, 512), layers)):
            blocks = []
            for j in range(n):
                stride = 2 if (j == 0 and i > 0) else 1
                blocks.append(block(cin, planes, stride))
                cin = planes * block.expansion
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        feats = [x]
        x = self.pool(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class VGG16(nn.Module):
    cfg = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))

    def __init__(self):
        super().__init__()
        blocks, cin = [], 3
        for cout, n in self.cfg:
            layers = []
            for _ in range(n):
                layers.append(conv_relu(cin, cout))
                cin = cout
            layers.append(nn.MaxPool2d(2, 2))
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


def _build_body(backbone_id):
    if backbone_id == "tiny_cnn":
        return TinyCNN()
    if backbone_id == "res2net50_like":
        return ResidualFamily(Res2NetBottleneck)
    if backbone_id == "resnet50_like":
        return ResidualFamily(Bottleneck)
    if backbone_id == "vgg16_like":
        return VGG16()
    raise ValueError(f"unknown backbone {backbone_id!r}")


def init_relu_convs(module: nn.Module) -> None:
    """He-normal (fan_in) weights and zero biases; no normalization layers follow these convs."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Backbone(nn.Module):
    """Backbone body behind per-channel input standardization."""

    mean = (0.485, 0.456, 0.406)
    std = (0.229, 0.224, 0.225)

    def __init__(self, desc: BackboneDescriptor):
        super().__init__()
        self.desc = desc
        self.body = _build_body(desc.id)
        init_relu_convs(self.body)
        self.register_buffer("input_mean", torch.tensor(self.mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("input_std", torch.tensor(self.std).view(1, 3, 1, 1), persistent=False)
        if desc.pretrained_path:
            load_weights(self, desc.pretrained_path)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        s = images.shape[-1]
        if images.shape[-2] != s or s % 32:
            raise DimsError(f"backbone input must be square with side divisible by 32, got {tuple(images.shape)}", divisor=32)
        x = (images - self.input_mean.to(images.dtype)) / self.input_std.to(images.dtype)
        return FeaturePyramid(*self.body(x))


def extract(images: torch.Tensor, backbone: Backbone) -> FeaturePyramid:
    return backbone(images)


def load_weights(module: nn.Module, path: str | Path) -> None:
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise WeightLoadError(f"cannot read weights {path}: {exc}") from exc
    state = module.state_dict()
    missing = sorted(set(state) - set(archive.files))
    unexpected = sorted(set(archive.files) - set(state))
    if missing or unexpected:
        raise WeightLoadError(f"{path}: missing={missing[:5]} unexpected={unexpected[:5]}")
    loaded = {}
    for name, ref in state.items():
        arr = archive[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise WeightLoadError(f"{path}: {name} has shape {arr.shape}, expected {tuple(ref.shape)}")
        loaded[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(ref.dtype)
    module.load_state_dict(loaded)


def save_weights(module: nn.Module, path: str | Path) -> None:
    np.savez(path, **{k: v.detach().cpu().numpy() for k, v in module.state_dict().items()})


class Projection(nn.Module):
    """1x1 convolutions aligning f3, f4, f5 to ``channels`` wide maps."""

    def __init__(self, in_channels, channels):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        for conv in self.convs:
            nn.init.zeros_(conv.bias)

    def forward(self, pyr: FeaturePyramid):
        return tuple(conv(f) for conv, f in zip(self.convs, (pyr.f3, pyr.f4, pyr.f5)))


def project(pyr: FeaturePyramid, projection: Projection):
    return projection(pyr)

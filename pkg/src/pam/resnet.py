"""ResNet family used as the PAM backbone.

Parameter names follow the torchvision layout (``conv1``, ``bn1``, ``layer1`` ...
``layer4``, ``fc``) so standard ImageNet checkpoints load without renaming.
Blocks take explicit inner widths so that a structurally pruned stage can be
rebuilt physically smaller.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn


def conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, bias=False)


def conv1x1(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=1, stride=stride, bias=False)


def _apply_mask(x: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is None:
        return x
    return x * mask.view(1, -1, 1, 1)


class BasicBlock(nn.Module):
    expansion = 1
    # (conv, bn, mask buffer) triples whose output channels may be removed
    prunable = (("conv1", "bn1", "mask1"),)

    def __init__(self, inplanes: int, planes: int, stride: int = 1,
                 downsample: Optional[nn.Module] = None, mid: Optional[int] = None):
        super().__init__()
        mid = planes if mid is None else mid
        self.conv1 = conv3x3(inplanes, mid, stride)
        self.bn1 = nn.BatchNorm2d(mid)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = conv3x3(mid, planes)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = downsample
        self.stride = stride
        self.register_buffer("mask1", None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x
        out = _apply_mask(self.relu(self.bn1(self.conv1(x))), self.mask1)
        out = self.bn2(self.conv2(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu(out + identity)

    def widths(self) -> list[int]:
        return [self.conv1.out_channels]


class Bottleneck(nn.Module):
    expansion = 4
    prunable = (("conv1", "bn1", "mask1"), ("conv2", "bn2", "mask2"))

    def __init__(self, inplanes: int, planes: int, stride: int = 1,
                 downsample: Optional[nn.Module] = None,
                 mid: Optional[Sequence[int]] = None):
        super().__init__()
        w1, w2 = (planes, planes) if mid is None else mid
        self.conv1 = conv1x1(inplanes, w1)
        self.bn1 = nn.BatchNorm2d(w1)
        self.conv2 = conv3x3(w1, w2, stride)
        self.bn2 = nn.BatchNorm2d(w2)
        self.conv3 = conv1x1(w2, planes * self.expansion)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample
        self.stride = stride
        self.register_buffer("mask1", None)
        self.register_buffer("mask2", None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x
        out = _apply_mask(self.relu(self.bn1(self.conv1(x))), self.mask1)
        out = _apply_mask(self.relu(self.bn2(self.conv2(out))), self.mask2)
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu(out + identity)

    def widths(self) -> list[int]:
        return [self.conv1.out_channels, self.conv2.out_channels]


# conv feeding a prunable conv's input, keyed by the prunable conv
DOWNSTREAM = {
    BasicBlock: {"conv1": "conv2"},
    Bottleneck: {"conv1": "conv2", "conv2": "conv3"},
}


@dataclass(frozen=True)
class Variant:
    name: str
    block: type
    layers: tuple[int, int, int, int]
    width: int = 64
    stem: str = "imagenet"  # "imagenet": 7x7/2 conv + maxpool; "cifar": 3x3/1 conv

    @property
    def stage_planes(self) -> tuple[int, int, int, int]:
        w = self.width
        return (w, 2 * w, 4 * w, 8 * w)

    @property
    def feature_dim(self) -> int:
        return self.stage_planes[3] * self.block.expansion

    @property
    def extractor_channels(self) -> int:
        return self.stage_planes[2] * self.block.expansion


VARIANTS: dict[str, Variant] = {
    "rn18": Variant("rn18", BasicBlock, (2, 2, 2, 2)),
    "rn34": Variant("rn34", BasicBlock, (3, 4, 6, 3)),
    "rn50": Variant("rn50", Bottleneck, (3, 4, 6, 3)),
    "rn101": Variant("rn101", Bottleneck, (3, 4, 23, 3)),
    "rn152": Variant("rn152", Bottleneck, (3, 8, 36, 3)),
    # desk-scale variants for low-resolution inputs and fast tests
    "rn18-c16": Variant("rn18-c16", BasicBlock, (2, 2, 2, 2), width=16, stem="cifar"),
    "rn10-c8": Variant("rn10-c8", BasicBlock, (1, 1, 1, 1), width=8, stem="cifar"),
}


def get_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown backbone variant {name!r}; known: {sorted(VARIANTS)}") from None


def make_stage(block: type, inplanes: int, planes: int, blocks: int, stride: int,
               mids: Optional[Sequence] = None) -> nn.Sequential:
    downsample = None
    if stride != 1 or inplanes != planes * block.expansion:
        downsample = nn.Sequential(
            conv1x1(inplanes, planes * block.expansion, stride),
            nn.BatchNorm2d(planes * block.expansion),
        )
    mids = list(mids) if mids is not None else [None] * blocks
    layers = [block(inplanes, planes, stride, downsample, mid=mids[0])]
    inplanes = planes * block.expansion
    for i in range(1, blocks):
        layers.append(block(inplanes, planes, mid=mids[i]))
    return nn.Sequential(*layers)


class ResNet(nn.Module):
    def __init__(self, variant: Variant, num_classes: int = 1000):
        super().__init__()
        self.variant = variant
        w = variant.width
        if variant.stem == "imagenet":
            self.conv1 = nn.Conv2d(3, w, kernel_size=7, stride=2, padding=3, bias=False)
            self.maxpool: nn.Module = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        else:
            self.conv1 = nn.Conv2d(3, w, kernel_size=3, stride=1, padding=1, bias=False)
            self.maxpool = nn.Identity()
        self.bn1 = nn.BatchNorm2d(w)
        self.relu = nn.ReLU(inplace=True)
        inplanes = w
        for i, (planes, blocks) in enumerate(zip(variant.stage_planes, variant.layers)):
            stride = 1 if i == 0 else 2
            setattr(self, f"layer{i + 1}", make_stage(variant.block, inplanes, planes, blocks, stride))
            inplanes = planes * variant.block.expansion
        self.avgpool = nn.AdaptiveAvgPool2d((1, 1))
        self.fc = nn.Linear(inplanes, num_classes)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def stem(self, x: torch.Tensor) -> torch.Tensor:
        return self.maxpool(self.relu(self.bn1(self.conv1(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return self.fc(torch.flatten(self.avgpool(x), 1))


def expected_shapes(variant: Variant, num_classes: int = 1000) -> dict[str, tuple[int, ...]]:
    """Parameter/buffer shapes of a freshly built variant, in state_dict order."""
    model = ResNet(variant, num_classes)
    return {k: tuple(v.shape) for k, v in model.state_dict().items()}

"""Backbone construction and intermediate-feature extraction.

ResNets: features at the end of each bottleneck before the final ReLU,
conv3_x through conv5_x (torchvision layer2..layer4), giving 3 pyramid
groups by spatial size; the semantic layer is the last conv2_x bottleneck
(64x64 for 256x256 inputs, pre-ReLU).

VGG16: pre-ReLU outputs of every conv in conv4_x and conv5_x plus the
output of the final maxpool; the semantic layer is conv3_3 (pre-ReLU,
stride 4). The maxpool between conv blocks belongs to the following
group's stride, which the manifest makes explicit.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torchvision.models as tv_models

BACKBONES = ("vgg16", "resnet50", "resnet101")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_VGG16_PYRAMID_CONVS = ((17, 19, 21), (24, 26, 28))  # conv4_x, conv5_x
_VGG16_LAST_POOL = 30
_VGG16_SEMANTIC_CONV = 14  # conv3_3


@dataclass
class ExtractedStack:
    levels: list[torch.Tensor]        # CxHxW, pyramid levels ascending depth
    level_names: list[str]
    groups: list[list[int]]
    semantic_level: int               # index into levels


class UnknownBackboneError(ValueError):
    pass


def build_backbone(name: str, weights: str = "auto", seed: int = 0):
    """Returns (model.eval(), weights_tag). `auto` tries the torchvision
    pretrained weights and falls back to seeded random initialization when
    they are unavailable (e.g. no network and no local cache)."""
    if name not in BACKBONES:
        raise UnknownBackboneError(f"unknown backbone {name!r}; choose from {BACKBONES}")
    ctor = {"vgg16": tv_models.vgg16, "resnet50": tv_models.resnet50,
            "resnet101": tv_models.resnet101}[name]
    torch.manual_seed(seed)
    if weights == "none":
        model, tag = ctor(weights=None), f"random:seed={seed}"
    elif weights == "auto":
        try:
            model, tag = ctor(weights="IMAGENET1K_V1"), "imagenet1k_v1"
        except Exception:
            torch.manual_seed(seed)
            model, tag = ctor(weights=None), f"random:seed={seed}"
    else:
        model = ctor(weights=None)
        state = torch.load(weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        tag = f"file:{weights}"
    model.eval()
    return model, tag


@torch.no_grad()
def extract_resnet(model, x: torch.Tensor) -> ExtractedStack:
    x = model.maxpool(model.relu(model.bn1(model.conv1(x))))
    levels, names = [], []
    semantic = None
    semantic_name = None
    for lid in (1, 2, 3, 4):
        layer = getattr(model, f"layer{lid}")
        for bid, block in enumerate(layer):
            identity = x
            out = block.relu(block.bn1(block.conv1(x)))
            out = block.relu(block.bn2(block.conv2(out)))
            out = block.bn3(block.conv3(out))
            if block.downsample is not None:
                identity = block.downsample(x)
            out = out + identity  # end of bottleneck, before the ReLU
            if lid >= 2:
                levels.append(out[0])
                names.append(f"layer{lid}.{bid}")
            elif bid == len(layer) - 1:
                semantic, semantic_name = out[0], f"layer{lid}.{bid}"
            x = torch.relu(out)
    counts = [len(getattr(model, f"layer{lid}")) for lid in (2, 3, 4)]
    groups, start = [], 0
    for c in counts:
        groups.append(list(range(start, start + c)))
        start += c
    levels.append(semantic)
    names.append(semantic_name)
    return ExtractedStack(levels=levels, level_names=names, groups=groups,
                          semantic_level=len(levels) - 1)


@torch.no_grad()
def extract_vgg16(model, x: torch.Tensor) -> ExtractedStack:
    levels, names, groups = [], [], []
    semantic = None
    capture = {idx for grp in _VGG16_PYRAMID_CONVS for idx in grp}
    for idx, module in enumerate(model.features):
        x = module(x)
        if idx == _VGG16_SEMANTIC_CONV:
            semantic = x[0]
        if idx in capture:
            names.append(f"features.{idx}")
            levels.append(x[0])
        if idx == _VGG16_LAST_POOL:
            names.append(f"features.{idx}")
            levels.append(x[0])
    groups = [[0, 1, 2], [3, 4, 5], [6]]
    levels.append(semantic)
    names.append(f"features.{_VGG16_SEMANTIC_CONV}")
    return ExtractedStack(levels=levels, level_names=names, groups=groups,
                          semantic_level=len(levels) - 1)


@torch.no_grad()
def extract_stack(name: str, model, image: torch.Tensor) -> ExtractedStack:
    """`image` is a (3,H,W) float tensor in [0,1]; ImageNet-normalized here."""
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    x = ((image - mean) / std).unsqueeze(0)
    if name == "vgg16":
        return extract_vgg16(model, x)
    return extract_resnet(model, x)

"""Registry of convolutional backbones shared by the classifier and segmenter.

A backbone maps an ``(N, 3, H, W)`` batch to an ``(N, C, H/s, W/s)`` feature
map and exposes ``out_channels`` (C) and ``stride`` (s). Both engines keep
their backbone under the ``backbone.`` prefix of their state dict, which is
what makes classifier-to-segmenter weight transfer a name/shape match.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

from torch import nn

from .errors import UnknownBackbone


@dataclass(frozen=True)
class BackboneEntry:
    constructor: Callable[[bool], nn.Module]
    out_channels: int
    stride: int
    description: str = ""


BACKBONES: dict[str, BackboneEntry] = {}


def register_backbone(backbone_id: str, constructor, out_channels: int, stride: int, description: str = "") -> None:
    """Register ``constructor(pretrained: bool) -> nn.Module`` under ``backbone_id``."""
    BACKBONES[backbone_id] = BackboneEntry(constructor, out_channels, stride, description)


def get_backbone_entry(backbone_id: str) -> BackboneEntry:
    try:
        return BACKBONES[backbone_id]
    except KeyError:
        raise UnknownBackbone(f"unknown backbone {backbone_id!r}; registered: {sorted(BACKBONES)}") from None


def build_backbone(backbone_id: str, pretrained: bool = False) -> nn.Module:
    entry = get_backbone_entry(backbone_id)
    module = entry.constructor(pretrained)
    module.out_channels = entry.out_channels
    module.stride = entry.stride
    module.backbone_id = backbone_id
    return module


def backbone_layer_names(backbone_id: str) -> list[str]:
    """State-dict keys of a freshly built backbone (its layer-name manifest)."""
    return list(build_backbone(backbone_id).state_dict())


def _conv_block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        OrderedDict(
            conv=nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
            bn=nn.BatchNorm2d(c_out),
            relu=nn.ReLU(inplace=True),
        )
    )


def _plain_cnn(plan: list[tuple[int, int]]) -> nn.Sequential:
    layers = OrderedDict()
    c_in = 3
    for i, (c_out, stride) in enumerate(plan, start=1):
        layers[f"layer{i}"] = _conv_block(c_in, c_out, stride)
        c_in = c_out
    return nn.Sequential(layers)


def _no_pretrained(name: str):
    def build(pretrained: bool):
        if pretrained:
            raise ValueError(f"backbone {name!r} has no built-in pretrained weights; pass a checkpoint")
        return BUILDERS[name]()

    return build


BUILDERS = {
    # 8 conv layers, output stride 4; the desk-scale default
    "tiny8": lambda: _plain_cnn([(16, 1), (16, 2), (32, 1), (32, 2), (64, 1), (64, 1), (64, 1), (64, 1)]),
    "tiny4": lambda: _plain_cnn([(16, 2), (32, 2), (48, 1), (48, 1)]),
}

register_backbone("tiny8", _no_pretrained("tiny8"), 64, 4, "8-layer plain CNN")
register_backbone("tiny4", _no_pretrained("tiny4"), 48, 4, "4-layer plain CNN")


def _torchvision_resnet(name: str):
    def build(pretrained: bool) -> nn.Module:
        import torchvision

        net = getattr(torchvision.models, name)(weights="DEFAULT" if pretrained else None)
        return nn.Sequential(
            OrderedDict(
                conv1=net.conv1, bn1=net.bn1, relu=net.relu, maxpool=net.maxpool,
                layer1=net.layer1, layer2=net.layer2, layer3=net.layer3, layer4=net.layer4,
            )
        )

    return build


# full-scale options; pretrained weights are fetched by torchvision on demand
register_backbone("resnet18", _torchvision_resnet("resnet18"), 512, 32, "torchvision ResNet-18 trunk")
register_backbone("resnet50", _torchvision_resnet("resnet50"), 2048, 32, "torchvision ResNet-50 trunk")

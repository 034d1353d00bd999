"""Reduced-width analogues of the three backbone families.

Each preset keeps the family's signature operations: residual additions
(ResNet), depthwise convolutions with hard-swish (MobileNetV3) and grouped
pointwise convolutions with channel shuffle (ShuffleNet). All of them open
with a 4x4/stride-4 patch stem so a 256x256 input costs a few tens of MMACs.
"""
from __future__ import annotations

from ..errors import InvalidConfig, UnknownPreset
from .graph import GRAPH_INPUT, GraphBuilder, ModelGraph

PRESETS = ("tiny_resnet", "tiny_mobilenet", "tiny_shufflenet")


def _stem(b, out_ch, fn):
    x = b.conv(GRAPH_INPUT, 3, out_ch, 4, stride=4)
    x = b.bn(x, out_ch)
    return b.act(x, fn)


def _resnet(b):
    x = _stem(b, 16, "relu")                       # 64x64
    for cin, cout in ((16, 16), (16, 32), (32, 64)):
        x = b.conv_bn(x, cin, cout, 3, stride=2, fn="relu")
        skip = x
        y = b.conv_bn(x, cout, cout, 3, fn="relu")
        y = b.conv_bn(y, cout, cout, 3)
        x = b.act(b.add(y, skip), "relu")
    return x, 64                                   # 8x8


def _mobilenet(b):
    x = _stem(b, 16, "hard_swish")                 # 64x64
    # (in, expand, out, stride, activation)
    blocks = [
        (16, 48, 24, 2, "relu"),
        (24, 72, 24, 1, "hard_swish"),
        (24, 72, 40, 2, "hard_swish"),
        (40, 120, 40, 1, "hard_swish"),
        (40, 120, 64, 2, "hard_swish"),
    ]
    for cin, mid, cout, stride, fn in blocks:
        skip = x
        y = b.conv_bn(x, cin, mid, 1, fn=fn)
        y = b.conv_bn(y, mid, mid, 3, stride=stride, groups=mid, fn=fn)
        y = b.conv_bn(y, mid, cout, 1)
        x = b.add(y, skip) if stride == 1 and cin == cout else y
    x = b.conv_bn(x, 64, 128, 1, fn="hard_swish")
    return x, 128


def _shufflenet(b, groups=2):
    x = _stem(b, 24, "relu")                       # 64x64
    # (in, out, stride); stride-1 units carry a residual
    units = [(24, 48, 2), (48, 48, 1), (48, 96, 2), (96, 96, 1), (96, 128, 2)]
    for cin, cout, stride in units:
        skip = x
        y = b.conv_bn(x, cin, cin, 1, groups=groups, fn="relu")
        y = b.shuffle(y, groups)
        y = b.conv_bn(y, cin, cin, 3, stride=stride, groups=cin)
        y = b.conv_bn(y, cin, cout, 1, groups=groups)
        if stride == 1:
            y = b.add(y, skip)
        x = b.act(y, "relu")
    return x, 128


_BUILDERS = {"tiny_resnet": _resnet, "tiny_mobilenet": _mobilenet,
             "tiny_shufflenet": _shufflenet}


def build_preset(name: str, descriptor_dim: int = 256) -> ModelGraph:
    if name not in _BUILDERS:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if descriptor_dim <= 0:
        raise InvalidConfig("descriptor_dim must be positive")
    b = GraphBuilder()
    x, feat = _BUILDERS[name](b)
    b.linear(b.gap(x), feat, descriptor_dim)
    return ModelGraph(b.layers, descriptor_dim, (3, 256, 256), name).validate()

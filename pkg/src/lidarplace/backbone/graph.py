"""Layer graph description, static shape inference and parameter accounting."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from ..errors import ShapeMismatch
from .ops import ACTIVATIONS, conv_out_size

KINDS = ("conv", "bn", "act", "add", "shuffle", "gap", "linear")
GRAPH_INPUT = -1


@dataclass(frozen=True)
class Layer:
    """One node. ``inputs`` holds producer layer indices (-1 = graph input).

    ``add`` layers take two inputs: the main path and the skip source.
    """

    kind: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "inputs": list(self.inputs), "attrs": dict(self.attrs)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d["inputs"]), dict(d["attrs"]))


@dataclass
class ModelGraph:
    layers: list
    descriptor_dim: int
    input_shape: tuple = (3, 256, 256)
    name: str = "custom"

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self._shapes = None

    # -- structure ------------------------------------------------------------------
    def validate(self):
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            if layer.kind not in KINDS:
                raise ShapeMismatch(f"layer {i}: unknown kind {layer.kind!r}")
            want = 2 if layer.kind == "add" else 1
            if len(layer.inputs) != want:
                raise ShapeMismatch(f"layer {i}: {layer.kind} expects {want} inputs")
            for src in layer.inputs:
                if not (GRAPH_INPUT <= src < i):
                    raise ShapeMismatch(f"layer {i}: input {src} is not an earlier layer")
        if n < 2 or self.layers[-1].kind != "linear" or self.layers[-2].kind != "gap":
            raise ShapeMismatch("graph must end with GlobalAvgPool -> Linear")
        if self.layers[-1].inputs != (n - 2,):
            raise ShapeMismatch("head Linear must consume the pooling output")
        if sum(l.kind == "gap" for l in self.layers) != 1 or sum(
                l.kind == "linear" for l in self.layers) != 1:
            raise ShapeMismatch("exactly one GlobalAvgPool and one Linear allowed")
        if self.layers[-1].attrs["out_dim"] != self.descriptor_dim:
            raise ShapeMismatch("head output differs from descriptor_dim")
        self.shapes()
        return self

    def shapes(self):
        """Static per-layer output shapes (without the batch axis)."""
        if self._shapes is not None:
            return self._shapes
        out = []

        def src(j):
            return self.input_shape if j == GRAPH_INPUT else out[j]

        for i, layer in enumerate(self.layers):
            a = layer.attrs
            s = src(layer.inputs[0])
            k = layer.kind
            if k == "conv":
                if len(s) != 3 or s[0] != a["in_ch"]:
                    raise ShapeMismatch(f"layer {i}: conv expects {a['in_ch']} channels, got {s}")
                g = a.get("groups", 1)
                if a["in_ch"] % g or a["out_ch"] % g:
                    raise ShapeMismatch(f"layer {i}: channels not divisible by groups={g}")
                ho = conv_out_size(s[1], a["kernel"], a["stride"], a["padding"])
                wo = conv_out_size(s[2], a["kernel"], a["stride"], a["padding"])
                if ho < 1 or wo < 1:
                    raise ShapeMismatch(f"layer {i}: kernel larger than padded input")
                out.append((a["out_ch"], ho, wo))
            elif k == "bn":
                if s[0] != a["channels"]:
                    raise ShapeMismatch(f"layer {i}: bn over {a['channels']} channels, got {s}")
                out.append(s)
            elif k == "act":
                if a["fn"] not in ACTIVATIONS:
                    raise ShapeMismatch(f"layer {i}: unknown activation {a['fn']!r}")
                out.append(s)
            elif k == "add":
                t = src(layer.inputs[1])
                if s != t:
                    raise ShapeMismatch(f"layer {i}: residual shapes {s} and {t} differ")
                out.append(s)
            elif k == "shuffle":
                if s[0] % a["groups"]:
                    raise ShapeMismatch(f"layer {i}: {s[0]} channels vs shuffle groups {a['groups']}")
                out.append(s)
            elif k == "gap":
                if len(s) != 3:
                    raise ShapeMismatch(f"layer {i}: pooling needs a spatial input")
                out.append((s[0],))
            elif k == "linear":
                if s != (a["in_dim"],):
                    raise ShapeMismatch(f"layer {i}: linear expects ({a['in_dim']},), got {s}")
                out.append((a["out_dim"],))
        self._shapes = out
        return out

    # -- parameters ----------------------------------------------------------------
    def param_shapes(self):
        """{(layer, name): shape} for every stored tensor, BN buffers included."""
        shapes = {}
        for i, layer in enumerate(self.layers):
            a = layer.attrs
            if layer.kind == "conv":
                g = a.get("groups", 1)
                shapes[(i, "weight")] = (a["out_ch"], a["in_ch"] // g, a["kernel"], a["kernel"])
                if a.get("bias", False):
                    shapes[(i, "bias")] = (a["out_ch"],)
            elif layer.kind == "bn":
                for name in ("gamma", "beta", "mean", "var"):
                    shapes[(i, name)] = (a["channels"],)
            elif layer.kind == "linear":
                shapes[(i, "weight")] = (a["out_dim"], a["in_dim"])
                shapes[(i, "bias")] = (a["out_dim"],)
        return shapes

    def trainable(self):
        return [key for key in self.param_shapes() if key[1] not in ("mean", "var")]

    def param_count(self, *, include_buffers=False):
        total = 0
        for (i, name), shape in self.param_shapes().items():
            if name in ("mean", "var") and not include_buffers:
                continue
            size = 1
            for d in shape:
                size *= d
            total += size
        return total

    def param_split(self):
        """Backbone/head counts, with and without the head bias.

        Returns {"backbone", "head", "head_no_bias", "total"}.
        """
        head_idx = len(self.layers) - 1
        a = self.layers[head_idx].attrs
        head = a["in_dim"] * a["out_dim"] + a["out_dim"]
        total = self.param_count()
        return {"backbone": total - head, "head": head,
                "head_no_bias": head - a["out_dim"], "total": total}

    # -- serialization ---------------------------------------------------------------
    def to_manifest(self):
        return {
            "name": self.name,
            "descriptor_dim": self.descriptor_dim,
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_manifest(cls, m):
        return cls([Layer.from_dict(d) for d in m["layers"]], m["descriptor_dim"],
                   tuple(m["input_shape"]), m.get("name", "custom"))

    def graph_hash(self):
        blob = json.dumps(self.to_manifest(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def count(self, kind, **attrs):
        return sum(
            l.kind == kind and all(l.attrs.get(k) == v for k, v in attrs.items())
            for l in self.layers)


class GraphBuilder:
    """Append-only helper used by the presets."""

    def __init__(self):
        self.layers = []

    @property
    def last(self):
        return len(self.layers) - 1

    def _add(self, kind, inputs, **attrs):
        self.layers.append(Layer(kind, tuple(inputs), attrs))
        return self.last

    def conv(self, src, in_ch, out_ch, kernel, stride=1, padding=0, groups=1, bias=False):
        return self._add("conv", [src], in_ch=in_ch, out_ch=out_ch, kernel=kernel,
                         stride=stride, padding=padding, groups=groups, bias=bias)

    def bn(self, src, channels, eps=1e-5):
        return self._add("bn", [src], channels=channels, eps=eps)

    def act(self, src, fn):
        return self._add("act", [src], fn=fn)

    def add(self, src, skip):
        return self._add("add", [src, skip])

    def shuffle(self, src, groups):
        return self._add("shuffle", [src], groups=groups)

    def gap(self, src):
        return self._add("gap", [src])

    def linear(self, src, in_dim, out_dim):
        return self._add("linear", [src], in_dim=in_dim, out_dim=out_dim)

    def conv_bn(self, src, in_ch, out_ch, kernel, stride=1, groups=1, fn=None):
        x = self.conv(src, in_ch, out_ch, kernel, stride, kernel // 2, groups)
        x = self.bn(x, out_ch)
        return self.act(x, fn) if fn else x

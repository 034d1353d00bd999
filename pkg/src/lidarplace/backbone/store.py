"""Parameter storage, initialization and the weight container file."""
from __future__ import annotations

import numpy as np

from .. import container
from ..errors import FormatError, ShapeMismatch
from .graph import ModelGraph

MAGIC = b"LPWS"


class WeightStore(dict):
    """Maps ``(layer_index, param_name)`` to a float32 array."""

    def copy(self):
        return WeightStore({k: v.copy() for k, v in self.items()})

    def check(self, graph: ModelGraph):
        want = graph.param_shapes()
        missing = set(want) - set(self)
        if missing:
            raise ShapeMismatch(f"missing parameters: {sorted(missing)[:5]}")
        for key, shape in want.items():
            if tuple(self[key].shape) != tuple(shape):
                raise ShapeMismatch(f"{key}: stored {self[key].shape}, graph wants {shape}")
        return self


def _key(k):
    return f"{k[0]}/{k[1]}"


def _unkey(s):
    i, name = s.split("/", 1)
    return int(i), name


def init_weights(graph: ModelGraph, seed: int) -> WeightStore:
    """He-normal convolutions, default BN statistics, small uniform head."""
    rng = np.random.default_rng(seed)
    ws = WeightStore()
    for (i, name), shape in graph.param_shapes().items():
        layer = graph.layers[i]
        if layer.kind == "conv" and name == "weight":
            fan_in = shape[1] * shape[2] * shape[3]
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif layer.kind == "linear" and name == "weight":
            bound = 1.0 / np.sqrt(shape[1])
            w = rng.uniform(-bound, bound, shape)
        elif name in ("gamma", "var"):
            w = np.ones(shape)
        else:
            w = np.zeros(shape)
        ws[(i, name)] = w.astype(np.float32)
    return ws


def save_weights(path, graph: ModelGraph, weights: WeightStore, extra_meta=None, extra=None):
    """Write graph manifest + float32 tensors. ``extra`` tensors are stored under
    their own string keys (used for optimizer state in checkpoints)."""
    meta = {"format": "weights", "graph_hash": graph.graph_hash(),
            "manifest": graph.to_manifest(), **(extra_meta or {})}
    tensors = {_key(k): np.asarray(v, dtype=np.float32) for k, v in sorted(weights.items())}
    for k, v in (extra or {}).items():
        tensors[k] = v
    container.save(path, MAGIC, meta, tensors)


def load_weights(path):
    """Returns (graph, weights, meta, extra_tensors)."""
    meta, tensors = container.load(path, MAGIC)
    graph = ModelGraph.from_manifest(meta["manifest"]).validate()
    if graph.graph_hash() != meta["graph_hash"]:
        raise FormatError("graph hash does not match manifest")
    weights, extra = WeightStore(), {}
    for k, v in tensors.items():
        if "/" in k and k.split("/", 1)[0].isdigit():
            weights[_unkey(k)] = v
        else:
            extra[k] = v
    return graph, weights.check(graph), meta, extra

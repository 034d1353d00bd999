"""Software-emulated half precision: binary16 storage, float32 accumulation."""
from __future__ import annotations

import warnings

import numpy as np

from .. import backbone as bb
from ..errors import NonFiniteWarning


def to_binary16(x) -> np.ndarray:
    """Round to IEEE 754 binary16 (nearest-even, overflow to +-inf) and widen to float32."""
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float32).astype(np.float16).astype(np.float32)


def half_weights(graph, weights):
    """BN-folded graph with every parameter rounded to binary16."""
    if any(l.kind == "bn" for l in graph.layers):
        graph, weights = bb.fold_batchnorm(graph, weights)
    out = bb.WeightStore({k: to_binary16(v) for k, v in weights.items()})
    return graph, out


def forward_fp16(graph, weights, batch, chunk: int = 32, prepared=False):
    """Descriptors with binary16 weights and inter-layer activations.

    Each layer computes in float32 from binary16 operands and its output is
    rounded back to binary16. Pass ``prepared=True`` when ``graph, weights``
    already come from :func:`half_weights`.
    """
    if not prepared:
        graph, weights = half_weights(graph, weights)
    bad = [0]

    def hook(i, out):
        h = to_binary16(out)
        bad[0] += int(h.size - np.count_nonzero(np.isfinite(h)))
        return h

    batch = np.asarray(batch)
    outs = [bb.run(graph, weights, batch[s:s + chunk], hook=hook)
            for s in range(0, len(batch), chunk)]
    pre = np.concatenate(outs) if outs else np.zeros((0, graph.descriptor_dim), np.float32)
    if bad[0]:
        warnings.warn(f"{bad[0]} non-finite binary16 value(s) in the FP16 pass",
                      NonFiniteWarning, stacklevel=2)
    return bb.normalize_descriptors(pre.astype(np.float32))

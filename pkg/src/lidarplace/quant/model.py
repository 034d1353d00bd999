"""Static PTQ conversion and the integer-only forward pass."""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import backbone as bb
from .. import container, kernels
from ..backbone import ops
from ..errors import FormatError, MissingStats, NonFiniteWarning, ShapeMismatch
from .core import (QMAX, QMIN, S_MIN, QuantParams, calibrate_mse, common_shift_multipliers,
                   quantize, quantize_multiplier)

MAGIC = b"LPQM"


@dataclass
class QuantizedModel:
    graph: bb.ModelGraph                      # BN-folded
    act: dict                                 # site -> QuantParams (site -1 = input)
    qweight: dict = field(default_factory=dict)   # layer -> int8 weights
    wscale: dict = field(default_factory=dict)    # layer -> float64 array, per out channel
    qbias: dict = field(default_factory=dict)     # layer -> int32 bias at scale s_in * s_w
    mult: dict = field(default_factory=dict)      # layer -> (mantissa[], shift[]) int64
    add_mult: dict = field(default_factory=dict)  # layer -> (mant_a, mant_b, shift)
    lut: dict = field(default_factory=dict)       # layer -> int8[256], index q + 128
    per_channel: bool = False


def _weight_scale(w, per_channel):
    """Symmetric scale max|w| / 127 (per output channel or per tensor)."""
    if per_channel:
        m = np.abs(w.reshape(w.shape[0], -1)).max(axis=1).astype(np.float64)
    else:
        m = np.full(w.shape[0], float(np.abs(w).max()))
    return np.where(m > 0, m / 127.0, S_MIN)


def _quantize_weight(w, scales):
    shape = (-1,) + (1,) * (w.ndim - 1)
    q = np.rint(w.astype(np.float64) / scales.reshape(shape))
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def _quantize_bias(b, scale):
    q = np.rint(np.asarray(b, dtype=np.float64) / scale)
    return np.clip(q, -2 ** 31, 2 ** 31 - 1).astype(np.int32)


def hard_swish_lut(p_in: QuantParams, p_out: QuantParams):
    """int8 table over all 256 inputs: dequantize -> hard_swish -> requantize."""
    q = np.arange(QMIN, QMAX + 1, dtype=np.float64)
    x = p_in.scale * (q - p_in.zero_point)
    y = x * np.clip(x + 3, 0, 6) / 6
    return quantize(y, p_out)


def site_params(graph, stats):
    """Activation parameters for every site whose values need their own grid."""
    act = {}

    def need(site):
        if site not in stats:
            raise MissingStats(f"no calibration statistics for site {site}")
        return calibrate_mse(stats[site].reservoir.values) if len(stats[site].reservoir) \
            else calibrate_mse([stats[site].lo, stats[site].hi])

    act[bb.GRAPH_INPUT] = need(bb.GRAPH_INPUT)
    for i, layer in enumerate(graph.layers):
        src = layer.inputs[0]
        if layer.kind in ("conv", "add", "gap") or (layer.kind == "act" and layer.attrs["fn"] == "hard_swish"):
            act[i] = need(i)
        elif layer.kind in ("act", "shuffle"):
            act[i] = act[src]
    return act


def quantize_model(graph, weights, stats, per_channel=False) -> QuantizedModel:
    """Fold BN, quantize weights symmetrically and derive all integer constants."""
    if any(l.kind == "bn" for l in graph.layers):
        graph, weights = bb.fold_batchnorm(graph, weights)
    act = site_params(graph, stats)
    qm = QuantizedModel(graph, act, per_channel=per_channel)
    shapes = graph.shapes()
    for i, layer in enumerate(graph.layers):
        k = layer.kind
        if k in ("conv", "linear"):
            w = weights[(i, "weight")]
            p_in = act[layer.inputs[0]]
            scales = _weight_scale(w, per_channel)
            qm.qweight[i] = _quantize_weight(w, scales)
            qm.wscale[i] = scales
            acc_scale = p_in.scale * scales
            b = weights.get((i, "bias"), np.zeros(w.shape[0], np.float32))
            qm.qbias[i] = _quantize_bias(b, acc_scale)
            if k == "conv":
                enc = [quantize_multiplier(s / act[i].scale) for s in acc_scale]
                qm.mult[i] = (np.array([e[0] for e in enc], np.int64),
                              np.array([e[1] for e in enc], np.int64))
        elif k == "add":
            pa, pb = act[layer.inputs[0]], act[layer.inputs[1]]
            qm.add_mult[i] = common_shift_multipliers(pa.scale / act[i].scale,
                                                      pb.scale / act[i].scale)
        elif k == "gap":
            src = layer.inputs[0]
            shape = graph.input_shape if src == bb.GRAPH_INPUT else shapes[src]
            hw = shape[1] * shape[2]
            mant, shift = quantize_multiplier(act[src].scale / (hw * act[i].scale))
            qm.mult[i] = (np.array([mant], np.int64), np.array([shift], np.int64))
        elif k == "act" and layer.attrs["fn"] == "hard_swish":
            qm.lut[i] = hard_swish_lut(act[layer.inputs[0]], act[i])
    return qm


# -- integer execution ---------------------------------------------------------------

def _channel_mult(mult, c):
    mant, shift = mult
    if len(mant) == 1:
        return np.repeat(mant, c), np.repeat(shift, c)
    return mant, shift


def _qconv(qm, i, layer, x, p_in):
    a = layer.attrs
    k, s, pad, g = a["kernel"], a["stride"], a["padding"], a.get("groups", 1)
    n, c, h, w = x.shape
    ho, wo = ops.conv_out_size(h, k, s, pad), ops.conv_out_size(w, k, s, pad)
    xc = x.astype(np.int16) - np.int16(p_in.zero_point)
    wq, bias = qm.qweight[i], qm.qbias[i]
    o = wq.shape[0]
    if g > 1 and g == c == o and wq.shape[1] == 1:
        xp = np.ascontiguousarray(np.pad(xc, ((0, 0), (0, 0), (pad, pad), (pad, pad))))
        acc = kernels.qdepthwise_acc(xp, np.ascontiguousarray(wq[:, 0]), bias, s, ho, wo)
        acc = acc.reshape(n, o, ho * wo)
    else:
        cg, og = c // g, o // g
        acc = np.empty((n, o, ho * wo), np.int32)
        for gi in range(g):
            cols, _, _ = ops.im2col(xc[:, gi * cg:(gi + 1) * cg], k, s, pad)
            wg = np.ascontiguousarray(wq[gi * og:(gi + 1) * og].reshape(og, -1))
            part = kernels.qgemm_acc(np.ascontiguousarray(cols), wg,
                                     np.ascontiguousarray(bias[gi * og:(gi + 1) * og]))
            acc[:, gi * og:(gi + 1) * og] = part.reshape(n, ho * wo, og).transpose(0, 2, 1)
    mant, shift = _channel_mult(qm.mult[i], o)
    out = kernels.requant(np.ascontiguousarray(acc), mant, shift, qm.act[i].zero_point)
    return out.reshape(n, o, ho, wo)


def forward_int8_raw(qm: QuantizedModel, batch, trace=None):
    """Integer pass; returns the head's int32 accumulators (N x d).

    ``trace(site, array)`` observes every integer intermediate in order.
    """
    graph = qm.graph
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != graph.input_shape:
        raise ShapeMismatch(f"batch shape {batch.shape} vs graph input {graph.input_shape}")
    x = quantize(batch, qm.act[bb.GRAPH_INPUT])
    outs = {bb.GRAPH_INPUT: x}
    if trace:
        trace(bb.GRAPH_INPUT, x)
    last_use = {}
    for i, layer in enumerate(graph.layers):
        for src in layer.inputs:
            last_use[src] = i
    head = None
    for i, layer in enumerate(graph.layers):
        src = layer.inputs[0]
        x, p_in = outs[src], qm.act.get(src)
        k = layer.kind
        if k == "conv":
            y = _qconv(qm, i, layer, x, p_in)
        elif k == "act":
            fn, z = layer.attrs["fn"], p_in.zero_point
            if fn == "relu":
                y = np.maximum(x, np.int8(z))
            elif fn == "relu6":
                top = min(QMAX, z + int(np.rint(6.0 / p_in.scale)))
                y = np.clip(x, z, top).astype(np.int8)
            else:
                y = qm.lut[i][x.astype(np.int16) + 128]
        elif k == "add":
            other = outs[layer.inputs[1]]
            pb = qm.act[layer.inputs[1]]
            ma, mb, shift = qm.add_mult[i]
            a = (x.astype(np.int16) - p_in.zero_point).ravel()
            b = (other.astype(np.int16) - pb.zero_point).ravel()
            y = kernels.qadd(a, b, ma, mb, shift, qm.act[i].zero_point).reshape(x.shape)
        elif k == "shuffle":
            y = ops.channel_shuffle(x, layer.attrs["groups"])
        elif k == "gap":
            n, c = x.shape[:2]
            sums = (x.astype(np.int32) - p_in.zero_point).reshape(n, c, -1).sum(axis=2, dtype=np.int32)
            mant, shift = _channel_mult(qm.mult[i], c)
            y = kernels.requant(np.ascontiguousarray(sums.reshape(n, c, 1)), mant, shift,
                                qm.act[i].zero_point).reshape(n, c)
        elif k == "linear":
            xc = np.ascontiguousarray(x.astype(np.int16) - p_in.zero_point)
            head = kernels.qgemm_acc(xc, np.ascontiguousarray(qm.qweight[i]), qm.qbias[i])
            y = head
        else:
            raise ShapeMismatch(f"layer {i}: {k} not executable in int8")
        if trace:
            trace(i, y)
        outs[i] = y
        for j in layer.inputs:
            if last_use.get(j) == i:
                outs.pop(j, None)
    return head


def dequantize_head(qm: QuantizedModel, acc):
    i = len(qm.graph.layers) - 1
    scale = qm.act[qm.graph.layers[i].inputs[0]].scale * qm.wscale[i]
    return (acc.astype(np.float64) * scale[None, :]).astype(np.float32)


def forward_int8(qm: QuantizedModel, batch, chunk=32, return_pre=False):
    """Unit-norm descriptors from the integer pipeline (float only at the very end)."""
    batch = np.asarray(batch)
    pre = [dequantize_head(qm, forward_int8_raw(qm, batch[s:s + chunk]))
           for s in range(0, len(batch), chunk)]
    pre = np.concatenate(pre) if pre else np.zeros((0, qm.graph.descriptor_dim), np.float32)
    if not np.all(np.isfinite(pre)):
        warnings.warn("non-finite value in dequantized descriptor", NonFiniteWarning, stacklevel=2)
    desc = bb.normalize_descriptors(pre)
    return (desc, pre) if return_pre else desc


def trace_digest(qm: QuantizedModel, batch, tail_only=False) -> str:
    """SHA-256 over the integer intermediate stream (or only the head accumulators)."""
    h = hashlib.sha256()

    def trace(site, arr):
        if not tail_only or site == len(qm.graph.layers) - 1:
            h.update(str(site).encode())
            h.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())

    forward_int8_raw(qm, batch, trace)
    return h.hexdigest()


# -- container -------------------------------------------------------------------------

def save_quantized(path, qm: QuantizedModel):
    meta = {
        "format": "int8", "manifest": qm.graph.to_manifest(),
        "graph_hash": qm.graph.graph_hash(), "per_channel": qm.per_channel,
        "act": {str(k): [p.scale, p.zero_point] for k, p in sorted(qm.act.items())},
        "add_mult": {str(k): list(map(int, v)) for k, v in sorted(qm.add_mult.items())},
    }
    tensors = {}
    for i in sorted(qm.qweight):
        tensors[f"w/{i}"] = qm.qweight[i]
        tensors[f"b/{i}"] = qm.qbias[i]
        tensors[f"s/{i}"] = qm.wscale[i]
    for i, (mant, shift) in sorted(qm.mult.items()):
        tensors[f"mant/{i}"] = mant
        tensors[f"shift/{i}"] = shift
    for i, table in sorted(qm.lut.items()):
        tensors[f"lut/{i}"] = table
    container.save(path, MAGIC, meta, tensors)


def load_quantized(path) -> QuantizedModel:
    meta, t = container.load(path, MAGIC)
    graph = bb.ModelGraph.from_manifest(meta["manifest"]).validate()
    if graph.graph_hash() != meta["graph_hash"]:
        raise FormatError("graph hash does not match manifest")
    qm = QuantizedModel(graph, {int(k): QuantParams(s, z) for k, (s, z) in meta["act"].items()},
                        per_channel=meta["per_channel"])
    qm.add_mult = {int(k): tuple(v) for k, v in meta["add_mult"].items()}
    for key, arr in t.items():
        kind, i = key.split("/")
        i = int(i)
        if kind == "w":
            qm.qweight[i] = arr
        elif kind == "b":
            qm.qbias[i] = arr
        elif kind == "s":
            qm.wscale[i] = arr
        elif kind == "lut":
            qm.lut[i] = arr
    for i in {int(k.split("/")[1]) for k in t if k.startswith("mant/")}:
        qm.mult[i] = (t[f"mant/{i}"], t[f"shift/{i}"])
    return qm

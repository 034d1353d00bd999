"""Graph execution: inference forward, recorded forward + reverse pass, BN folding."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateDescriptor, NegativeVariance, NonFiniteGradient, ShapeMismatch
from . import ops
from .graph import GRAPH_INPUT, Layer, ModelGraph
from .store import WeightStore


def _last_use(graph):
    last = {}
    for i, layer in enumerate(graph.layers):
        for src in layer.inputs:
            last[src] = i
    return last


def apply_layer(layer: Layer, idx: int, args, weights, training=False, bn_stats=None):
    """Evaluate one layer. ``bn_stats`` (a dict) receives batch statistics in training mode."""
    a = layer.attrs
    x = args[0]
    k = layer.kind
    if k == "conv":
        return ops.conv2d(x, weights[(idx, "weight")], weights.get((idx, "bias")),
                          a["stride"], a["padding"], a.get("groups", 1))
    if k == "bn":
        g, b = weights[(idx, "gamma")], weights[(idx, "beta")]
        if training:
            y, cache, mu, var = ops.batchnorm_train(x, g, b, a["eps"])
            bn_stats[idx] = (cache, mu, var)
            return y
        return ops.batchnorm(x, g, b, weights[(idx, "mean")], weights[(idx, "var")], a["eps"])
    if k == "act":
        return ops.activation(x, a["fn"])
    if k == "add":
        return x + args[1]
    if k == "shuffle":
        return ops.channel_shuffle(x, a["groups"])
    if k == "gap":
        return ops.global_avg_pool(x)
    if k == "linear":
        return ops.linear(x, weights[(idx, "weight")], weights[(idx, "bias")])
    raise ShapeMismatch(f"unknown layer kind {k!r}")


def _check_input(graph, batch):
    if batch.ndim != 4 or tuple(batch.shape[1:]) != graph.input_shape:
        raise ShapeMismatch(f"batch shape {batch.shape} does not match graph input "
                            f"(N, {', '.join(map(str, graph.input_shape))})")


def run(graph: ModelGraph, weights, batch, hook=None):
    """Inference pass returning the pre-normalization head output.

    ``hook(layer_index, output)`` may return a replacement array; it is used by
    the reduced-precision and calibration paths. Index -1 is the graph input.
    """
    _check_input(graph, batch)
    last = _last_use(graph)
    x = batch
    if hook is not None:
        x = hook(GRAPH_INPUT, x)
    live = {GRAPH_INPUT: x}
    out = x
    for i, layer in enumerate(graph.layers):
        out = apply_layer(layer, i, [live[j] for j in layer.inputs], weights)
        if hook is not None:
            out = hook(i, out)
        live[i] = out
        for j in layer.inputs:
            if last.get(j) == i:
                live.pop(j, None)
    return out


def normalize_descriptors(pre):
    desc, _, bad = ops.l2_normalize(pre)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} degenerate descriptor(s) normalized to zero",
                      DegenerateDescriptor, stacklevel=3)
    return desc


def forward(graph: ModelGraph, weights, batch, chunk: int = 32):
    """Unit-norm descriptors (N x d) for a float batch, processed in chunks."""
    batch = np.asarray(batch)
    outs = [run(graph, weights, batch[i:i + chunk]) for i in range(0, len(batch), chunk)]
    pre = np.concatenate(outs) if outs else np.zeros((0, graph.descriptor_dim), np.float32)
    return normalize_descriptors(pre)


# -- recorded pass --------------------------------------------------------------------

@dataclass
class Tape:
    x: np.ndarray
    outputs: list
    bn: dict = field(default_factory=dict)
    desc: np.ndarray = None
    norms: np.ndarray = None
    training: bool = False


def forward_record(graph: ModelGraph, weights, batch, training=False) -> Tape:
    _check_input(graph, batch)
    tape = Tape(batch, [], training=training)

    def get(j):
        return batch if j == GRAPH_INPUT else tape.outputs[j]

    for i, layer in enumerate(graph.layers):
        tape.outputs.append(apply_layer(layer, i, [get(j) for j in layer.inputs], weights,
                                        training, tape.bn))
    tape.desc, tape.norms, _ = ops.l2_normalize(tape.outputs[-1])
    return tape


def backward(graph: ModelGraph, weights, tape: Tape, grad_desc, check_finite=True,
             need_input_grad=False):
    """Reverse pass from d(loss)/d(descriptor) to parameter gradients.

    Returns a dict keyed like the WeightStore (trainable entries only); with
    ``need_input_grad`` the gradient w.r.t. the batch is stored under ``"input"``.
    """
    grads = {}
    pending = {len(graph.layers) - 1: ops.l2_normalize_backward(grad_desc, tape.desc, tape.norms)}

    def get(j):
        return tape.x if j == GRAPH_INPUT else tape.outputs[j]

    def push(j, g):
        if j == GRAPH_INPUT and not need_input_grad:
            return
        pending[j] = pending[j] + g if j in pending else g

    for i in range(len(graph.layers) - 1, -1, -1):
        dy = pending.pop(i, None)
        layer = graph.layers[i]
        if dy is None:
            continue
        if check_finite and not np.all(np.isfinite(dy)):
            raise NonFiniteGradient(i)
        a = layer.attrs
        src = layer.inputs[0]
        x = get(src)
        k = layer.kind
        if k == "conv":
            w = weights[(i, "weight")]
            has_bias = (i, "bias") in weights
            dx, dw, db = ops.conv2d_backward(
                dy, x, w, a["stride"], a["padding"], a.get("groups", 1),
                need_dx=src != GRAPH_INPUT or need_input_grad, has_bias=has_bias)
            grads[(i, "weight")] = dw
            if has_bias:
                grads[(i, "bias")] = db
        elif k == "bn":
            gamma = weights[(i, "gamma")]
            if tape.training:
                dx, dg, dbeta = ops.batchnorm_train_backward(dy, tape.bn[i][0], gamma)
            else:
                dx, dg, dbeta = ops.batchnorm_eval_backward(
                    dy, x, gamma, weights[(i, "mean")], weights[(i, "var")], a["eps"])
            grads[(i, "gamma")], grads[(i, "beta")] = dg, dbeta
        elif k == "act":
            dx = ops.activation_backward(dy, x, a["fn"])
        elif k == "add":
            push(layer.inputs[1], dy)
            dx = dy
        elif k == "shuffle":
            dx = ops.channel_shuffle_backward(dy, a["groups"])
        elif k == "gap":
            dx = ops.global_avg_pool_backward(dy, x.shape)
        elif k == "linear":
            dx, grads[(i, "weight")], grads[(i, "bias")] = ops.linear_backward(
                dy, x, weights[(i, "weight")])
        if dx is not None:
            push(src, dx)
    if need_input_grad:
        grads["input"] = pending.get(GRAPH_INPUT, np.zeros_like(tape.x))
    if check_finite:
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(key[0] if isinstance(key, tuple) else -1)
    return grads


def update_bn_running(weights, tape: Tape, momentum=0.1):
    """Exponential update of BN running statistics from a training pass."""
    for i, (cache, mu, var) in tape.bn.items():
        n = cache[0].shape[0] * cache[0].shape[2] * cache[0].shape[3]
        unbiased = var * n / max(n - 1, 1)
        weights[(i, "mean")] = ((1 - momentum) * weights[(i, "mean")] + momentum * mu).astype(np.float32)
        weights[(i, "var")] = ((1 - momentum) * weights[(i, "var")] + momentum * unbiased).astype(np.float32)


# -- batch-norm folding ---------------------------------------------------------------

def fold_conv_bn(w, b, gamma, beta, mean, var, eps):
    """Fold inference BN into conv weights: w' = w*gamma/sqrt(var+eps), b' = (b-mean)*...+beta."""
    if np.any(var < 0):
        raise NegativeVariance(f"negative variance in {int((var < 0).sum())} channel(s)")
    if w.shape[0] != gamma.shape[0]:
        raise ShapeMismatch(f"bn over {gamma.shape[0]} channels, conv has {w.shape[0]}")
    f = np.float64
    scale = gamma.astype(f) / np.sqrt(var.astype(f) + eps)
    b = np.zeros(w.shape[0]) if b is None else b.astype(f)
    w2 = (w.astype(f) * scale[:, None, None, None]).astype(w.dtype)
    b2 = ((b - mean.astype(f)) * scale + beta.astype(f)).astype(w.dtype)
    return w2, b2


def fold_batchnorm(graph: ModelGraph, weights):
    """Return an equivalent (graph, weights) with every conv->bn pair merged.

    A BN is folded only when its producer is a conv consumed by nothing else.
    """
    consumers = {}
    for i, layer in enumerate(graph.layers):
        for src in layer.inputs:
            consumers.setdefault(src, []).append(i)
    fold_into = {}
    for i, layer in enumerate(graph.layers):
        if layer.kind == "bn":
            src = layer.inputs[0]
            if src != GRAPH_INPUT and graph.layers[src].kind == "conv" and consumers[src] == [i]:
                fold_into[i] = src

    new_index, layers, new_w = {GRAPH_INPUT: GRAPH_INPUT}, [], WeightStore()
    for i, layer in enumerate(graph.layers):
        if i in fold_into:
            new_index[i] = new_index[fold_into[i]]
            continue
        j = len(layers)
        new_index[i] = j
        inputs = tuple(new_index[s] for s in layer.inputs)
        attrs = dict(layer.attrs)
        if layer.kind == "conv":
            bn = next((b for b, c in fold_into.items() if c == i), None)
            w, b = weights[(i, "weight")], weights.get((i, "bias"))
            if bn is not None:
                w, b = fold_conv_bn(w, b, weights[(bn, "gamma")], weights[(bn, "beta")],
                                    weights[(bn, "mean")], weights[(bn, "var")],
                                    graph.layers[bn].attrs["eps"])
            new_w[(j, "weight")] = w
            if b is not None:
                new_w[(j, "bias")] = b
                attrs["bias"] = True
        else:
            for (li, name), v in weights.items():
                if li == i:
                    new_w[(j, name)] = v
        layers.append(Layer(layer.kind, inputs, attrs))
    folded = ModelGraph(layers, graph.descriptor_dim, graph.input_shape, graph.name)
    return folded.validate(), new_w

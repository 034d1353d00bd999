"""Finite-difference checks of the reverse pass, one small graph per layer type.

Every case is a graph ``input -> [layer under test] -> gap -> linear`` (the
head plus L2 normalization are always present), scored with the triplet
loss. Checks run in float64 so the central difference is limited by
truncation, not rounding. Inputs are nudged away from activation kinks and
the hinge is kept away from zero so the finite difference never straddles
a non-differentiable point.
"""
import numpy as np

from lidarplace import backbone as bb
from lidarplace.backbone.graph import GRAPH_INPUT, GraphBuilder, ModelGraph
from lidarplace.train import triplet_loss_batch

from oracles import central_difference, rel_error

H = 1e-3
TOL = 1e-3
FLOOR = 1e-6
SHAPE = (4, 5, 5)
N = 4                       # anchor, positive, two negatives
A_IDX, P_IDX, N_IDX = [0], [1], [[2, 3]]
KINKS = {"relu": (0.0,), "relu6": (0.0, 6.0), "hard_swish": (-3.0, 3.0)}


def _graph(build, dim=6):
    b = GraphBuilder()
    x = build(b)
    c = 4
    g = b.gap(x)
    b.linear(g, c, dim)
    return ModelGraph(b.layers, dim, SHAPE, "probe").validate()


CASES = {
    "conv": lambda b: b.conv(GRAPH_INPUT, 4, 4, 3, 1, 1, bias=True),
    "conv_stride2": lambda b: b.conv(GRAPH_INPUT, 4, 4, 3, 2, 1),
    "depthwise_conv": lambda b: b.conv(GRAPH_INPUT, 4, 4, 3, 1, 1, groups=4),
    "batchnorm": lambda b: b.bn(b.conv(GRAPH_INPUT, 4, 4, 1), 4),
    "relu": lambda b: b.act(GRAPH_INPUT, "relu"),
    "relu6": lambda b: b.act(GRAPH_INPUT, "relu6"),
    "hard_swish": lambda b: b.act(GRAPH_INPUT, "hard_swish"),
    "residual_add": lambda b: b.add(b.conv(GRAPH_INPUT, 4, 4, 3, 1, 1), GRAPH_INPUT),
    "channel_shuffle": lambda b: b.conv(b.shuffle(GRAPH_INPUT, 2), 4, 4, 3, 1, 1),
    "global_avg_pool": lambda b: GRAPH_INPUT,
    "linear": lambda b: GRAPH_INPUT,
    "l2_normalize": lambda b: GRAPH_INPUT,
    "triplet_hinge": lambda b: GRAPH_INPUT,
}
LAYER_TYPES = tuple(CASES)


def _nudge(x, fn, gap=0.05):
    for k in KINKS.get(fn, ()):
        near = np.abs(x - k) < gap
        x[near] = k + np.where(x[near] >= k, 2, -2) * gap
    return x


def setup(case, seed):
    rng = np.random.default_rng([seed, sum(map(ord, case))])
    graph = _graph(CASES[case])
    weights = {k: v.astype(np.float64) for k, v in bb.init_weights(graph, seed).items()}
    for (i, name), v in list(weights.items()):
        if name in ("gamma", "beta", "bias"):
            weights[(i, name)] = v + rng.normal(0, 0.3, v.shape)
    x = rng.normal(0, 1, (N,) + SHAPE)
    fn = next((l.attrs["fn"] for l in graph.layers if l.kind == "act"), None)
    if fn:
        x = _nudge(x * 4, fn)
    training = any(l.kind == "bn" for l in graph.layers)
    margin = 2.5
    if case == "triplet_hinge":
        # a margin that leaves the hinges mixed but none near zero
        desc = bb.forward_record(graph, weights, x).desc
        d_ap = np.linalg.norm(desc[0] - desc[1])
        d_an = np.linalg.norm(desc[[2, 3]] - desc[0], axis=1)
        gap = d_an - d_ap
        margin = float(np.mean(gap)) if abs(gap[0] - gap[1]) > 0.02 else float(gap.max() + 0.1)
    return graph, weights, x, training, margin


def loss(graph, weights, x, training, margin):
    desc = bb.forward_record(graph, weights, x, training=training).desc
    return triplet_loss_batch(desc, A_IDX, P_IDX, np.array(N_IDX), margin)[0]


def analytic(graph, weights, x, training, margin):
    tape = bb.forward_record(graph, weights, x, training=training)
    _, g = triplet_loss_batch(tape.desc, A_IDX, P_IDX, np.array(N_IDX), margin)
    return bb.backward(graph, weights, tape, g, need_input_grad=True)


def probe_targets(case, graph, weights):
    """Tensors probed for a case: its own parameters, else the input."""
    kinds = {"global_avg_pool", "relu", "relu6", "hard_swish", "channel_shuffle"}
    if case in kinds:
        return ["input"]
    if case in ("linear", "l2_normalize", "triplet_hinge"):
        return [k for k in weights if graph.layers[k[0]].kind == "linear"]
    if case == "residual_add":
        return ["input", (0, "weight")]
    return [k for k in weights if graph.layers[k[0]].kind != "linear"
            and k[1] not in ("mean", "var")]


def check_case(case, seed, probes=10):
    """Max relative error over ``probes`` random entries of the probed tensors."""
    graph, weights, x, training, margin = setup(case, seed)
    grads = analytic(graph, weights, x, training, margin)
    targets = probe_targets(case, graph, weights)
    rng = np.random.default_rng([seed, 99])
    worst = 0.0
    for _ in range(probes):
        key = targets[rng.integers(len(targets))]
        arr = x if key == "input" else weights[key]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        num = central_difference(lambda: loss(graph, weights, x, training, margin), arr, idx, H)
        worst = max(worst, rel_error(float(grads[key][idx]), num, FLOOR))
    return worst

"""Pose-supervised metric learning: triplet mining, triplet loss, AdamW."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as bb
from .bev import BevConfig, rasterize, rotate_cloud, to_tensor
from .errors import DimensionMismatch, InvalidConfig, NoValidTriplets

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 50
    margin: float = 0.3
    tau_p: float = 5.0
    tau_n: float = 10.0
    negatives_per_anchor: int = 4
    batch_size: int = 16              # triplets per optimizer step
    anchors_per_epoch: int = 128      # 0 = every eligible anchor
    augment: bool = True
    hard_negatives: bool = True       # re-pick the K closest in-batch negatives after the forward pass
    bn_momentum: float = 0.1
    val_every: int = 10
    seed: int = 0

    def validate(self):
        if not self.tau_p < self.tau_n:
            raise InvalidConfig("tau_p must be below tau_n")
        if not self.margin > 0:
            raise InvalidConfig("margin must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.negatives_per_anchor < 1:
            raise InvalidConfig("epochs, batch_size and negatives_per_anchor must be >= 1")
        return self


@dataclass
class Triplet:
    anchor_id: int
    positive_id: int
    negative_ids: tuple


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


# -- mining -------------------------------------------------------------------------

def _positions(frames):
    return np.array([f.pose.position for f in frames], dtype=np.float64)


def mine_triplets(frames, config: TrainConfig, epoch_seed: int) -> list:
    """Sample one triplet per anchor for this epoch.

    Anchors are drawn without replacement. Negatives are taken from the frames
    already present in the anchor's batch (anchors and positives) whenever enough
    of them lie beyond ``tau_n``, so one rendered image serves several roles.
    """
    config.validate()
    pos = _positions(frames)
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
    ids = np.array([f.id for f in frames])
    n = len(frames)
    is_pos = (dist < config.tau_p) & ~np.eye(n, dtype=bool)
    is_neg = dist > config.tau_n
    eligible = np.flatnonzero(is_pos.any(axis=1) & (is_neg.sum(axis=1) >= config.negatives_per_anchor))
    if n < 2 or not len(eligible):
        raise NoValidTriplets("no frame pair satisfies the positive rule with enough negatives")

    rng = np.random.default_rng([config.seed, epoch_seed])
    anchors = rng.permutation(eligible)
    if config.anchors_per_epoch:
        anchors = anchors[:config.anchors_per_epoch]
    positives = np.array([rng.choice(np.flatnonzero(is_pos[a])) for a in anchors], dtype=np.int64)

    triplets = []
    k = config.negatives_per_anchor
    for start in range(0, len(anchors), config.batch_size):
        a_chunk = anchors[start:start + config.batch_size]
        p_chunk = positives[start:start + config.batch_size]
        pool = np.unique(np.concatenate([a_chunk, p_chunk]))
        for a, p in zip(a_chunk, p_chunk):
            local = pool[is_neg[a, pool]]
            if len(local) >= k:
                negs = rng.choice(local, k, replace=False)
            else:
                extra = np.setdiff1d(np.flatnonzero(is_neg[a]), local)
                negs = np.concatenate([local, rng.choice(extra, k - len(local), replace=False)])
            triplets.append(Triplet(int(ids[a]), int(ids[p]), tuple(int(ids[j]) for j in negs)))
    return triplets


# -- loss ----------------------------------------------------------------------------

def triplet_loss(g_a, g_p, g_negs, margin: float) -> float:
    """Mean over negatives of max(0, |a-p| - |a-n| + margin)."""
    g_a, g_p, g_negs = np.asarray(g_a), np.asarray(g_p), np.atleast_2d(g_negs)
    if g_a.shape != g_p.shape or g_negs.shape[1:] != g_a.shape:
        raise DimensionMismatch(f"descriptor shapes {g_a.shape}, {g_p.shape}, {g_negs.shape}")
    d_ap = np.linalg.norm(g_a - g_p)
    d_an = np.linalg.norm(g_negs - g_a, axis=1)
    return float(np.mean(np.maximum(0.0, d_ap - d_an + margin)))


def _dist_grad(u, v):
    """d|u-v|/du for rows, zero where u == v."""
    diff = u - v
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    return np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0), norm[..., 0]


def triplet_loss_batch(desc, a_idx, p_idx, n_idx, margin):
    """Mean triplet loss over rows of ``desc`` and its gradient w.r.t. ``desc``.

    ``n_idx`` is (T, K): K negatives per triplet.
    """
    a_idx, p_idx, n_idx = np.asarray(a_idx), np.asarray(p_idx), np.asarray(n_idx)
    t, k = n_idx.shape
    ga, gp, gn = desc[a_idx], desc[p_idx], desc[n_idx]
    u_ap, d_ap = _dist_grad(ga, gp)
    u_an, d_an = _dist_grad(ga[:, None, :], gn)
    hinge = d_ap[:, None] - d_an + margin
    active = (hinge > 0).astype(desc.dtype)
    loss = float(np.maximum(hinge, 0).mean())

    w = active / (t * k)                               # d loss / d hinge
    grad = np.zeros_like(desc)
    coef_ap = w.sum(axis=1)[:, None]
    np.add.at(grad, a_idx, coef_ap * u_ap - (w[:, :, None] * u_an).sum(axis=1))
    np.add.at(grad, p_idx, -coef_ap * u_ap)
    np.add.at(grad, n_idx.ravel(), (w[:, :, None] * u_an).reshape(-1, desc.shape[1]))
    return loss, grad


def hardest_negatives(desc, a_idx, candidates, k):
    """For each anchor, the ``k`` candidate rows closest to it in descriptor space.

    ``candidates[t]`` lists the rows allowed as negatives for triplet t; ties
    break by row index.
    """
    out = []
    for a, cand in zip(a_idx, candidates):
        cand = np.asarray(cand)
        d = np.linalg.norm(desc[cand] - desc[a], axis=1)
        out.append(cand[np.lexsort((cand, d))[:k]])
    return np.array(out, dtype=np.int64)


def loss_and_gradients(graph, weights, batch, a_idx, p_idx, n_idx, margin, training=True,
                       candidates=None):
    """Forward, triplet loss and reverse pass. Returns (loss, grads, tape).

    With ``candidates`` the negatives are re-chosen online as the hardest
    ``len(n_idx[0])`` rows among each triplet's candidates.
    """
    tape = bb.forward_record(graph, weights, batch, training=training)
    if candidates is not None:
        n_idx = hardest_negatives(tape.desc, a_idx, candidates, len(n_idx[0]))
    loss, gdesc = triplet_loss_batch(tape.desc, a_idx, p_idx, n_idx, margin)
    grads = bb.backward(graph, weights, tape, gdesc.astype(tape.desc.dtype))
    return loss, grads, tape


# -- optimizer -----------------------------------------------------------------------

def adamw_step(weights, gradients, state: OptimizerState, config: TrainConfig):
    """Decoupled-decay Adam: theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    lr, wd = config.learning_rate, config.weight_decay
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for key, g in gradients.items():
        if not isinstance(key, tuple):
            continue
        g = g.astype(np.float64)
        m = state.m.get(key, np.zeros_like(g))
        v = state.v.get(key, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[key], state.v[key] = m, v
        theta = weights[key].astype(np.float64)
        theta = theta - lr * (m / c1) / (np.sqrt(v / c2) + state.eps) - lr * wd * theta
        weights[key] = theta.astype(weights[key].dtype)
    return weights


# -- loop ------------------------------------------------------------------------------

def _render(frames_by_id, fids, rng, bev_config, augment):
    images = []
    for fid in fids:
        cloud = frames_by_id[fid].cloud
        if augment:
            cloud = rotate_cloud(cloud, rng.uniform(0.0, 2 * np.pi))
        images.append(rasterize(cloud, bev_config, fid))
    return to_tensor(images)


@dataclass
class TrainResult:
    weights: bb.WeightStore
    state: OptimizerState
    history: list          # [epoch, mean_loss, val_recall1 or None]


def train(graph, weights, frames, config: TrainConfig, bev_config: BevConfig = BevConfig(),
          validate=None, progress=None) -> TrainResult:
    """Run ``config.epochs`` epochs of triplet training on ``frames``.

    ``validate(weights) -> recall@1`` is called every ``val_every`` epochs and
    after the last one.
    """
    config.validate()
    weights = weights.copy()
    state = OptimizerState()
    by_id = {f.id: f for f in frames}
    pos_of = {f.id: np.asarray(f.pose.position, dtype=np.float64) for f in frames}
    history = []
    for epoch in range(config.epochs):
        triplets = mine_triplets(frames, config, epoch)
        losses = []
        for b, start in enumerate(range(0, len(triplets), config.batch_size)):
            chunk = triplets[start:start + config.batch_size]
            fids = sorted({t.anchor_id for t in chunk} | {t.positive_id for t in chunk}
                          | {n for t in chunk for n in t.negative_ids})
            slot = {fid: i for i, fid in enumerate(fids)}
            rng = np.random.default_rng([config.seed, epoch, b, 7])
            batch = _render(by_id, fids, rng, bev_config, config.augment)
            a_idx = [slot[t.anchor_id] for t in chunk]
            p_idx = [slot[t.positive_id] for t in chunk]
            n_idx = [[slot[n] for n in t.negative_ids] for t in chunk]
            cands = None
            if config.hard_negatives:
                cands = [[slot[f] for f in fids
                          if np.linalg.norm(pos_of[f] - pos_of[t.anchor_id]) > config.tau_n]
                         for t in chunk]
            loss, grads, tape = loss_and_gradients(graph, weights, batch, a_idx, p_idx, n_idx,
                                                   config.margin, candidates=cands)
            bb.update_bn_running(weights, tape, config.bn_momentum)
            adamw_step(weights, grads, state, config)
            losses.append(loss)
        val = None
        last = epoch == config.epochs - 1
        if validate is not None and ((epoch + 1) % max(config.val_every, 1) == 0 or last):
            val = float(validate(weights))
        history.append([epoch + 1, float(np.mean(losses)), val])
        log.info("epoch %d loss %.4f val %s", epoch + 1, history[-1][1], val)
        if progress is not None:
            progress(history[-1])
    return TrainResult(weights, state, history)


def write_log(path, history):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "val_recall1"])
        for epoch, loss, val in history:
            w.writerow([epoch, repr(loss), "" if val is None else repr(val)])


def save_checkpoint(path, graph, result: TrainResult, config: TrainConfig):
    extra = {}
    for (i, name), m in result.state.m.items():
        extra[f"m:{i}/{name}"] = m
        extra[f"v:{i}/{name}"] = result.state.v[(i, name)]
    bb.save_weights(path, graph, result.weights,
                    {"optimizer_step": result.state.t, "train_config": asdict(config)},
                    extra)


def load_checkpoint(path):
    """Returns (graph, weights, OptimizerState, TrainConfig or None)."""
    graph, weights, meta, extra = bb.load_weights(path)
    state = OptimizerState(t=int(meta.get("optimizer_step", 0)))
    for k, v in extra.items():
        kind, rest = k.split(":", 1)
        i, name = rest.split("/", 1)
        getattr(state, kind)[(int(i), name)] = v.astype(np.float64)
    cfg = TrainConfig(**meta["train_config"]) if "train_config" in meta else None
    return graph, weights, state, cfg

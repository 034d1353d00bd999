"""Activation statistics gathered from a calibration set."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import backbone as bb
from .. import container
from ..errors import EmptyCalibration, ShapeMismatch

RESERVOIR_CAP = 4096
RESERVOIR_STREAM = 0x5EED  # keeps reservoir keys independent of data drawn with the same seed


class Reservoir:
    """Uniform sample without replacement of everything ever added.

    Each value gets a random key from a seeded generator and the ``cap``
    smallest keys are retained (bottom-k sampling), which is order-preserving
    deterministic for a fixed seed and stream.
    """

    def __init__(self, cap=RESERVOIR_CAP, seed=0):
        self.cap = cap
        self.rng = np.random.default_rng(seed)
        self.keys = np.zeros(0)
        self.values = np.zeros(0)
        self.seen = 0

    def add(self, values):
        v = np.asarray(values, dtype=np.float64).ravel()
        keys = self.rng.random(v.size)
        self.seen += v.size
        if len(self.keys) >= self.cap:
            thr = self.keys.max()
            keep = keys < thr
            v, keys = v[keep], keys[keep]
        allk = np.concatenate([self.keys, keys])
        allv = np.concatenate([self.values, v])
        if len(allk) > self.cap:
            idx = np.argsort(allk, kind="stable")[:self.cap]
            allk, allv = allk[idx], allv[idx]
        self.keys, self.values = allk, allv

    def __len__(self):
        return len(self.values)


@dataclass
class SiteStats:
    lo: float = np.inf
    hi: float = -np.inf
    reservoir: Reservoir = field(default_factory=Reservoir)

    def update(self, x):
        x = np.asarray(x)
        self.lo = min(self.lo, float(x.min()))
        self.hi = max(self.hi, float(x.max()))
        self.reservoir.add(x)


def stat_sites(graph):
    """Graph input (-1) plus every layer output except the float head."""
    return [bb.GRAPH_INPUT] + list(range(len(graph.layers) - 1))


def collect_stats(graph, weights, calib_images, seed=0, batch=16, cap=RESERVOIR_CAP) -> dict:
    """Run the float graph on the calibration set; return {site: SiteStats}.

    ``graph`` must already be BN-folded so that site indices match the
    quantized model.
    """
    if any(l.kind == "bn" for l in graph.layers):
        raise ShapeMismatch("collect_stats expects a BN-folded graph")
    images = np.asarray(calib_images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise EmptyCalibration("need at least one calibration image")
    stats = {s: SiteStats(reservoir=Reservoir(cap, [seed, RESERVOIR_STREAM, s + 1])) for s in stat_sites(graph)}

    def hook(i, out):
        if i in stats:
            stats[i].update(out)
        return out

    for start in range(0, len(images), batch):
        bb.run(graph, weights, images[start:start + batch], hook=hook)
    return stats


STATS_MAGIC = b"LPCS"


def save_stats(path, stats: dict, meta=None):
    sites = sorted(stats)
    tensors = {"lo": np.array([stats[s].lo for s in sites]),
               "hi": np.array([stats[s].hi for s in sites])}
    for s in sites:
        tensors[f"res/{s}"] = stats[s].reservoir.values
    container.save(path, STATS_MAGIC, {"sites": sites, **(meta or {})}, tensors)


def load_stats(path) -> dict:
    """Statistics as saved; reservoirs come back frozen (values only)."""
    meta, t = container.load(path, STATS_MAGIC)
    out = {}
    for j, s in enumerate(meta["sites"]):
        r = Reservoir(cap=max(len(t[f"res/{s}"]), 1))
        r.values = t[f"res/{s}"].astype(np.float64)
        r.keys = np.zeros(len(r.values))
        r.seen = len(r.values)
        out[int(s)] = SiteStats(float(t["lo"][j]), float(t["hi"][j]), r)
    return out

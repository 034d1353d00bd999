"""Retrieval quality metrics over ranked results and pose ground truth.

Only queries present in ``gt.positives`` are scored; filtered queries are
ignored by every metric.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NoQueries

DEFAULT_KS = (1, 5, 10, 20)


def _scored(results, gt):
    scored = [r for r in results if r.query_id in gt.positives]
    if not scored:
        raise NoQueries("no query has a ground-truth positive")
    return scored


def _first_hit(r, gt):
    """1-based rank of the first true positive, or 0 if none was returned."""
    hits = np.flatnonzero(np.isin(r.ids, gt.positives[r.query_id]))
    return int(hits[0]) + 1 if len(hits) else 0


def recall_at_k(results, gt, ks=DEFAULT_KS) -> dict:
    ranks = np.array([_first_hit(r, gt) for r in _scored(results, gt)])
    return {k: float(np.mean((ranks > 0) & (ranks <= k))) for k in ks}


def mrr(results, gt) -> float:
    ranks = np.array([_first_hit(r, gt) for r in _scored(results, gt)], dtype=np.float64)
    return float(np.mean(np.where(ranks > 0, 1.0 / np.maximum(ranks, 1), 0.0)))


def top1(results, gt):
    """(distance, correct) arrays of each scored query's best match."""
    scored = _scored(results, gt)
    d = np.array([r.distances[0] for r in scored], dtype=np.float64)
    c = np.array([bool(np.isin(r.ids[0], gt.positives[r.query_id])) for r in scored])
    return d, c


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    max_f1: float
    pr_auc: float


def _pr_counts(d, c, tau):
    accept = d <= tau
    tp = int(np.sum(accept & c))
    fp = int(np.sum(accept & ~c))
    fn = int(np.sum(~accept & c))
    return tp, fp, fn


def pr_curve(results, gt, integration="trapezoid") -> PRCurve:
    """Threshold sweep over the top-1 distances.

    A query is accepted when its top-1 distance is <= the threshold; accepted
    correct matches are TP, accepted wrong ones FP, and rejected correct ones
    FN. Precision of an empty acceptance set is 1.
    """
    d, c = top1(results, gt)
    taus = np.concatenate([[-np.inf], np.unique(d), [np.inf]])
    prec, rec, f1 = [], [], []
    for tau in taus:
        tp, fp, fn = _pr_counts(d, c, tau)
        p = tp / (tp + fp) if tp + fp else 1.0
        r = tp / (tp + fn) if tp + fn else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    prec, rec = np.array(prec), np.array(rec)
    order = np.lexsort((-prec, rec))
    rs, ps = rec[order], prec[order]
    if integration == "trapezoid":
        auc = float(np.sum(np.diff(rs) * (ps[1:] + ps[:-1]) / 2))
    elif integration == "step":
        auc = float(np.sum(np.diff(rs) * ps[1:]))
    else:
        raise ValueError(f"unknown integration {integration!r}")
    return PRCurve(taus, prec, rec, float(max(f1)), auc)


def operating_point(results, gt, tau: float) -> dict:
    """Precision / recall / F1 at one fixed decision threshold."""
    d, c = top1(results, gt)
    tp, fp, fn = _pr_counts(d, c, tau)
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return {"threshold": tau, "precision": p, "recall": r,
            "f1": 2 * p * r / (p + r) if p + r else 0.0}


def distance_distribution(results, gt, bins: int = 20):
    """Histograms of top-1 distances for correct vs incorrect matches over [0, 2].

    Returns (positive_counts, negative_counts, edges).
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    d, c = top1(results, gt)
    edges = np.linspace(0.0, 2.0, bins + 1)
    d = np.clip(d, 0.0, 2.0)
    pos, _ = np.histogram(d[c], edges)
    neg, _ = np.histogram(d[~c], edges)
    return pos, neg, edges


@dataclass
class EvalReport:
    recall_at: dict
    mrr: float
    max_f1: float
    pr_auc: float
    pr_points: list = field(default_factory=list)       # [threshold, precision, recall]
    hist_pos: list = field(default_factory=list)
    hist_neg: list = field(default_factory=list)
    hist_edges: list = field(default_factory=list)
    n_queries: int = 0
    filtered: int = 0
    operating: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)           # model, precision, seed, sequence

    def to_dict(self):
        d = asdict(self)
        d["recall_at"] = {str(k): v for k, v in self.recall_at.items()}
        return d


def evaluate(results, gt, ks=DEFAULT_KS, bins=20, threshold=None, tags=None) -> EvalReport:
    curve = pr_curve(results, gt)
    pos, neg, edges = distance_distribution(results, gt, bins)
    pts = [[float(t), float(p), float(r)]
           for t, p, r in zip(curve.thresholds, curve.precision, curve.recall)]
    return EvalReport(
        recall_at=recall_at_k(results, gt, ks), mrr=mrr(results, gt),
        max_f1=curve.max_f1, pr_auc=curve.pr_auc, pr_points=pts,
        hist_pos=pos.tolist(), hist_neg=neg.tolist(), hist_edges=edges.tolist(),
        n_queries=len(_scored(results, gt)), filtered=len(gt.filtered),
        operating=operating_point(results, gt, threshold) if threshold is not None else {},
        tags=dict(tags or {}))

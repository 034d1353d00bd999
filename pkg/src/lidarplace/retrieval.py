"""Descriptor database, exact k-NN search and pose-based ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import DimensionMismatch, EmptyCandidateSet, NormViolation

MAGIC = b"LPDB"
NORM_TOL = 1e-5


@dataclass(frozen=True)
class FrameMeta:
    id: int
    timestamp: float
    position: tuple
    sequence_tag: str = "seq"

    @classmethod
    def of(cls, frame):
        return cls(int(frame.id), float(frame.timestamp),
                   tuple(float(v) for v in frame.pose.position), frame.sequence_tag)


@dataclass
class DescriptorDB:
    descriptors: np.ndarray
    meta: list

    def __len__(self):
        return len(self.meta)

    @property
    def ids(self):
        return np.array([m.id for m in self.meta], dtype=np.int64)

    @property
    def timestamps(self):
        return np.array([m.timestamp for m in self.meta], dtype=np.float64)

    @property
    def positions(self):
        return np.array([m.position for m in self.meta], dtype=np.float64).reshape(-1, 3)


@dataclass
class QueryResult:
    query_id: int
    ids: np.ndarray          # database ids, best first
    distances: np.ndarray    # non-decreasing L2 distances


@dataclass
class GroundTruth:
    positives: dict                       # query id -> sorted array of database ids
    filtered: list = field(default_factory=list)   # query ids with no positive

    def is_positive(self, qid, dbid):
        pos = self.positives.get(qid)
        return pos is not None and bool(np.isin(dbid, pos))


def build_db(descriptors, metadata) -> DescriptorDB:
    d = np.array(descriptors, dtype=np.float32, copy=True)
    if d.ndim != 2:
        raise DimensionMismatch(f"descriptors must be 2-d, got shape {d.shape}")
    if len(d) != len(metadata):
        raise DimensionMismatch(f"{len(d)} descriptors but {len(metadata)} metadata rows")
    norms = np.linalg.norm(d.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1) > NORM_TOL)
    if len(bad):
        raise NormViolation(int(bad[0]), float(norms[bad[0]]))
    d.setflags(write=False)
    return DescriptorDB(d, list(metadata))


def ground_truth_positives(queries, database, tau_gt=5.0, dt=200.0, same_sequence=None):
    """Positives: spatial distance < tau_gt and, within one sequence, |t_q - t_j| > dt.

    ``same_sequence=None`` decides per pair by comparing sequence tags.
    """
    db_pos = np.array([m.position for m in database], dtype=np.float64).reshape(-1, 3)
    db_t = np.array([m.timestamp for m in database], dtype=np.float64)
    db_tag = np.array([m.sequence_tag for m in database], dtype=object)
    db_ids = np.array([m.id for m in database], dtype=np.int64)
    positives, filtered = {}, []
    for q in queries:
        near = np.linalg.norm(db_pos - np.asarray(q.position), axis=1) < tau_gt
        if same_sequence is None:
            temporal = db_tag == q.sequence_tag
        else:
            temporal = np.full(len(db_ids), bool(same_sequence))
        ok = near & (~temporal | (np.abs(db_t - q.timestamp) > dt))
        if ok.any():
            positives[q.id] = np.sort(db_ids[ok])
        else:
            filtered.append(q.id)
    return GroundTruth(positives, filtered)


def pairwise_distances(db: DescriptorDB, q, method="direct"):
    """L2 distances from one query to every row.

    ``direct`` sums squared differences in float64; ``dot`` uses
    ||a-b||^2 = 2 - 2 a.b, valid for unit vectors only.
    """
    q = np.asarray(q, dtype=np.float64)
    rows = db.descriptors.astype(np.float64)
    if method == "dot":
        return np.sqrt(np.maximum(2.0 - 2.0 * (rows @ q), 0.0))
    return np.sqrt(((rows - q) ** 2).sum(axis=1))


def search_knn(db: DescriptorDB, query, k: int, exclusion=None, query_id=-1) -> QueryResult:
    """Exact top-k by L2 distance, ties broken by lower database id.

    ``exclusion=(t_query, window)`` drops rows with |t_db - t_query| <= window.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query)
    if query.shape != (db.descriptors.shape[1],):
        raise DimensionMismatch(f"query shape {query.shape} vs db dim {db.descriptors.shape[1]}")
    dist = pairwise_distances(db, query)
    ids = db.ids
    keep = np.ones(len(ids), bool)
    if exclusion is not None:
        t_q, window = exclusion
        keep = np.abs(db.timestamps - t_q) > window
    if not keep.any():
        raise EmptyCandidateSet("exclusion window removed every database row")
    cand = np.flatnonzero(keep)
    order = np.lexsort((ids[cand], dist[cand]))[:k]
    sel = cand[order]
    return QueryResult(query_id, ids[sel], dist[sel])


def search_all(db: DescriptorDB, queries, query_meta, k, window=None, same_sequence=None):
    """Run :func:`search_knn` for each query; the window applies only to
    queries sharing the database's sequence tag (or when ``same_sequence``)."""
    tags = {m.sequence_tag for m in db.meta}
    out = []
    for q, m in zip(queries, query_meta):
        intra = (m.sequence_tag in tags) if same_sequence is None else same_sequence
        excl = (m.timestamp, window) if (window is not None and intra) else None
        out.append(search_knn(db, q, k, excl, m.id))
    return out


def save_db(path, db: DescriptorDB, extra_meta=None):
    meta = {"format": "descriptors", "n": len(db), "d": int(db.descriptors.shape[1]),
            "metric": "l2", "frames": [[m.id, m.timestamp, list(m.position), m.sequence_tag]
                                       for m in db.meta], **(extra_meta or {})}
    container.save(path, MAGIC, meta, {"descriptors": db.descriptors})


def load_db(path) -> DescriptorDB:
    meta, tensors = container.load(path, MAGIC)
    frames = [FrameMeta(int(i), float(t), tuple(p), tag) for i, t, p, tag in meta["frames"]]
    return build_db(tensors["descriptors"], frames)

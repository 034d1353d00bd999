"""Report emission: JSON, flat CSV tables and tidy plot data.

JSON cannot carry infinities, so non-finite floats (the +-inf ends of the
PR threshold sweep) are written as the strings ``"inf"``, ``"-inf"`` and
``"nan"`` and restored by :func:`load_reports`.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from ..errors import ReportError
from ..metrics import EvalReport

SCHEMA = "lidarplace.report/1"
FORMATS = ("json", "csv", "plotdata")
TAG_COLUMNS = ("model", "precision", "seed", "sequence")


def metric_values(report: EvalReport) -> dict:
    """Scalar metrics in a stable order."""
    out = {f"recall@{k}": float(v) for k, v in sorted(report.recall_at.items())}
    out["mrr"] = float(report.mrr)
    out["max_f1"] = float(report.max_f1)
    out["pr_auc"] = float(report.pr_auc)
    return out


def aggregate(reports) -> list:
    """Mean and sample standard deviation across seeds per (model, precision, metric)."""
    groups = {}
    for r in reports:
        key = (str(r.tags.get("model", "")), str(r.tags.get("precision", "")))
        groups.setdefault(key, []).append(metric_values(r))
    rows = []
    for (model, precision), vals in sorted(groups.items()):
        for metric in vals[0]:
            xs = np.array([v[metric] for v in vals], dtype=np.float64)
            std = float(xs.std(ddof=1)) if len(xs) > 1 else 0.0
            rows.append({"model": model, "precision": precision, "metric": metric,
                         "mean": float(xs.mean()), "std": std, "n": len(xs)})
    return rows


def _encode(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.generic):
        return _encode(obj.item())
    return obj


def _decode_float(v):
    return float(v) if isinstance(v, str) and v in ("inf", "-inf", "nan") else v


def _sorted_reports(reports):
    return sorted(reports, key=lambda r: tuple(str(r.tags.get(c, "")) for c in TAG_COLUMNS))


def report_document(reports, bench=()) -> dict:
    reports = _sorted_reports(reports)
    return {
        "schema": SCHEMA,
        "reports": [_encode(r.to_dict()) for r in reports],
        "aggregate": aggregate(reports),
        "bench": [_encode(b.to_dict()) for b in bench],
    }


def _write(path: Path, writer):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer(fh)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from None
    return path


def _csv(rows, columns):
    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])
    return write


def _cell(v):
    return repr(v) if isinstance(v, float) else v


def emit_report(reports, bench=(), formats=FORMATS, out=".") -> dict:
    """Write the requested formats under ``out``; returns {name: path}.

    ``json`` -> report.json; ``csv`` -> reports.csv, aggregate.csv, histogram.csv
    (and bench.csv when benchmark rows exist); ``plotdata`` -> plotdata.csv.
    """
    reports = _sorted_reports(list(reports))
    bench = list(bench)
    if not reports and not bench:
        raise ReportError("nothing to report")
    bad = set(formats) - set(FORMATS)
    if bad:
        raise ReportError(f"unknown report format(s) {sorted(bad)}")
    out = Path(out)
    paths = {}
    if "json" in formats:
        doc = report_document(reports, bench)
        paths["json"] = _write(out / "report.json",
                               lambda fh: json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=False))
    if "csv" in formats:
        if reports:
            ks = sorted({k for r in reports for k in r.recall_at})
            metrics = [f"recall@{k}" for k in ks] + ["mrr", "max_f1", "pr_auc"]
            rows = []
            for r in reports:
                row = {c: r.tags.get(c, "") for c in TAG_COLUMNS}
                row.update(n_queries=r.n_queries, filtered=r.filtered, **metric_values(r))
                rows.append(row)
            paths["csv"] = _write(out / "reports.csv",
                                  _csv(rows, list(TAG_COLUMNS) + ["n_queries", "filtered"] + metrics))
            paths["aggregate"] = _write(out / "aggregate.csv", _csv(
                aggregate(reports), ["model", "precision", "metric", "mean", "std", "n"]))
            hist = []
            for r in reports:
                for lo, hi, p, n in zip(r.hist_edges[:-1], r.hist_edges[1:], r.hist_pos, r.hist_neg):
                    hist.append({**{c: r.tags.get(c, "") for c in TAG_COLUMNS},
                                 "bin_lo": float(lo), "bin_hi": float(hi), "positives": p, "negatives": n})
            paths["histogram"] = _write(out / "histogram.csv", _csv(
                hist, list(TAG_COLUMNS) + ["bin_lo", "bin_hi", "positives", "negatives"]))
        if bench:
            cols = list(bench[0].to_dict())
            paths["bench"] = _write(out / "bench.csv", _csv([b.to_dict() for b in bench], cols))
    if "plotdata" in formats:
        rows = []
        for r in reports:
            for metric, value in metric_values(r).items():
                rows.append({"model": r.tags.get("model", ""), "precision": r.tags.get("precision", ""),
                             "metric": metric, "seed": r.tags.get("seed", ""), "value": value})
        for b in bench:
            for metric in ("latency_mean_ms", "latency_p50_ms", "latency_p95_ms", "throughput"):
                rows.append({"model": b.model, "precision": b.precision,
                             "metric": f"{metric}@b{b.batch}", "seed": "", "value": getattr(b, metric)})
        paths["plotdata"] = _write(out / "plotdata.csv",
                                   _csv(rows, ["model", "precision", "metric", "seed", "value"]))
    return paths


def load_reports(path) -> tuple:
    """Read report.json back: (list of EvalReport, list of bench dicts)."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ReportError(f"cannot read {path}: {exc}") from None
    if doc.get("schema") != SCHEMA:
        raise ReportError(f"{path}: unexpected schema {doc.get('schema')!r}")
    reports = []
    for d in doc["reports"]:
        d = dict(d)
        d["recall_at"] = {int(k): v for k, v in d["recall_at"].items()}
        d["pr_points"] = [[_decode_float(v) for v in p] for p in d["pr_points"]]
        d["operating"] = {k: _decode_float(v) for k, v in d["operating"].items()}
        reports.append(EvalReport(**d))
    return reports, doc.get("bench", [])

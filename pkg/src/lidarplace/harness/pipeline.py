"""End-to-end evaluation: frames -> BEV -> (train) -> calibrate -> encode -> retrieve -> metrics."""
from __future__ import annotations

import dataclasses
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import backbone as bb
from .. import quant
from ..bev import rasterize_frames
from ..errors import LidarPlaceError, PipelineError
from ..ingest import frames_from_kitti, generate_synthetic_world, read_manifest
from ..metrics import evaluate, recall_at_k
from ..retrieval import FrameMeta, build_db, ground_truth_positives, search_all
from ..train import load_checkpoint, save_checkpoint, train, write_log
from .config import RunConfig, write_config

log = logging.getLogger(__name__)


@contextmanager
def stage(name):
    """Attach the pipeline stage to any library error raised inside."""
    try:
        yield
    except PipelineError:
        raise
    except LidarPlaceError as exc:
        raise PipelineError(name, exc) from exc


@dataclass
class SeedRun:
    seed: int
    reports: list                     # one EvalReport per precision
    descriptors: dict                 # precision -> (database, queries)
    history: list = field(default_factory=list)
    checkpoint: str = ""


@dataclass
class PipelineResult:
    config: RunConfig
    runs: list

    @property
    def reports(self) -> list:
        return [r for run in self.runs for r in run.reports]


def load_frames(cfg: RunConfig, seed: int) -> list:
    ds = cfg.dataset
    if ds.source == "synth":
        return generate_synthetic_world(ds.synth, seed)
    if ds.source == "manifest":
        return read_manifest(ds.manifest)
    return frames_from_kitti(ds.velodyne_dir, ds.pose_file)


def split_frames(frames, database_size):
    """First ``database_size`` frames form the database, the rest the queries."""
    if not 0 < database_size < len(frames):
        raise PipelineError("split", ValueError(
            f"database_size {database_size} invalid for {len(frames)} frames"))
    return frames[:database_size], frames[database_size:]


def checkpoint_name(preset, seed):
    return f"{preset}_seed{seed}.lpck"


def calibration_indices(n, count):
    return np.unique(np.linspace(0, n - 1, min(count, n)).round().astype(int))


def encode(precision, graph, weights, images, qmodel=None, half=None):
    if precision == "fp32":
        return bb.forward(graph, weights, images)
    if precision == "fp16":
        g16, w16 = half if half is not None else quant.half_weights(graph, weights)
        return quant.forward_fp16(g16, w16, images, prepared=True)
    return quant.forward_int8(qmodel, images)


def _retrieve(cfg, db_desc, q_desc, db_meta, q_meta, gt, tags):
    db = build_db(db_desc, db_meta)
    k = min(max(cfg.eval.ks), len(db))
    results = search_all(db, q_desc, q_meta, k, window=cfg.eval.dt)
    return evaluate(results, gt, ks=cfg.eval.ks, bins=cfg.eval.bins,
                    threshold=cfg.eval.threshold, tags=tags)


def run_seed(cfg: RunConfig, seed: int, out: Path | None = None, progress=None) -> SeedRun:
    """One seed of the pipeline; deterministic given (cfg, seed)."""
    with stage("ingest"):
        frames = load_frames(cfg, seed)
        db_frames, q_frames = split_frames(frames, cfg.dataset.database_size)
    with stage("bev"):
        db_img = rasterize_frames(db_frames, cfg.bev)
        q_img = rasterize_frames(q_frames, cfg.bev)
    db_meta = [FrameMeta.of(f) for f in db_frames]
    q_meta = [FrameMeta.of(f) for f in q_frames]
    gt = ground_truth_positives(q_meta, db_meta, cfg.eval.tau_gt, cfg.eval.dt)
    log.info("seed %d: %d database, %d queries, %d filtered (no true match)",
             seed, len(db_meta), len(q_meta), len(gt.filtered))

    preset = cfg.model.preset
    name = checkpoint_name(preset, seed)
    cached = Path(cfg.model.checkpoint_dir) / name if cfg.model.checkpoint_dir else None
    history = []
    with stage("train"):
        if cached is not None and cached.exists():
            graph, weights, _, _ = load_checkpoint(cached)
            log.info("seed %d: loaded %s", seed, cached)
            ckpt = str(cached)
        else:
            graph = bb.build_preset(preset, cfg.model.descriptor_dim)
            weights = bb.init_weights(graph, seed)
            tcfg = dataclasses.replace(cfg.train, seed=seed)

            def validate(w):
                res = search_all(build_db(bb.forward(graph, w, db_img), db_meta),
                                 bb.forward(graph, w, q_img), q_meta, 1, window=cfg.eval.dt)
                return recall_at_k(res, gt, (1,))[1]

            result = train(graph, weights, db_frames, tcfg, cfg.bev, validate=validate,
                           progress=progress)
            weights, history = result.weights, result.history
            ckpt = ""
            if out is not None:
                out = Path(out)
                out.mkdir(parents=True, exist_ok=True)
                ckpt_dir = Path(cached.parent if cached is not None else out / "checkpoints")
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(ckpt_dir / name, graph, result, tcfg)
                write_log(out / f"train_{preset}_seed{seed}.csv", history)
                ckpt = str(ckpt_dir / name)

    qmodel = half = None
    if "int8" in cfg.precisions:
        with stage("calibrate"):
            fg, fw = bb.fold_batchnorm(graph, weights)
            calib = db_img[calibration_indices(len(db_img), cfg.calibration.images)]
            stats = quant.collect_stats(fg, fw, calib, seed=seed, cap=cfg.calibration.reservoir)
        with stage("quantize"):
            qmodel = quant.quantize_model(fg, fw, stats, per_channel=cfg.calibration.per_channel)
    if "fp16" in cfg.precisions:
        half = quant.half_weights(graph, weights)

    reports, descs = [], {}
    for precision in cfg.precisions:
        with stage(f"encode:{precision}"):
            d_db = encode(precision, graph, weights, db_img, qmodel, half)
            d_q = encode(precision, graph, weights, q_img, qmodel, half)
            descs[precision] = (d_db, d_q)
        with stage(f"eval:{precision}"):
            tags = {"model": preset, "precision": precision, "seed": seed,
                    "sequence": q_meta[0].sequence_tag if q_meta else ""}
            reports.append(_retrieve(cfg, d_db, d_q, db_meta, q_meta, gt, tags))
        log.info("seed %d %s: R@1 %.4f", seed, precision, reports[-1].recall_at[1]
                 if 1 in reports[-1].recall_at else float("nan"))
    if "fp32" in descs:
        ref = np.concatenate(descs["fp32"])
        for r, precision in zip(reports, cfg.precisions):
            if precision != "fp32":
                cos = np.sum(np.concatenate(descs[precision]) * ref, axis=1)
                r.tags["cosine_min"] = float(cos.min())
                r.tags["cosine_mean"] = float(cos.mean())
    return SeedRun(seed, reports, descs, history, ckpt)


def run_eval_pipeline(cfg: RunConfig, out=None, progress=None) -> PipelineResult:
    """Every seed of ``cfg``; echoes the resolved config into ``out`` when given."""
    cfg.validate()
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.ini")
    runs = [run_seed(cfg, seed, out, progress) for seed in cfg.seeds]
    return PipelineResult(cfg, runs)


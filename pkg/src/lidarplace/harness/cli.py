"""Command-line entry point: ``lidarplace <subcommand> --out DIR ...``.

Exit status is 0 on success; library errors exit with their class's code
(see :mod:`lidarplace.errors`), usage errors with 2 and missing files with 3.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .. import backbone as bb
from .. import quant
from ..bev import rasterize_frames
from ..errors import InvalidConfig, LidarPlaceError
from ..ingest import SynthConfig, frames_from_kitti, generate_synthetic_world, read_manifest, write_manifest
from ..retrieval import FrameMeta, build_db, save_db
from ..train import TrainConfig, load_checkpoint, save_checkpoint, train, write_log
from .bench import BenchResult, run_benchmark
from .config import PRECISIONS, RunConfig, load_config
from .pipeline import calibration_indices, checkpoint_name, run_eval_pipeline
from .report import FORMATS, emit_report, load_reports

log = logging.getLogger("lidarplace")

EXIT_USAGE = 2
EXIT_MISSING_FILE = 3


def _csv_list(kind=str):
    def parse(text):
        try:
            return tuple(kind(s.strip()) for s in text.split(",") if s.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def load_data(source: str, frames: int | None = None):
    """``synth:SEED`` for a generated world, otherwise a manifest CSV path."""
    if source.startswith("synth:"):
        try:
            seed = int(source.split(":", 1)[1])
        except ValueError:
            raise InvalidConfig(f"bad synthetic data source {source!r}") from None
        cfg = SynthConfig() if frames is None else SynthConfig(n_frames=frames)
        return generate_synthetic_world(cfg, seed)
    return read_manifest(source)


def _database(frames, size):
    return frames[:size] if size else frames


# -- subcommands ---------------------------------------------------------------------

def cmd_ingest(args, out: Path):
    if args.manifest:
        frames = read_manifest(args.manifest)
    else:
        if not (args.velodyne and args.poses):
            raise InvalidConfig("ingest needs --manifest or both --velodyne and --poses")
        frames = frames_from_kitti(args.velodyne, args.poses, sequence_tag=args.tag)
    write_manifest(out / "manifest.csv", frames)
    print(f"{len(frames)} frames -> {out / 'manifest.csv'}")


def cmd_synth(args, out: Path):
    cfg = SynthConfig(n_frames=args.frames, lap_frames=args.lap)
    frames = generate_synthetic_world(cfg, args.seed)
    write_manifest(out / "manifest.csv", frames)
    print(f"{len(frames)} synthetic frames -> {out / 'manifest.csv'}")


def cmd_train(args, out: Path):
    frames = _database(load_data(args.data, args.frames), args.database_size)
    graph = bb.build_preset(args.preset, args.dim)
    weights = bb.init_weights(graph, args.seed)
    cfg = TrainConfig(learning_rate=args.lr, weight_decay=args.wd, epochs=args.epochs,
                      anchors_per_epoch=args.anchors, seed=args.seed)
    result = train(graph, weights, frames, cfg,
                   progress=lambda h: log.info("epoch %d loss %.4f", h[0], h[1]))
    path = out / checkpoint_name(args.preset, args.seed)
    save_checkpoint(path, graph, result, cfg)
    write_log(out / f"train_{args.preset}_seed{args.seed}.csv", result.history)
    print(f"checkpoint -> {path}")


def cmd_calibrate(args, out: Path):
    graph, weights, _, _ = load_checkpoint(args.checkpoint)
    frames = _database(load_data(args.data, args.frames), args.database_size)
    images = rasterize_frames([frames[i] for i in calibration_indices(len(frames), args.images)])
    fg, fw = bb.fold_batchnorm(graph, weights)
    stats = quant.collect_stats(fg, fw, images, seed=args.seed)
    path = out / "calibration.lpcs"
    quant.save_stats(path, stats, {"graph_hash": fg.graph_hash(), "images": len(images)})
    print(f"{len(stats)} sites -> {path}")


def cmd_quantize(args, out: Path):
    graph, weights, _, _ = load_checkpoint(args.checkpoint)
    fg, fw = bb.fold_batchnorm(graph, weights)
    qm = quant.quantize_model(fg, fw, quant.load_stats(args.stats), per_channel=args.per_channel)
    path = out / "model.lpqm"
    quant.save_quantized(path, qm)
    print(f"int8 model -> {path}")


def cmd_encode(args, out: Path):
    frames = load_data(args.data, args.frames)
    images = rasterize_frames(frames)
    if args.precision == "int8":
        if not args.qmodel:
            raise InvalidConfig("int8 encoding needs --qmodel")
        desc = quant.forward_int8(quant.load_quantized(args.qmodel), images)
    else:
        if not args.checkpoint:
            raise InvalidConfig(f"{args.precision} encoding needs --checkpoint")
        graph, weights, _, _ = load_checkpoint(args.checkpoint)
        desc = (bb.forward(graph, weights, images) if args.precision == "fp32"
                else quant.forward_fp16(graph, weights, images))
    path = out / f"descriptors_{args.precision}.lpdb"
    save_db(path, build_db(desc, [FrameMeta.of(f) for f in frames]), {"precision": args.precision})
    print(f"{len(desc)} descriptors -> {path}")


def cmd_eval(args, out: Path):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.preset:
        cfg.model.preset = args.preset
    if args.seeds:
        cfg.seeds = args.seeds
    if args.precisions:
        cfg.precisions = args.precisions
    if args.epochs:
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    if args.checkpoint_dir:
        cfg.model.checkpoint_dir = args.checkpoint_dir
    cfg.out = str(out)
    result = run_eval_pipeline(cfg, out)
    paths = emit_report(result.reports, formats=FORMATS, out=out)
    for r in result.reports:
        print(f"{r.tags['model']:16s} {r.tags['precision']:5s} seed {r.tags['seed']}: "
              f"R@1 {r.recall_at.get(1, float('nan')):.4f}  MRR {r.mrr:.4f}  AUC {r.pr_auc:.4f}")
    print(f"reports -> {paths['json']}")


def cmd_bench(args, out: Path):
    results = run_benchmark(args.presets, args.precisions, args.batches, args.warmup, args.iterations)
    emit_report([], results, formats=("json", "csv", "plotdata"), out=out)
    for b in results:
        print(f"{b.model:16s} {b.precision:5s} b={b.batch:<3d} mean {b.latency_mean_ms:8.2f} ms  "
              f"p95 {b.latency_p95_ms:8.2f} ms  {b.throughput:8.1f} img/s  {b.memory_mib:.3f} MiB")


def cmd_report(args, out: Path):
    reports, bench_rows = load_reports(args.input)
    bench = [BenchResult(**b) for b in bench_rows]
    paths = emit_report(reports, bench, formats=args.format, out=out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lidarplace", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", default="out", help="output directory (created)")
        sp.set_defaults(func=fn)
        return sp

    def data_args(sp):
        sp.add_argument("--data", default="synth:0", help="manifest CSV or synth:SEED")
        sp.add_argument("--frames", type=int, default=None, help="synthetic frame count")
        sp.add_argument("--database-size", type=int, default=400,
                        help="leading frames treated as the database (0 = all)")

    sp = add("ingest", cmd_ingest, "KITTI scans + poses (or a manifest) -> manifest")
    sp.add_argument("--velodyne")
    sp.add_argument("--poses")
    sp.add_argument("--manifest")
    sp.add_argument("--tag", default="kitti")

    sp = add("synth", cmd_synth, "generate a synthetic loop world")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int, default=600)
    sp.add_argument("--lap", type=int, default=400)

    sp = add("train", cmd_train, "triplet training on the database split")
    data_args(sp)
    sp.add_argument("--preset", default="tiny_resnet", choices=sorted(bb.PRESETS))
    sp.add_argument("--dim", type=int, default=256)
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--wd", type=float, default=1e-4)
    sp.add_argument("--anchors", type=int, default=TrainConfig.anchors_per_epoch)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("calibrate", cmd_calibrate, "activation statistics for INT8")
    data_args(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("quantize", cmd_quantize, "convert a checkpoint to an INT8 model")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--stats", required=True)
    sp.add_argument("--per-channel", action="store_true")

    sp = add("encode", cmd_encode, "descriptors for every frame -> database file")
    data_args(sp)
    sp.add_argument("--precision", choices=PRECISIONS, default="fp32")
    sp.add_argument("--checkpoint")
    sp.add_argument("--qmodel")

    sp = add("eval", cmd_eval, "full pipeline over seeds and precisions")
    sp.add_argument("--config", help="key = value config file")
    sp.add_argument("--preset", choices=sorted(bb.PRESETS))
    sp.add_argument("--seeds", type=_csv_list(int))
    sp.add_argument("--precisions", type=_csv_list())
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--checkpoint-dir")

    sp = add("bench", cmd_bench, "latency / throughput per preset, precision, batch")
    sp.add_argument("--presets", type=_csv_list(), default=tuple(sorted(bb.PRESETS)))
    sp.add_argument("--precisions", type=_csv_list(), default=PRECISIONS)
    sp.add_argument("--batches", type=_csv_list(int), default=(1, 32))
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--iterations", type=int, default=10)

    sp = add("report", cmd_report, "re-emit a saved report.json in other formats")
    sp.add_argument("--input", required=True)
    sp.add_argument("--format", type=_csv_list(), default=FORMATS)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        args.func(args, out)
    except LidarPlaceError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())

import csv
import json
import time

import numpy as np
import pytest

from lidarplace.errors import InvalidConfig, PipelineError, ReportError
from lidarplace.harness import (BenchResult, RunConfig, aggregate, benchmark_callable, emit_report,
                                format_config, load_reports, parse_config, run_benchmark,
                                run_eval_pipeline, time_call)
from lidarplace.harness.bench import summarize
from lidarplace.harness.pipeline import split_frames
from lidarplace.metrics import EvalReport

SMALL = """
[run]
precisions = fp32, fp16, int8
seeds = 0
[dataset]
database_size = 100
[synth]
n_frames = 130
lap_frames = 100
n_landmarks = 250
[model]
preset = tiny_shufflenet
descriptor_dim = 32
[train]
epochs = 1
anchors_per_epoch = 16
[calibration]
images = 8
[eval]
dt = 50
"""


def small_config():
    return parse_config(SMALL)


# -- config ------------------------------------------------------------------------------

def test_config_defaults():
    cfg = RunConfig().validate()
    assert cfg.seeds == (0, 1, 2) and cfg.precisions == ("fp32", "fp16", "int8")
    assert cfg.train.learning_rate == 1e-3 and cfg.train.weight_decay == 1e-4 and cfg.train.epochs == 50
    assert cfg.bev.width == 256 and cfg.eval.dt == 200 and cfg.dataset.database_size == 400


def test_config_round_trip():
    cfg = small_config()
    assert cfg.dataset.synth.n_frames == 130 and cfg.model.descriptor_dim == 32 and cfg.eval.dt == 50.0
    text = format_config(cfg)
    again = parse_config(text)
    assert format_config(again) == text and again == cfg


@pytest.mark.parametrize("text", [
    "[nope]\nx = 1", "[train]\nlearning_rat = 1", "[train]\nepochs = many", "[run]\nprecisions = fp8",
    "[run]\nseeds =", "[train]\ntau_p = 20", "[bev]\nz_min = 9", "[dataset]\ndatabase_size = 600",
    "[calibration]\nper_channel = maybe", "not a config"])
def test_config_errors(text):
    with pytest.raises(InvalidConfig):
        parse_config(text)


# -- reports --------------------------------------------------------------------------------

def fake_report(seed, r1, model="m", precision="fp32"):
    return EvalReport(recall_at={1: r1, 5: 1.0}, mrr=r1, max_f1=0.5, pr_auc=0.25,
                      pr_points=[[-np.inf, 1.0, 0.0], [0.3, 0.5, 1.0], [np.inf, 0.5, 1.0]],
                      hist_pos=[1, 0], hist_neg=[0, 1], hist_edges=[0.0, 1.0, 2.0], n_queries=2,
                      tags={"model": model, "precision": precision, "seed": seed, "sequence": "s"})


def test_aggregate_sample_std():
    reps = [fake_report(s, v) for s, v in enumerate([0.5, 0.7, 0.9])]
    row = next(r for r in aggregate(reps) if r["metric"] == "recall@1")
    mean = (0.5 + 0.7 + 0.9) / 3
    hand = ((0.5 - mean) ** 2 + (0.7 - mean) ** 2 + (0.9 - mean) ** 2) / 2
    assert row["mean"] == pytest.approx(mean) and row["std"] == pytest.approx(hand ** 0.5) and row["n"] == 3
    assert next(r for r in aggregate(reps[:1]) if r["metric"] == "mrr")["std"] == 0.0


def test_emit_report_files(tmp_path):
    reps = [fake_report(s, v) for s, v in enumerate([0.5, 0.7, 0.9])]
    bench = [BenchResult("m", "fp32", 1, 5.0, 5.0, 6.0, 200.0, 10, 0.1, 10, "numpy")]
    paths = emit_report(reps, bench, out=tmp_path)
    assert set(paths) == {"json", "csv", "aggregate", "histogram", "bench", "plotdata"}
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["schema"] == "lidarplace.report/1" and len(doc["reports"]) == 3
    assert doc["reports"][0]["pr_points"][0][0] == "-inf"
    with (tmp_path / "plotdata.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["model", "precision", "metric", "seed", "value"]
    assert any(r["metric"] == "latency_mean_ms@b1" for r in rows)
    back, bench_rows = load_reports(tmp_path / "report.json")
    assert back[0].pr_points[0][0] == -np.inf and back[0].recall_at[1] == 0.5
    assert bench_rows[0]["throughput"] == 200.0


def test_emit_report_errors(tmp_path):
    with pytest.raises(ReportError):
        emit_report([], out=tmp_path)
    with pytest.raises(ReportError):
        emit_report([fake_report(0, 1.0)], formats=("xml",), out=tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(ReportError):
        emit_report([fake_report(0, 1.0)], out=blocker / "sub")
    with pytest.raises(ReportError):
        load_reports(tmp_path / "missing.json")


def test_emit_report_stable(tmp_path):
    reps = [fake_report(s, 0.5 + s / 10) for s in range(3)]
    emit_report(reps, out=tmp_path / "a")
    emit_report(list(reversed(reps)), out=tmp_path / "b")
    for name in ("report.json", "reports.csv", "aggregate.csv", "plotdata.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# -- benchmark ---------------------------------------------------------------------------------

def busy_wait(ms):
    def fn(_):
        end = time.perf_counter() + ms / 1e3
        while time.perf_counter() < end:
            pass
    return fn


def test_stub_latency():
    r = benchmark_callable(busy_wait(5), "stub", "fp32", 1, iterations=20, shape=(1, 2, 2))
    assert 5.0 <= r.latency_mean_ms <= 7.0
    assert r.latency_p50_ms <= r.latency_p95_ms


@pytest.mark.parametrize("batch", [1, 32])
def test_throughput_consistency(batch):
    r = benchmark_callable(busy_wait(2), "stub", "int8", batch, iterations=10, shape=(1, 2, 2))
    assert abs(r.throughput - batch * 1000 / r.latency_mean_ms) / r.throughput <= 0.05


def test_timing_preconditions():
    with pytest.raises(ValueError):
        time_call(lambda x: None, None, warmup=1, iterations=9)
    with pytest.raises(ValueError):
        time_call(lambda x: None, None, warmup=0, iterations=10)
    r = summarize("m", "fp16", 4, [0.001] * 10, params=1_000_000)
    assert r.throughput == pytest.approx(4000) and r.memory_mib == pytest.approx(2e6 / 2 ** 20)


def test_run_benchmark_presets():
    res = run_benchmark(["tiny_shufflenet"], ("fp32", "int8"), batches=(1,), warmup=1, iterations=10)
    assert [(r.model, r.precision, r.batch) for r in res] == [("tiny_shufflenet", "fp32", 1),
                                                              ("tiny_shufflenet", "int8", 1)]
    for r in res:
        assert r.latency_mean_ms > 0 and r.params == 65_704 and r.iterations == 10
        assert abs(r.throughput - r.batch * 1000 / r.latency_mean_ms) / r.throughput <= 0.05


# -- pipeline ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    return run_eval_pipeline(small_config(), out), out


def test_pipeline_complete(pipeline):
    result, out = pipeline
    reps = result.reports
    assert [r.tags["precision"] for r in reps] == ["fp32", "fp16", "int8"]
    for r in reps:
        assert set(r.recall_at) == {1, 5, 10, 20} and r.n_queries > 0
        assert r.filtered + r.n_queries == 30 and r.operating["threshold"] == 5.0
    assert (out / "config.ini").exists() and (out / "train_tiny_shufflenet_seed0.csv").exists()
    assert (out / "checkpoints" / "tiny_shufflenet_seed0.lpck").exists()
    assert parse_config((out / "config.ini").read_text()) == small_config()


def test_pipeline_fp16_cosine(pipeline):
    result, _ = pipeline
    run = result.runs[0]
    ref = np.concatenate(run.descriptors["fp32"]).astype(np.float64)
    half = np.concatenate(run.descriptors["fp16"])
    assert np.min(np.sum(ref * half, axis=1)) >= 0.999
    assert run.reports[1].tags["cosine_min"] >= 0.999


def test_pipeline_checkpoint_reuse(pipeline, tmp_path):
    result, out = pipeline
    cfg = small_config()
    cfg.model.checkpoint_dir = str(out / "checkpoints")
    cfg.precisions = ("int8",)
    again = run_eval_pipeline(cfg, tmp_path)
    assert again.runs[0].history == []
    a, b = again.reports[0].to_dict(), result.reports[2].to_dict()
    assert {k: v for k, v in b.pop("tags").items() if not k.startswith("cosine")} == a.pop("tags")
    assert a == b


def test_pipeline_stage_errors(tmp_path):
    cfg = small_config()
    cfg.dataset.source = "manifest"
    cfg.dataset.manifest = str(tmp_path / "missing.csv")
    with pytest.raises((PipelineError, FileNotFoundError)):
        run_eval_pipeline(cfg, tmp_path)


def test_split_frames():
    db, q = split_frames(list(range(10)), 6)
    assert db == list(range(6)) and q == [6, 7, 8, 9]
    for bad in (0, 10, 11):
        with pytest.raises(PipelineError):
            split_frames(list(range(10)), bad)

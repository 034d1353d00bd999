"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (printed at the end of the session).
Criteria 6-8 need trained tiny_resnet / tiny_mobilenet checkpoints for three
seeds. They are looked up in ``$LIDARPLACE_ACCEPT_CACHE`` (default
``<repo>/.acceptance_cache``) and trained there by the pipeline when missing,
which takes hours on one CPU core. A cached checkpoint is only reused when its
stored training config and graph hash match the run exactly.
Set ``LIDARPLACE_WAIVE_SOFT_GATE=1`` to waive a criterion 8 violation.
"""
import dataclasses
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from lidarplace import backbone as bb
from lidarplace import kernels, quant
from lidarplace.backbone import ops
from lidarplace.harness import RunConfig, emit_report, parse_config, run_benchmark, run_eval_pipeline
from lidarplace.harness.bench import benchmark_callable, sample_inputs
from lidarplace.harness.pipeline import checkpoint_name
from lidarplace.metrics import evaluate
from lidarplace.quant import QuantParams
from lidarplace.retrieval import FrameMeta, GroundTruth, QueryResult, build_db, search_knn
from lidarplace.train import load_checkpoint

import gradcheck
from oracles import naive_conv2d, naive_knn, naive_metrics

CACHE = Path(os.environ.get("LIDARPLACE_ACCEPT_CACHE", Path(__file__).resolve().parents[1] / ".acceptance_cache"))
SEEDS = (0, 1, 2)


# -- 1 ----------------------------------------------------------------------------------

def test_c01_memory_arithmetic(verdict):
    table = {11.69e6: (44.59, 11.15), 2.28e6: (8.69, 2.17), 3.93e6: (15.00, 3.75)}
    worst = 0.0
    for params, (fp32, int8) in table.items():
        for precision, want in (("fp32", fp32), ("int8", int8)):
            worst = max(worst, abs(bb.memory_footprint(params, precision) - want) / want)
    assert verdict(1, "memory arithmetic", worst <= 0.005, f"worst relative error {worst:.2e} (tol 5e-3)")


# -- 2 ----------------------------------------------------------------------------------

def test_c02_quantization_round_trip(verdict):
    rng = np.random.default_rng(2)
    t0, bad, total = time.perf_counter(), 0, 0
    for _ in range(100):
        s = float(10 ** rng.uniform(-4, 1))
        z = int(rng.integers(-128, 128))
        x = rng.uniform(s * (-128 - z), s * (127 - z), 10_000)
        p = QuantParams(s, z)
        err = np.abs(x - quant.dequantize(quant.quantize(x, p), p))
        bad += int(np.sum(err > s / 2))
        total += x.size
    dt = time.perf_counter() - t0
    assert verdict(2, "quantization round trip", bad == 0 and dt < 5,
                   f"{bad}/{total} values exceed s/2, {dt:.2f} s")


# -- 3 ----------------------------------------------------------------------------------

def _distribution(name, rng, n=4096):
    return {"uniform": lambda: rng.uniform(-2, 5, n),
            "normal": lambda: rng.normal(1, 2, n),
            "bimodal": lambda: np.concatenate([rng.normal(-3, 0.3, n // 2), rng.normal(4, 0.5, n - n // 2)]),
            "heavy_tail": lambda: rng.standard_cauchy(n)}[name]()


def test_c03_mse_calibration_dominance(verdict):
    t0, wins, cases = time.perf_counter(), 0, 0
    for name in ("uniform", "normal", "bimodal", "heavy_tail"):
        for seed in range(20):
            x = _distribution(name, np.random.default_rng([3, seed]))
            ours = quant.quant_mse(x, quant.calibrate_mse(x))
            wins += ours <= quant.quant_mse(x, quant.minmax_params(x.min(), x.max()))
            cases += 1
    dt = time.perf_counter() - t0
    assert verdict(3, "MSE calibration dominance", wins == cases and dt < 30,
                   f"{wins}/{cases} cases, {dt:.1f} s")


# -- 4 ----------------------------------------------------------------------------------

def test_c04_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst = {case: max(gradcheck.check_case(case, seed, probes=10) for seed in range(10))
             for case in gradcheck.CASES}
    dt = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    assert verdict(4, "gradient correctness", max(worst.values()) < gradcheck.TOL and dt < 120,
                   f"{len(worst)} layer types x 10 seeds, worst {top} {worst[top]:.2e}, {dt:.1f} s")


# -- 5 ----------------------------------------------------------------------------------

def _conv_errors():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        groups = int(rng.choice([1, 2, 4]))
        depthwise = rng.random() < 0.3
        c_in = int(rng.integers(1, 4)) * groups
        c_out = c_in if depthwise else int(rng.integers(1, 4)) * groups
        if depthwise:
            groups = c_in
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        h, w = int(rng.integers(k, 12)), int(rng.integers(k, 12))
        x = rng.normal(size=(int(rng.integers(1, 3)), c_in, h, w)).astype(np.float32)
        wt = rng.normal(size=(c_out, c_in // groups, k, k)).astype(np.float32)
        b = rng.normal(size=c_out).astype(np.float32) if rng.random() < 0.5 else None
        got = ops.conv2d(x, wt, b, stride, pad, groups)
        want = naive_conv2d(x, wt, b, stride, pad, groups)
        worst = max(worst, float(np.abs(got - want).max()))
    return worst


def _knn_mismatches():
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng([51, seed])
        n, d, k = int(rng.integers(1, 80)), int(rng.integers(2, 32)), int(rng.integers(1, 20))
        v = rng.normal(size=(n, d))
        v = (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32)
        times = rng.integers(0, 100, n).astype(float)
        db = build_db(v, [FrameMeta(i, t, (0.0, 0.0, 0.0)) for i, t in enumerate(times)])
        q = v[int(rng.integers(n))]
        window = None if seed % 2 else float(rng.integers(0, 10))
        t_q = float(rng.integers(0, 100))
        oracle = naive_knn(v, range(n), times, q, k, t_q, window)
        if not oracle:
            continue
        got = search_knn(db, q, k, None if window is None else (t_q, window))
        bad += got.ids.tolist() != [i for _, i in oracle]
    return bad


def _metric_mismatches():
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng([52, seed])
        rows, pos = [], []
        for _ in range(int(rng.integers(1, 51))):
            k = int(rng.integers(1, 25))
            rows.append((rng.permutation(60)[:k].tolist(), np.sort(np.round(rng.uniform(0, 2, k), 2)).tolist()))
            pos.append(set(rng.choice(60, int(rng.integers(0, 6)), replace=False).tolist()))
        if not any(pos):
            pos[0] = {rows[0][0][0]}
        res = [QueryResult(q, np.array(i), np.array(d)) for q, (i, d) in enumerate(rows)]
        gt = GroundTruth({q: np.array(sorted(p)) for q, p in enumerate(pos) if p},
                         [q for q, p in enumerate(pos) if not p])
        rep = evaluate(res, gt)
        recall, m, f1, auc = naive_metrics(rows, pos)
        got = [rep.recall_at[k] for k in sorted(recall)] + [rep.mrr, rep.max_f1, rep.pr_auc]
        want = [recall[k] for k in sorted(recall)] + [m, f1, auc]
        bad += not np.allclose(got, want, rtol=0, atol=1e-12)
    return bad


def test_c05_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    conv, knn, met = _conv_errors(), _knn_mismatches(), _metric_mismatches()
    dt = time.perf_counter() - t0
    ok = conv <= 1e-5 and knn == 0 and met == 0 and dt < 60
    assert verdict(5, "oracle equivalence", ok,
                   f"conv max |diff| {conv:.1e} on 50 shapes, knn {knn}/100 mismatches, "
                   f"metrics {met}/100 mismatches, {dt:.1f} s")


# -- 6, 7, 8 ----------------------------------------------------------------------------

def _benchmark_config(preset, precisions):
    cfg = RunConfig()
    cfg.model.preset = preset
    cfg.model.checkpoint_dir = str(CACHE)
    cfg.precisions = precisions
    cfg.seeds = SEEDS
    return cfg.validate()


def _check_cache(cfg):
    """A cached checkpoint must come from exactly this training setup."""
    want_hash = bb.build_preset(cfg.model.preset, cfg.model.descriptor_dim).graph_hash()
    for seed in cfg.seeds:
        path = CACHE / checkpoint_name(cfg.model.preset, seed)
        if path.exists():
            graph, _, _, tcfg = load_checkpoint(path)
            assert graph.graph_hash() == want_hash, f"stale cached graph {path}"
            assert tcfg == dataclasses.replace(cfg.train, seed=seed), f"stale cached training config {path}"


@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    runs = {}
    for preset, precisions in (("tiny_resnet", ("fp32", "fp16", "int8")), ("tiny_mobilenet", ("fp32", "int8"))):
        cfg = _benchmark_config(preset, precisions)
        _check_cache(cfg)
        out = tmp_path_factory.mktemp(preset)
        runs[preset] = run_eval_pipeline(cfg, out)
        emit_report(runs[preset].reports, out=out)
    return runs


def _r1(run, precision):
    return [r.recall_at[1] for r in run.reports if r.tags["precision"] == precision]


def test_c06_end_to_end_recall(verdict, benchmark_runs):
    r1 = _r1(benchmark_runs["tiny_resnet"], "fp32")
    passing = sum(v >= 0.8 for v in r1)
    assert verdict(6, "tiny_resnet FP32 Recall@1", passing >= 2,
                   f"R@1 per seed {[round(v, 4) for v in r1]}, {passing}/3 >= 0.8")


def test_c07_fp16_matches_fp32(verdict, benchmark_runs):
    run = benchmark_runs["tiny_resnet"]
    cos_min = min(r.tags["cosine_min"] for r in run.reports if r.tags["precision"] == "fp16")
    gaps = [abs(a - b) for a, b in zip(_r1(run, "fp16"), _r1(run, "fp32"))]
    assert verdict(7, "FP16 matches FP32", cos_min >= 0.999 and max(gaps) <= 0.02,
                   f"min cosine {cos_min:.6f}, max |dR@1| {max(gaps):.4f}")


def test_c08_int8_sensitivity(verdict, benchmark_runs):
    drops = {p: float(np.median(np.subtract(_r1(run, "fp32"), _r1(run, "int8"))))
             for p, run in benchmark_runs.items()}
    ok = drops["tiny_mobilenet"] >= drops["tiny_resnet"] and drops["tiny_resnet"] <= 0.05
    detail = f"median INT8 R@1 drop: mobilenet {drops['tiny_mobilenet']:.4f}, resnet {drops['tiny_resnet']:.4f}"
    if not ok and os.environ.get("LIDARPLACE_WAIVE_SOFT_GATE") == "1":
        verdict(8, "INT8 directional sensitivity (soft gate, WAIVED)", False, detail)
        pytest.xfail("soft gate waived: " + detail)
    assert verdict(8, "INT8 directional sensitivity (soft gate)", ok, detail)


# -- 9 ----------------------------------------------------------------------------------

# integer trace digests from a reference machine; a change here means the INT8
# arithmetic is no longer reproducible across hosts
REFERENCE_DIGESTS = {
    "tiny_mobilenet": "8be31652a1387186384890bbab29f0923470eaaf2884fdbfa91fa89d1d1e15d5",
    "tiny_resnet": "c43329560146f142d307a95c4406e68ab18550324925069bb5472d375c343c44",
}

DIGEST_SCRIPT = """
import sys
from lidarplace import backbone as bb, quant
from lidarplace.harness.bench import sample_inputs
g = bb.build_preset(sys.argv[1]); w = bb.init_weights(g, 7)
fg, fw = bb.fold_batchnorm(g, w)
qm = quant.quantize_model(fg, fw, quant.collect_stats(fg, fw, sample_inputs(8, g.input_shape, seed=11), seed=7))
print(quant.trace_digest(qm, sample_inputs(4, g.input_shape, seed=12)))
"""


def test_c09_int8_bit_exact(verdict):
    seen = {}
    for preset in REFERENCE_DIGESTS:
        g = bb.build_preset(preset)
        fg, fw = bb.fold_batchnorm(g, bb.init_weights(g, 7))
        qm = quant.quantize_model(fg, fw, quant.collect_stats(fg, fw, sample_inputs(8, g.input_shape, seed=11),
                                                              seed=7))
        x = sample_inputs(4, g.input_shape, seed=12)
        digests = set()
        for name in kernels.backends():
            with kernels.use_backend(name):
                digests.add(quant.trace_digest(qm, x))
                digests.add(quant.trace_digest(qm, x))
        fresh = subprocess.run([sys.executable, "-c", DIGEST_SCRIPT, preset], capture_output=True,
                               text=True, check=True).stdout.strip()
        digests.add(fresh)
        seen[preset] = digests
    ok = all(d == {REFERENCE_DIGESTS[p]} for p, d in seen.items())
    assert verdict(9, "INT8 bit-exactness", ok,
                   f"backends {sorted(kernels.backends())} x 2 runs + fresh process, "
                   f"distinct digests per preset {[len(d) for d in seen.values()]}, "
                   f"reference match {ok}")


# -- 10 ---------------------------------------------------------------------------------

SMALL = """
[run]
precisions = fp32, fp16, int8
seeds = 0, 1
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


def test_c10_determinism_and_bench(verdict, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        emit_report(run_eval_pipeline(parse_config(SMALL), out).reports, out=out)
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir() if p.is_file())
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    seeds = sorted({r["tags"]["seed"] for r in json.loads((outs[0] / "report.json").read_text())["reports"]})

    def busy(_):
        end = time.perf_counter() + 0.005
        while time.perf_counter() < end:
            pass

    bench = [benchmark_callable(busy, "stub", "fp32", b, iterations=20, shape=(1, 2, 2)) for b in (1, 32)]
    bench += run_benchmark(sorted(bb.PRESETS), ("fp32", "fp16", "int8"), batches=(1,), warmup=1, iterations=10)
    rel = max(abs(r.throughput - r.batch * 1000 / r.latency_mean_ms) / r.throughput for r in bench)
    ok = same and seeds == [0, 1] and rel <= 0.05
    assert verdict(10, "determinism and benchmark consistency", ok,
                   f"{len(files)} report files byte-identical={same}, "
                   f"throughput vs batch/latency worst {rel:.2e} over {len(bench)} rows")

"""Latency and throughput of the descriptor encoders.

Timing wraps the complete encoder call, including input quantization (INT8)
or binary16 conversion (FP16), with ``time.perf_counter``. Throughput is
``batch * iterations / sum(latencies)``, so it is consistent with the mean
latency by construction.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .. import backbone as bb
from .. import kernels, quant

BATCHES = (1, 32)


@dataclass
class BenchResult:
    model: str
    precision: str
    batch: int
    latency_mean_ms: float
    latency_p50_ms: float
    latency_p95_ms: float
    throughput: float          # images per second
    params: int
    memory_mib: float
    iterations: int
    backend: str = ""

    def to_dict(self):
        return asdict(self)


def sample_inputs(batch, shape=(3, 256, 256), density=0.03, seed=0):
    """Sparse BEV-like images in [0, 1]; identical across precisions for a seed."""
    rng = np.random.default_rng([seed, batch])
    x = rng.random((batch,) + tuple(shape), dtype=np.float32)
    x *= rng.random(x.shape, dtype=np.float32) < density
    return x


def time_call(fn, x, warmup: int, iterations: int) -> np.ndarray:
    """Per-iteration wall times in seconds after ``warmup`` discarded calls."""
    if iterations < 10 or warmup < 1:
        raise ValueError("need iterations >= 10 and warmup >= 1")
    for _ in range(warmup):
        fn(x)
    times = np.empty(iterations)
    for i in range(iterations):
        t0 = time.perf_counter()
        fn(x)
        times[i] = time.perf_counter() - t0
    return times


def summarize(model, precision, batch, times, params, backend="") -> BenchResult:
    ms = np.asarray(times) * 1e3
    return BenchResult(
        model=model, precision=precision, batch=batch,
        latency_mean_ms=float(ms.mean()),
        latency_p50_ms=float(np.percentile(ms, 50)),
        latency_p95_ms=float(np.percentile(ms, 95)),
        throughput=float(batch * len(ms) / (ms.sum() / 1e3)),
        params=int(params), memory_mib=bb.memory_footprint(params, precision),
        iterations=len(ms), backend=backend)


def benchmark_callable(fn, model, precision, batch, params=0, warmup=2, iterations=10,
                       shape=(3, 256, 256)) -> BenchResult:
    x = sample_inputs(batch, shape)
    return summarize(model, precision, batch, time_call(fn, x, warmup, iterations), params)


def make_encoders(graph, weights, precisions, calib_images=8, seed=0) -> dict:
    """precision -> callable(batch) computing unit-norm descriptors."""
    out = {}
    if "fp32" in precisions:
        out["fp32"] = lambda x: bb.forward(graph, weights, x)
    if "fp16" in precisions:
        g16, w16 = quant.half_weights(graph, weights)
        out["fp16"] = lambda x: quant.forward_fp16(g16, w16, x, prepared=True)
    if "int8" in precisions:
        fg, fw = bb.fold_batchnorm(graph, weights)
        stats = quant.collect_stats(fg, fw, sample_inputs(calib_images, graph.input_shape, seed=seed + 1),
                                    seed=seed)
        qm = quant.quantize_model(fg, fw, stats)
        out["int8"] = lambda x: quant.forward_int8(qm, x)
    return out


def run_benchmark(models, precisions=("fp32", "fp16", "int8"), batches=BATCHES, warmup=2,
                  iterations=10, seed=0) -> list:
    """Time every (model, precision, batch).

    ``models`` holds preset names or ``(name, graph, weights)`` triples;
    presets get seeded random weights (timing does not depend on training).
    """
    results = []
    for m in models:
        if isinstance(m, str):
            graph = bb.build_preset(m)
            name, weights = m, bb.init_weights(graph, seed)
        else:
            name, graph, weights = m
        params = graph.param_count()
        encoders = make_encoders(graph, weights, precisions, seed=seed)
        for precision in precisions:
            fn = encoders[precision]
            for batch in batches:
                x = sample_inputs(batch, graph.input_shape, seed=seed)
                times = time_call(fn, x, warmup, iterations)
                backend = kernels.BACKEND if precision == "int8" else "numpy"
                results.append(summarize(name, precision, batch, times, params, backend))
    return results

"""Compiled vs numpy integer kernels, per kernel and for a full INT8 forward pass.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes follow the tiny presets at 256x256 input. Both backends are checked
for bit-identical output before timing.
"""
import argparse
import json
import time

import numpy as np

from lidarplace import backbone as bb
from lidarplace import kernels, quant
from lidarplace.harness.bench import sample_inputs


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), float(np.median(times))


def kernel_cases(rng):
    a = rng.integers(-255, 256, (8 * 64 * 64, 48), dtype=np.int16)
    w = rng.integers(-127, 128, (16, 48), dtype=np.int8)
    b = rng.integers(-5000, 5000, 16, dtype=np.int32)
    x = rng.integers(-255, 256, (8, 32, 66, 66), dtype=np.int16)
    wd = rng.integers(-127, 128, (32, 3, 3), dtype=np.int8)
    bd = rng.integers(-5000, 5000, 32, dtype=np.int32)
    acc = rng.integers(-2 ** 20, 2 ** 20, (8, 32, 64 * 64), dtype=np.int32)
    mant = rng.integers(2 ** 30, 2 ** 31, 32).astype(np.int64)
    shift = rng.integers(36, 44, 32).astype(np.int64)
    u = rng.integers(-255, 256, 8 * 32 * 64 * 64, dtype=np.int16)
    v = rng.integers(-255, 256, 8 * 32 * 64 * 64, dtype=np.int16)
    return {
        "qgemm_acc 32768x48x16": lambda k: k.qgemm_acc(a, w, b),
        "qdepthwise_acc 8x32x64x64 k3": lambda k: k.qdepthwise_acc(x, wd, bd, 1, 64, 64),
        "requant 8x32x4096": lambda k: k.requant(acc, mant, shift, -3),
        "qadd 1M": lambda k: k.qadd(u, v, 1 << 29, 3 << 28, 31, 5),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args(argv)

    avail = kernels.backends()
    rows = []
    rng = np.random.default_rng(0)
    for name, case in kernel_cases(rng).items():
        outs = {b: case(m) for b, m in avail.items()}
        ref = outs["python"]
        same = all(np.array_equal(o, ref) for o in outs.values())
        for b, m in avail.items():
            best, med = best_of(lambda: case(m), args.repeat)
            rows.append({"case": name, "backend": b, "best_ms": best * 1e3, "median_ms": med * 1e3,
                         "identical": same})

    x = sample_inputs(8)
    for preset in sorted(bb.PRESETS):
        g = bb.build_preset(preset)
        fg, fw = bb.fold_batchnorm(g, bb.init_weights(g, 0))
        qm = quant.quantize_model(fg, fw, quant.collect_stats(fg, fw, sample_inputs(4, seed=1)))
        digests = {}
        for b in avail:
            with kernels.use_backend(b):
                digests[b] = quant.trace_digest(qm, x)
                best, med = best_of(lambda: quant.forward_int8(qm, x), max(args.repeat // 4, 3))
            rows.append({"case": f"forward_int8 {preset} b8", "backend": b, "best_ms": best * 1e3,
                         "median_ms": med * 1e3, "identical": len(set(digests.values())) == 1})

    width = max(len(r["case"]) for r in rows)
    print(f"{'case':{width}s}  backend  best ms   median ms  identical")
    for r in rows:
        print(f"{r['case']:{width}s}  {r['backend']:7s} {r['best_ms']:8.2f}  {r['median_ms']:9.2f}  {r['identical']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()

"""Compare the compiled kernels against the numpy fallback.

Times each kernel on both backends at a few sizes and reports the speedup,
plus an end-to-end prefill on the toy profile. Run with ``python3
benchmarks/bench_kernels.py [--quick] [--csv out.csv]``.
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from blockattn import _kernels_py, tensor
from blockattn.engine import bench_layout, prefill_block, prefill_vanilla
from blockattn.kvcache import KVCache
from blockattn.model import init_weights, profile


def _cases(quick):
    rng = np.random.default_rng(0)
    f = lambda *s: rng.standard_normal(s).astype(np.float32)  # noqa: E731
    sizes = [(64, 256, 256), (512, 256, 688)] if quick else [(64, 256, 256), (512, 256, 688),
                                                             (2048, 256, 688)]
    for m, k, n in sizes:
        a, b = f(m, k), f(k, n)
        yield f"matmul {m}x{k}x{n}", lambda mod, a=a, b=b: mod.matmul(a, b)
    x = f(512, 2048)
    yield "softmax 512x2048", lambda mod: mod.softmax_rows(x, 0.5)
    h = f(2048, 256)
    g = np.ones(256, np.float32)
    yield "rms_norm 2048x256", lambda mod: mod.rms_norm(h, g, 1e-5)
    yield "silu 2048x688", lambda mod, y=f(2048, 688): mod.silu(y)
    xr = f(2048, 8, 32)
    ang = np.arange(2048)[:, None] * 10000.0 ** (-np.arange(16) / 16)
    c, s = np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)
    yield "rope 2048x8x32", lambda mod: mod.rope_rotate(xr, c, s, False)
    for nq, nk in ([50, 2048], [512, 512]) if quick else ([50, 2048], [50, 8192], [1024, 1024]):
        q, k, v = f(nq, 8, 32), f(nk, 2, 32), f(nk, 2, 32)
        allowed = np.ones((nq, nk), np.uint8)
        allowed[:, nk - nq:] = np.tri(nq, dtype=np.uint8)
        yield (f"attention {nq}x{nk}",
               lambda mod, q=q, k=k, v=v, al=allowed: mod.attention(q, k, v, al, 32 ** -0.5))


def _best(fn, number):
    return min(timeit.repeat(fn, number=number, repeat=5)) / number


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--quick", action="store_true")
    p.add_argument("--csv", help="also write results here")
    args = p.parse_args(argv)
    if "compiled" not in tensor.available_backends():
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1
    compiled = tensor.kernels() if tensor.backend() == "compiled" else None
    if compiled is None:
        tensor.set_backend("compiled")
        compiled = tensor.kernels()

    rows = []
    for name, fn in _cases(args.quick):
        t_c = _best(lambda: fn(compiled), 3)
        t_p = _best(lambda: fn(_kernels_py), 3)
        rows.append((name, t_c, t_p))

    w = init_weights(profile("toy"), 0)
    for n in (512,) if args.quick else (512, 2048):
        layout = bench_layout(n)
        timings = {}
        for be in tensor.BACKENDS:
            tensor.set_backend(be)
            cache = KVCache.for_weights(w, 1 << 32)
            prefill_block(layout, cache, w)
            timings[be] = (_best(lambda: prefill_vanilla(layout, w), 1),
                           _best(lambda: prefill_block(layout, cache, w), 1))
        rows.append((f"prefill vanilla n={n}", timings["compiled"][0], timings["python"][0]))
        rows.append((f"prefill block n={n}", timings["compiled"][1], timings["python"][1]))
    tensor.set_backend("auto")

    print(f"{'kernel':28s} {'compiled ms':>12s} {'python ms':>12s} {'py/compiled':>12s}")
    for name, t_c, t_p in rows:
        print(f"{name:28s} {1e3 * t_c:12.3f} {1e3 * t_p:12.3f} {t_p / t_c:12.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            fh.write("# blockattn kernel-bench v1\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["kernel", "compiled_ms", "python_ms", "python_over_compiled"])
            for name, t_c, t_p in rows:
                wr.writerow([name, f"{1e3 * t_c:.4f}", f"{1e3 * t_p:.4f}", f"{t_p / t_c:.3f}"])
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Compare the compiled and numpy kernel backends on pipeline-sized inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on the shapes it sees in a batch-64 pretraining step. Both
backends must agree bit-for-bit; the script exits non-zero if they do not.
"""
import argparse
import sys
import timeit

import numpy as np

from delores.tensor.kernels import get_backend


def cases(rng):
    x1 = rng.standard_normal((64, 1, 64, 96)).astype(np.float32)
    x2 = rng.standard_normal((64, 64, 32, 48)).astype(np.float32)
    cols = rng.standard_normal((64 * 32 * 48, 64 * 9)).astype(np.float32)
    pool_in = rng.standard_normal((64, 64, 64, 96)).astype(np.float32)
    pool_grad = rng.standard_normal((64, 64, 32, 48)).astype(np.float32)
    spec = rng.standard_normal((40, 70))
    # flat, as the kernels.momentum_update wrapper passes them
    w = rng.standard_normal(8192 * 8192).astype(np.float32)
    g = rng.standard_normal(8192 * 8192).astype(np.float32)
    return [
        ("im2col3x3 conv1", "im2col3x3", (x1,)),
        ("im2col3x3 conv2", "im2col3x3", (x2,)),
        ("col2im3x3 conv2", "col2im3x3", (cols, 64, 64, 32, 48)),
        ("maxpool fwd block1", "maxpool2x2_forward", (pool_in,)),
        ("maxpool bwd block1", "maxpool2x2_backward", "pool_bwd"),
        ("bicubic 40x70->64x96", "bicubic_resize", (spec, 64, 96)),
        ("momentum 8192x8192", "momentum_update", "momentum"),
    ], pool_in, pool_grad, (w, g)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repetitions (best is reported)")
    args = ap.parse_args(argv)
    try:
        compiled = get_backend("compiled")
    except ImportError as exc:
        print(f"compiled backend unavailable: {exc}")
        return 1
    python = get_backend("python")
    table, pool_in, pool_grad, (w, g) = cases(np.random.default_rng(0))
    _, idx = python["maxpool2x2_forward"](pool_in)
    print(f"{'kernel':<24}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}  identical")
    ok = True
    for label, fn, fargs in table:
        if fargs == "pool_bwd":
            fargs = (pool_grad, idx)
        res = {}
        best = {}
        for name, be in (("python", python), ("compiled", compiled)):
            f = be[fn]
            if fargs == "momentum":
                # in place: time on scratch copies, compare one update from the same start
                ww, mm = w.copy(), np.zeros_like(w)
                best[name] = min(timeit.repeat(lambda: f(ww, g, mm, 1.5e-6, 1e-3, 0.9), number=1,
                                               repeat=args.repeat)) * 1e3
                ww, mm = w.copy(), g.copy()
                f(ww, g, mm, 1.5e-6, 1e-3, 0.9)
                res[name] = (ww, mm)
                continue
            res[name] = f(*fargs)
            best[name] = min(timeit.repeat(lambda: f(*fargs), number=1, repeat=args.repeat)) * 1e3
        a, b = res["python"], res["compiled"]
        pairs = zip(a, b) if isinstance(a, tuple) else [(a, b)]
        same = all(np.array_equal(u, v) for u, v in pairs)
        ok &= same
        print(f"{label:<24}{best['python']:>12.2f}{best['compiled']:>14.2f}"
              f"{best['python'] / best['compiled']:>9.1f}x  {'yes' if same else 'NO'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())

"""Time the fusion forward/backward kernels, compiled vs pure numpy.

    python benchmarks/bench_kernels.py --size 64 --depth 32 --atlases 5 --t 3
"""
import argparse
import time

import numpy as np

from deepfusion import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def bench(size, depth, atlases, t, repeat=3, dtype=np.float32, seed=0):
    rng = np.random.default_rng(seed)
    ft = rng.random((size, size, depth)).astype(dtype)
    fa = rng.random((atlases, size, size, depth)).astype(dtype)
    labels = rng.dirichlet([1, 1], size=(atlases, size, size)).astype(dtype)
    grad = rng.normal(size=(size, size, 2)).astype(dtype)
    impls = {"python": kernels.python_backend}
    if kernels.compiled_backend is not None:
        impls["compiled"] = kernels.compiled_backend
    rows = {}
    for name, impl in impls.items():
        _, w = kernels.fuse_forward(ft, fa, labels, t, impl=impl)
        fwd = best_of(lambda: kernels.fuse_forward(ft, fa, labels, t, impl=impl), repeat)
        bwd = best_of(lambda: kernels.fuse_backward(ft, fa, labels, w, t, grad, impl=impl), repeat)
        rows[name] = (fwd, bwd)
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--depth", type=int, default=32)
    p.add_argument("--atlases", type=int, default=5)
    p.add_argument("--t", type=int, default=3)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    rows = bench(args.size, args.depth, args.atlases, args.t, args.repeat)
    print(f"{args.size}x{args.size}x{args.depth}, K={args.atlases}, t={args.t}, float32, best of {args.repeat}")
    print(f"{'backend':<10}{'forward s':>12}{'backward s':>12}")
    for name, (fwd, bwd) in rows.items():
        print(f"{name:<10}{fwd:>12.4f}{bwd:>12.4f}")
    if "compiled" in rows:
        (pf, pb), (cf, cb) = rows["python"], rows["compiled"]
        print(f"speedup   {pf / cf:>11.2f}x{pb / cb:>11.2f}x")
    return rows


if __name__ == "__main__":
    main()

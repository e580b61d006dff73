"""Compiled vs numpy gather/scatter kernels on UNet-sized convolutions.

    python benchmarks/bench_conv.py [--repeat 5] [--dtype float32]

Reports the best-of-``repeat`` wall time per call for the raw vol2col/col2vol
kernels and for the three convolution passes built on them, and checks that
both backends return bitwise-identical results.
"""
import argparse
import timeit

import numpy as np

from xseg3d.tensor import kernels

# (N, Ci, Co, spatial, kernel, stride): desk-preset blocks, then one default-size block
CASES = [
    ("enc0 16^3", 4, 1, 4, (18, 18, 18), (3, 3, 3), (1, 1, 1)),
    ("dec1 8^3", 4, 16, 8, (10, 10, 10), (3, 3, 3), (1, 1, 1)),
    ("up 2x2x2", 4, 16, 8, (8, 8, 8), (2, 2, 2), (2, 2, 2)),
    ("enc0 64x64x32", 1, 1, 32, (66, 66, 34), (3, 3, 3), (1, 1, 1)),
]


def best(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_case(name, n, ci, co, spatial, kernel, stride, impls, dtype, repeat):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, ci) + spatial).astype(dtype)
    w = rng.normal(size=(co, ci) + kernel).astype(dtype)
    y = kernels.conv3d_forward(x, w, stride, impl=impls["python"])
    g = rng.normal(size=y.shape).astype(dtype)
    cols = impls["python"].vol2col(x, kernel, stride)
    ops = {
        "vol2col": lambda m: m.vol2col(x, kernel, stride),
        "col2vol": lambda m: m.col2vol(cols, ci, spatial, kernel, stride),
        "forward": lambda m: kernels.conv3d_forward(x, w, stride, impl=m),
        "grad input": lambda m: kernels.conv3d_backward_input(g, w, stride, spatial, impl=m),
        "grad weight": lambda m: kernels.conv3d_backward_weight(x, g, stride, kernel, impl=m),
    }
    for op, fn in ops.items():
        results = {k: fn(m) for k, m in impls.items()}
        same = all(np.array_equal(results["python"], r) for r in results.values())
        times = {k: best(lambda m=m: fn(m), repeat) for k, m in impls.items()}
        row = f"{name:<16}{op:<13}" + "".join(f"{times[k] * 1e3:>12.2f}" for k in impls)
        if "compiled" in times:
            row += f"{times['python'] / times['compiled']:>9.2f}x"
        print(row + ("" if same else "   MISMATCH"))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    args = ap.parse_args(argv)
    impls = kernels.available_backends()
    if "compiled" not in impls:
        print("compiled extension not built; timing the numpy fallback only")
    header = f"{'case':<16}{'op':<13}" + "".join(f"{k + ' ms':>12}" for k in impls)
    print(header + ("   speedup" if "compiled" in impls else ""))
    for case in CASES:
        bench_case(*case, impls=impls, dtype=np.dtype(args.dtype), repeat=args.repeat)


if __name__ == "__main__":
    main()

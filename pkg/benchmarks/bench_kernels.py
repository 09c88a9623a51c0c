"""Compiled vs pure-Python kernels on the hot loops.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Reports the best wall time per call for each backend and the speedup.
"""
import argparse
import timeit

import numpy as np

from mvgcn import kernels, mapseg
from mvgcn.numkit import SparseMatrix


def cases(rng):
    # propagation matrix of a sparse 400-node graph times a 400 x 64 block
    dense = (rng.random((400, 400)) < 0.03) * rng.random((400, 400))
    prop = SparseMatrix.from_dense(dense + dense.T + np.eye(400))
    x = rng.normal(size=(400, 64))
    # a dilated road raster like the one segmentation thins
    grid = mapseg.dilate((rng.random((240, 240)) < 0.01).astype(np.uint8), 2)
    blank = (rng.random((240, 240)) < 0.4).astype(np.uint8)
    return {
        "spmm 400x400 (nnz %d) @ 400x64" % prop.nnz: lambda: prop.matmul(x),
        "thin 240x240 dilated raster": lambda: mapseg.thin(grid),
        "label blank cells 240x240": lambda: kernels.label_blank4(blank),
        "label foreground 240x240": lambda: kernels.label_fg8(blank),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    rows = []
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for b in backends:
            saved = kernels._impl
            kernels._impl = kernels.get_backend(b)
            try:
                number = 1 if b == "python" and "thin" in name else 3
                times[b] = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            finally:
                kernels._impl = saved
        rows.append((name, times))
    print(f"{'kernel':40s} " + " ".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, times in rows:
        cells = " ".join(f"{times[b] * 1e3:10.3f}ms" for b in backends)
        speed = f"{times['python'] / times['compiled']:8.1f}x" if "compiled" in times else "       -"
        print(f"{name:40s} {cells} {speed}")


if __name__ == "__main__":
    main()

"""Backend selection for the hot loops.

The compiled extension ``mvgcn._kernels`` is used when importable; otherwise
(or with ``MVGCN_PURE_PYTHON=1``) the numpy fallback is used. ``BACKEND``
names the active one.
"""
import os

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

if _compiled is not None and not os.environ.get("MVGCN_PURE_PYTHON"):
    _impl = _compiled
    BACKEND = "compiled"
else:
    _impl = _kernels_py
    BACKEND = "python"


def available_backends():
    names = ["python"]
    if _compiled is not None:
        names.append("compiled")
    return names


def get_backend(name):
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def spmm_csr(indptr, indices, data, x, n_rows):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _impl.spmm_csr(indptr, indices, data, x, n_rows)


def zs_candidates(grid, step):
    return _impl.zs_candidates(np.ascontiguousarray(grid, dtype=np.uint8), step)


def zs_sequential(grid, cand):
    return _impl.zs_sequential(np.ascontiguousarray(grid, dtype=np.uint8),
                               np.ascontiguousarray(cand, dtype=np.uint8))


def label_fg8(grid):
    return _impl.label_fg8(np.ascontiguousarray(grid, dtype=np.uint8))


def label_blank4(grid):
    return _impl.label_blank4(np.ascontiguousarray(grid, dtype=np.uint8))

# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: CSR spmm, Zhang-Suen passes, connected-component labeling.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature and bit-identical results; ``mvgcn.kernels`` picks one at import.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t idx_t


def spmm_csr(const idx_t[::1] indptr, const idx_t[::1] indices,
             const double[::1] data, const double[:, ::1] x, Py_ssize_t n_rows):
    cdef Py_ssize_t n_feat = x.shape[1]
    out_arr = np.zeros((n_rows, n_feat), dtype=np.float64)
    if n_feat == 0:
        return out_arr
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, f
    cdef double v
    cdef double* orow
    cdef const double* xrow
    with nogil:
        for i in range(n_rows):
            orow = &out[i, 0]
            for k in range(indptr[i], indptr[i + 1]):
                v = data[k]
                xrow = &x[indices[k], 0]
                # contiguous rows let the compiler vectorize this loop
                for f in range(n_feat):
                    orow[f] += v * xrow[f]
    return out_arr


cdef inline int _ring(const unsigned char[:, ::1] g, Py_ssize_t r, Py_ssize_t c,
                      int* p) noexcept nogil:
    # p[0..7] = P2..P9 clockwise from north; outside the raster counts as 0
    cdef Py_ssize_t h = g.shape[0], w = g.shape[1]
    cdef int n = 0, k
    p[0] = g[r - 1, c] if r > 0 else 0
    p[1] = g[r - 1, c + 1] if (r > 0 and c + 1 < w) else 0
    p[2] = g[r, c + 1] if c + 1 < w else 0
    p[3] = g[r + 1, c + 1] if (r + 1 < h and c + 1 < w) else 0
    p[4] = g[r + 1, c] if r + 1 < h else 0
    p[5] = g[r + 1, c - 1] if (r + 1 < h and c > 0) else 0
    p[6] = g[r, c - 1] if c > 0 else 0
    p[7] = g[r - 1, c - 1] if (r > 0 and c > 0) else 0
    for k in range(8):
        n += p[k]
    return n


cdef inline int _transitions(int* p) noexcept nogil:
    cdef int k, a = 0
    for k in range(8):
        if p[k] == 0 and p[(k + 1) % 8] == 1:
            a += 1
    return a


cdef inline bint _deletable(const unsigned char[:, ::1] g, Py_ssize_t r,
                            Py_ssize_t c, int step) noexcept nogil:
    cdef int p[8]
    cdef int n = _ring(g, r, c, p)
    if n < 2 or n > 6:
        return False
    if _transitions(p) != 1:
        return False
    if step == 0:
        return p[0] * p[2] * p[4] == 0 and p[2] * p[4] * p[6] == 0
    return p[0] * p[2] * p[6] == 0 and p[0] * p[4] * p[6] == 0


def zs_candidates(const unsigned char[:, ::1] grid, int step):
    cdef Py_ssize_t h = grid.shape[0], w = grid.shape[1], r, c
    out_arr = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    for r in range(h):
        for c in range(w):
            if grid[r, c] and _deletable(grid, r, c, step):
                out[r, c] = 1
    return out_arr


def zs_sequential(const unsigned char[:, ::1] grid, const unsigned char[:, ::1] cand):
    # delete candidates one at a time in scan order, re-checking each against
    # the partly updated raster so no component is split or erased
    cdef Py_ssize_t h = grid.shape[0], w = grid.shape[1], r, c
    out_arr = np.array(grid, dtype=np.uint8, copy=True)
    cdef unsigned char[:, ::1] g = out_arr
    cdef int n, p[8]
    for r in range(h):
        for c in range(w):
            if cand[r, c] and g[r, c]:
                n = _ring(g, r, c, p)
                if n >= 2 and _transitions(p) == 1:
                    g[r, c] = 0
    return out_arr


cdef idx_t _find(idx_t[::1] parent, idx_t a) noexcept nogil:
    cdef idx_t root = a, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


cdef void _union(idx_t[::1] parent, idx_t a, idx_t b) noexcept nogil:
    a = _find(parent, a)
    b = _find(parent, b)
    if a < b:
        parent[b] = a
    elif b < a:
        parent[a] = b


def label_blank4(const unsigned char[:, ::1] grid):
    cdef Py_ssize_t h = grid.shape[0], w = grid.shape[1]
    labels_arr = np.full((h, w), -1, dtype=np.int64)
    cdef idx_t[:, ::1] lab = labels_arr
    parent_arr = np.empty(h * w if h * w > 0 else 1, dtype=np.int64)
    cdef idx_t[::1] parent = parent_arr
    cdef idx_t nxt = 0, up, left
    cdef Py_ssize_t r, c
    for r in range(h):
        for c in range(w):
            if grid[r, c]:
                continue
            up = lab[r - 1, c] if r > 0 else -1
            left = lab[r, c - 1] if c > 0 else -1
            if up < 0 and left < 0:
                parent[nxt] = nxt
                lab[r, c] = nxt
                nxt += 1
            elif up < 0:
                lab[r, c] = left
            elif left < 0:
                lab[r, c] = up
            else:
                lab[r, c] = up if up < left else left
                _union(parent, up, left)
    remap_arr = np.full(nxt if nxt > 0 else 1, -1, dtype=np.int64)
    cdef idx_t[::1] remap = remap_arr
    cdef idx_t count = 0, root, i
    # roots are the minimum provisional label, i.e. first in scan order
    for i in range(nxt):
        root = _find(parent, i)
        if remap[root] < 0:
            remap[root] = count
            count += 1
        remap[i] = remap[root]
    for r in range(h):
        for c in range(w):
            if lab[r, c] >= 0:
                lab[r, c] = remap[lab[r, c]]
    return labels_arr, int(count)


def label_fg8(const unsigned char[:, ::1] grid):
    """8-connected components of the 1-cells, numbered in scan order."""
    cdef Py_ssize_t h = grid.shape[0], w = grid.shape[1]
    labels_arr = np.full((h, w), -1, dtype=np.int64)
    cdef idx_t[:, ::1] lab = labels_arr
    parent_arr = np.empty(h * w if h * w > 0 else 1, dtype=np.int64)
    cdef idx_t[::1] parent = parent_arr
    cdef idx_t nxt = 0, best, q
    cdef Py_ssize_t r, c, k
    cdef int dr[4]
    cdef int dc[4]
    dr[0] = -1; dc[0] = -1
    dr[1] = -1; dc[1] = 0
    dr[2] = -1; dc[2] = 1
    dr[3] = 0; dc[3] = -1
    for r in range(h):
        for c in range(w):
            if not grid[r, c]:
                continue
            best = -1
            for k in range(4):
                if r + dr[k] < 0 or c + dc[k] < 0 or c + dc[k] >= w:
                    continue
                q = lab[r + dr[k], c + dc[k]]
                if q < 0:
                    continue
                if best < 0:
                    best = q
                else:
                    _union(parent, best, q)
                    if q < best:
                        best = q
            if best < 0:
                parent[nxt] = nxt
                best = nxt
                nxt += 1
            lab[r, c] = best
    remap_arr = np.full(nxt if nxt > 0 else 1, -1, dtype=np.int64)
    cdef idx_t[::1] remap = remap_arr
    cdef idx_t count = 0, root, i
    for i in range(nxt):
        root = _find(parent, i)
        if remap[root] < 0:
            remap[root] = count
            count += 1
        remap[i] = remap[root]
    for r in range(h):
        for c in range(w):
            if lab[r, c] >= 0:
                lab[r, c] = remap[lab[r, c]]
    return labels_arr, int(count)

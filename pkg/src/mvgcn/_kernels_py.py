"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures, same results. Used when the extension is not built or when
``MVGCN_PURE_PYTHON=1`` is set.
"""
import numpy as np


def spmm_csr(indptr, indices, data, x, n_rows):
    n_feat = x.shape[1]
    out = np.zeros((n_rows, n_feat), dtype=np.float64)
    if len(data) == 0:
        return out
    prod = data[:, None] * x[indices]
    starts = indptr[:-1]
    nonempty = indptr[1:] > starts
    out[nonempty] = np.add.reduceat(prod, starts[nonempty], axis=0)
    return out


def _neighbours(g):
    # P2..P9 clockwise from north, zero outside the raster
    p = np.pad(g, 1).astype(np.int8)
    h, w = g.shape
    sl = lambda dr, dc: p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
    return [sl(-1, 0), sl(-1, 1), sl(0, 1), sl(1, 1),
            sl(1, 0), sl(1, -1), sl(0, -1), sl(-1, -1)]


def _ring_at(g, r, c):
    h, w = g.shape
    offs = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
    out = []
    for dr, dc in offs:
        rr, cc = r + dr, c + dc
        out.append(int(g[rr, cc]) if 0 <= rr < h and 0 <= cc < w else 0)
    return out


def zs_candidates(grid, step):
    g = np.asarray(grid, dtype=np.uint8)
    p = _neighbours(g)
    n = sum(p)
    a = sum(((p[k] == 0) & (p[(k + 1) % 8] == 1)).astype(np.int8) for k in range(8))
    if step == 0:
        c3 = p[0] * p[2] * p[4] == 0
        c4 = p[2] * p[4] * p[6] == 0
    else:
        c3 = p[0] * p[2] * p[6] == 0
        c4 = p[0] * p[4] * p[6] == 0
    return ((g == 1) & (n >= 2) & (n <= 6) & (a == 1) & c3 & c4).astype(np.uint8)


def zs_sequential(grid, cand):
    g = np.array(grid, dtype=np.uint8, copy=True)
    for r, c in zip(*np.nonzero(np.asarray(cand) & g)):
        ring = _ring_at(g, r, c)
        trans = sum(ring[k] == 0 and ring[(k + 1) % 8] == 1 for k in range(8))
        if sum(ring) >= 2 and trans == 1:
            g[r, c] = 0
    return g


def _find(parent, a):
    root = a
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        parent[a], a = root, parent[a]
    return root


def label_blank4(grid):
    """4-connected components of the 0-cells, labels in raster scan order."""
    return _label_runs(np.asarray(grid) == 0, diagonal=False)


def label_fg8(grid):
    """8-connected components of the 1-cells, labels in raster scan order."""
    return _label_runs(np.asarray(grid) != 0, diagonal=True)


def _label_runs(mask, diagonal):
    # run-length two-pass labeling; runs overlap (4-conn) or touch (8-conn)
    g = mask
    reach = 1 if diagonal else 0
    h, w = g.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    runs = []  # (row, start, stop)
    parent = []
    prev = []  # run ids of the previous row
    for r in range(h):
        blank = np.concatenate(([0], g[r].astype(np.int8), [0]))
        edges = np.flatnonzero(np.diff(blank))
        cur = []
        j = 0
        for s, e in zip(edges[::2], edges[1::2]):
            rid = len(runs)
            runs.append((r, int(s), int(e)))
            parent.append(rid)
            cur.append(rid)
            while j < len(prev) and runs[prev[j]][2] + reach <= s:
                j += 1
            k = j
            while k < len(prev) and runs[prev[k]][1] < e + reach:
                ra, rb = _find(parent, prev[k]), _find(parent, rid)
                if ra < rb:
                    parent[rb] = ra
                elif rb < ra:
                    parent[ra] = rb
                k += 1
        prev = cur
    remap = {}
    for rid, (r, s, e) in enumerate(runs):
        root = _find(parent, rid)
        if root not in remap:
            remap[root] = len(remap)
        labels[r, s:e] = remap[root]
    return labels, len(remap)

"""Road-map segmentation into irregular regions.

Pipeline: rasterize road polylines onto a grid, dilate to close small gaps,
thin back to a one-cell skeleton, label the blank areas between roads as
regions, then merge small or similar neighbours by flow correlation.

Grids are ``uint8`` arrays with 1 for road cells. Row 0 is the northern edge
of the bounding box, column 0 the western edge.
"""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

# correlation assigned to pairs whose profiles make the coefficient undefined
UNDEFINED_CORRELATION = -2.0


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    lat_min: float
    lon_min: float
    lat_max: float
    lon_max: float

    def __post_init__(self):
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise ValueError(f"degenerate bounding box {self}")

    def contains(self, lat, lon):
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max


def geo_to_cell(lat, lon, bbox, dims):
    h, w = dims
    if not bbox.contains(lat, lon):
        raise ValueError(f"point ({lat}, {lon}) lies outside {bbox}")
    r = int((bbox.lat_max - lat) / (bbox.lat_max - bbox.lat_min) * h)
    c = int((lon - bbox.lon_min) / (bbox.lon_max - bbox.lon_min) * w)
    return min(r, h - 1), min(c, w - 1)


def cell_center(rows, cols, bbox, dims):
    h, w = dims
    lat = bbox.lat_max - (np.asarray(rows) + 0.5) / h * (bbox.lat_max - bbox.lat_min)
    lon = bbox.lon_min + (np.asarray(cols) + 0.5) / w * (bbox.lon_max - bbox.lon_min)
    return lat, lon


def _line_cells(r0, c0, r1, c1):
    # integer Bresenham, all octants
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr, sc = (1 if r1 >= r0 else -1), (1 if c1 >= c0 else -1)
    err = dc - dr
    cells = []
    while True:
        cells.append((r0, c0))
        if r0 == r1 and c0 == c1:
            return cells
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c0 += sc
        if e2 < dc:
            err += dc
            r0 += sr


def rasterize_roads(polylines, bbox, dims):
    """Burn each polyline (sequence of ``(lat, lon)``) into an H x W grid."""
    h, w = dims
    if h < 2 or w < 2:
        raise ValueError("raster must be at least 2x2")
    grid = np.zeros((h, w), dtype=np.uint8)
    for line in polylines:
        cells = [geo_to_cell(lat, lon, bbox, dims) for lat, lon in line]
        if len(cells) == 1:
            grid[cells[0]] = 1
        for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
            for r, c in _line_cells(r0, c0, r1, c1):
                grid[r, c] = 1
    return grid


def dilate(grid, iterations=2):
    """3x3 binary dilation repeated ``iterations`` times; cells past the edge are 0."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    g = np.asarray(grid, dtype=np.uint8)
    h, w = g.shape
    for _ in range(iterations):
        p = np.pad(g, 1)
        out = np.zeros_like(g)
        for dr in range(3):
            for dc in range(3):
                out |= p[dr:dr + h, dc:dc + w]
        g = out
    return g.copy()


def thin(grid):
    """Zhang-Suen skeleton; never removes a pixel that would split or erase a component.

    Each subiteration deletes its candidates in parallel as in the textbook
    scheme. A component whose every pixel is a candidate keeps its first pixel
    in scan order, and a subiteration that would split a component is redone
    with sequential deletion instead.
    """
    g = np.ascontiguousarray(grid, dtype=np.uint8).copy()
    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            cand = kernels.zs_candidates(g, step)
            if not cand.any():
                continue
            lab, n = kernels.label_fg8(g)
            fg = np.bincount(lab[g == 1], minlength=n)
            hit = np.bincount(lab[cand == 1], minlength=n)
            for comp in np.flatnonzero(fg == hit):
                first = np.argmax(lab.ravel() == comp)
                cand.ravel()[first] = 0
            new = g & (1 - cand)
            if kernels.label_fg8(new)[1] != n:
                new = kernels.zs_sequential(g, cand)
            if not np.array_equal(new, g):
                g = new
                changed = True
    return g


@dataclass
class Region:
    id: int
    cells: np.ndarray  # (k, 2) row, col
    centroid: tuple    # (lat, lon)

    @property
    def size(self):
        return len(self.cells)


@dataclass
class RegionSet:
    regions: list
    labels: np.ndarray  # H x W, -1 on road cells
    bbox: BBox = None
    dims: tuple = field(default=None)

    def __len__(self):
        return len(self.regions)

    @property
    def centroids(self):
        return np.array([r.centroid for r in self.regions], dtype=float).reshape(-1, 2)

    @property
    def sizes(self):
        return np.array([r.size for r in self.regions], dtype=np.int64)

    def locate(self, lat, lon, search=2):
        """Region id for a point, or ``None``.

        Points on a road cell snap to the nearest region within ``search``
        cells (Chebyshev rings, lowest id on ties).
        """
        if self.bbox is None or not self.bbox.contains(lat, lon):
            return None
        r, c = geo_to_cell(lat, lon, self.bbox, self.dims)
        if self.labels[r, c] >= 0:
            return int(self.labels[r, c])
        h, w = self.labels.shape
        for rad in range(1, search + 1):
            win = self.labels[max(r - rad, 0):r + rad + 1, max(c - rad, 0):c + rad + 1]
            hit = win[win >= 0]
            if hit.size:
                return int(hit.min())
        return None


def _build_regionset(labels, count, bbox):
    dims = labels.shape
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_lab = flat[order]
    starts = np.searchsorted(sorted_lab, np.arange(count))
    ends = np.searchsorted(sorted_lab, np.arange(count), side="right")
    regions = []
    for k in range(count):
        idx = order[starts[k]:ends[k]]
        rows, cols = np.divmod(idx, dims[1])
        cells = np.stack([rows, cols], axis=1)
        if bbox is not None:
            lat, lon = cell_center(rows, cols, bbox, dims)
            centroid = (float(lat.mean()), float(lon.mean()))
        else:
            centroid = (float(rows.mean() + 0.5), float(cols.mean() + 0.5))
        regions.append(Region(k, cells, centroid))
    return RegionSet(regions, labels, bbox, dims)


def label_regions(grid, bbox=None):
    """4-connected components of the blank (0) cells, numbered in scan order.

    A grid without blank cells gives an empty RegionSet and a warning.
    """
    labels, count = kernels.label_blank4(grid)
    if count == 0:
        log.warning("grid has no blank cells; no regions")
    return _build_regionset(labels, count, bbox)


def _ranks(a):
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    ranks[order] = np.arange(1, len(a) + 1)
    _, inv = np.unique(a, return_inverse=True)
    return (np.bincount(inv, ranks) / np.bincount(inv))[inv]


def spearman(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("spearman needs two 1-d series of equal length >= 2")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("spearman is undefined for a constant series")
    rx = _ranks(x)
    ry = _ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    rho = float(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)))
    return min(1.0, max(-1.0, rho))


def _corr(a, b):
    try:
        return spearman(a, b)
    except ValueError:
        return UNDEFINED_CORRELATION


def region_adjacency(labels, radius=2):
    """Pairs ``(i, j)``, ``i < j``, of regions with cells within ``radius`` (Chebyshev).

    A one-cell road between two regions puts them two cells apart.
    """
    h, w = labels.shape
    found = set()
    for dr in range(0, radius + 1):
        for dc in range(-radius, radius + 1):
            if dr == 0 and dc <= 0:
                continue
            a = labels[0:h - dr, max(0, -dc):w - max(0, dc)]
            b = labels[dr:h, max(0, dc):w + min(0, dc)]
            m = (a >= 0) & (b >= 0) & (a != b)
            if m.any():
                lo = np.minimum(a[m], b[m])
                hi = np.maximum(a[m], b[m])
                found.update(zip(lo.tolist(), hi.tolist()))
    return found


def knn_adjacency(positions, k=8):
    """Undirected k-nearest-neighbour pairs by Euclidean distance on the given coordinates."""
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    pairs = set()
    for i in range(n):
        for j in np.argsort(d[i], kind="stable")[:min(k, n - 1)]:
            pairs.add((min(i, int(j)), max(i, int(j))))
    return pairs


def agglomerate(profiles, sizes, adjacency, target_count, min_size=0):
    """Greedy merging of adjacent groups by descending Spearman correlation.

    Returns an array mapping each input index to its group label, labels
    numbered ``0..target_count-1`` by their smallest member index. Groups
    smaller than ``min_size`` are first folded into their most correlated
    neighbour. Ties go to the pair with the lower (min index, min index).
    """
    profiles = np.asarray(profiles, dtype=float)
    n = len(profiles)
    if target_count < 1:
        raise ClusteringError("target_count must be >= 1")
    if target_count > n:
        raise ClusteringError(f"target_count {target_count} exceeds current count {n}")
    # groups keyed by their smallest member index
    prof = {i: profiles[i].copy() for i in range(n)}
    size = {i: float(sizes[i]) for i in range(n)}
    members = {i: [i] for i in range(n)}
    nbrs = {i: set() for i in range(n)}
    for a, b in adjacency:
        if a != b:
            nbrs[a].add(b)
            nbrs[b].add(a)
    corr = {}

    def pair_corr(a, b):
        key = (min(a, b), max(a, b))
        if key not in corr:
            corr[key] = _corr(prof[key[0]], prof[key[1]])
        return corr[key]

    def merge(a, b):
        keep, gone = min(a, b), max(a, b)
        total = size[keep] + size[gone]
        prof[keep] = (prof[keep] * size[keep] + prof[gone] * size[gone]) / total
        size[keep] = total
        members[keep] += members.pop(gone)
        for g in (gone, keep):
            for o in list(nbrs[g]):
                corr.pop((min(g, o), max(g, o)), None)
        for o in nbrs.pop(gone):
            nbrs[o].discard(gone)
            if o != keep:
                nbrs[o].add(keep)
                nbrs[keep].add(o)
        nbrs[keep].discard(gone)
        del prof[gone], size[gone]

    for g in sorted(members):
        if len(members) <= target_count:
            break
        if g in members and size[g] < min_size and nbrs[g]:
            best = max(sorted(nbrs[g]), key=lambda o: pair_corr(g, o))
            merge(g, best)

    while len(members) > target_count:
        best_key, best_val = None, None
        for a in sorted(nbrs):
            for b in sorted(nbrs[a]):
                if b <= a:
                    continue
                c = pair_corr(a, b)
                if best_val is None or c > best_val:
                    best_key, best_val = (a, b), c
        if best_key is None:
            raise ClusteringError(
                f"adjacency is disconnected: cannot merge below {len(members)} groups")
        merge(*best_key)

    assign = np.empty(n, dtype=np.int64)
    for new, key in enumerate(sorted(members)):
        assign[members[key]] = new
    return assign


def cluster_regions(rs, profiles, target_count, min_cells=4, radius=2):
    """Merge geographically adjacent regions down to ``target_count``.

    ``profiles`` holds one average-flow series per region (rows aligned with
    region ids).
    """
    profiles = np.asarray(profiles, dtype=float)
    if len(profiles) != len(rs):
        raise ValueError("need exactly one profile per region")
    if target_count == len(rs):
        return rs
    assign = agglomerate(profiles, rs.sizes, region_adjacency(rs.labels, radius),
                         target_count, min_size=min_cells)
    return relabel(rs, assign)


def relabel(rs, assign):
    """Apply an old-id -> new-id mapping, renumbering new ids in scan order."""
    labels = np.where(rs.labels >= 0, np.asarray(assign)[np.maximum(rs.labels, 0)], -1)
    flat = labels.ravel()
    pos = flat >= 0
    _, first = np.unique(flat[pos], return_index=True)
    scan = np.argsort(np.flatnonzero(pos)[first])
    remap = np.empty(len(scan), dtype=np.int64)
    remap[scan] = np.arange(len(scan))
    labels = np.where(labels >= 0, remap[np.maximum(labels, 0)], -1)
    return _build_regionset(labels, len(scan), rs.bbox)


def cluster_points(positions, profiles, target_count, k=8):
    """Station mode: group points by flow correlation over a k-nearest-neighbour graph."""
    return agglomerate(profiles, np.ones(len(profiles)), knn_adjacency(positions, k), target_count)


# ---- file formats ----

def read_roads_csv(path):
    """Rows ``segment_id, lat1, lon1, lat2, lon2``; one polyline per row."""
    lines = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "segment_id":
                continue
            _, a, b, c, d = row[:5]
            lines.append([(float(a), float(b)), (float(c), float(d))])
    return lines


def write_regions(rs, regions_path, cells_path):
    with open(regions_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id", "centroid_lat", "centroid_lon", "cell_count"])
        for r in rs.regions:
            w.writerow([r.id, repr(r.centroid[0]), repr(r.centroid[1]), r.size])
    with open(cells_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "region_id"])
        for r in rs.regions:
            for row, col in r.cells:
                w.writerow([int(row), int(col), r.id])


def read_regions(regions_path, cells_path=None, bbox=None, dims=None):
    """Inverse of ``write_regions``; without a cell file only centroids are restored."""
    cents, sizes = [], []
    with open(regions_path, newline="") as fh:
        for row in csv.DictReader(fh):
            cents.append((float(row["centroid_lat"]), float(row["centroid_lon"])))
            sizes.append(int(row["cell_count"]))
    cells = [[] for _ in cents]
    if cells_path is not None:
        with open(cells_path, newline="") as fh:
            for row in csv.DictReader(fh):
                cells[int(row["region_id"])].append((int(row["row"]), int(row["col"])))
    labels = np.full(dims if dims else (0, 0), -1, dtype=np.int64)
    regions = []
    for k, (c, cl) in enumerate(zip(cents, cells)):
        arr = np.array(cl, dtype=np.int64).reshape(-1, 2)
        if dims and len(arr):
            labels[arr[:, 0], arr[:, 1]] = k
        regions.append(Region(k, arr, c))
    return RegionSet(regions, labels, bbox, dims)

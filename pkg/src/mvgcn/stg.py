"""Spatio-temporal graph construction.

Transition counts between regions decide which pairs are connected; a
thresholded Gaussian of the distance between region centroids weights those
edges; self-loops and symmetric degree normalization give the propagation
matrix shared by every graph convolution in the model.
"""
import csv
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

from .numkit import SparseMatrix

EARTH_RADIUS_KM = 6371.0088
_EPOCH = datetime(1970, 1, 1)


# ---- trips ----

def parse_ts(text):
    """ISO-8601 timestamp to integer seconds on the naive wall clock.

    Offsets are honoured by converting to UTC first; naive stamps are taken
    as they are.
    """
    dt = datetime.fromisoformat(text.strip())
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return int((dt - _EPOCH).total_seconds())


def format_ts(seconds):
    return (_EPOCH + timedelta(seconds=int(seconds))).isoformat()


@dataclass
class Trips:
    """Origin-destination records. Either region ids or coordinates are set."""
    start: np.ndarray            # int64 seconds
    end: np.ndarray
    origin: np.ndarray = None    # region ids, -1 when unknown
    dest: np.ndarray = None
    coords: np.ndarray = None    # (k, 4) start_lat, start_lon, end_lat, end_lon

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.int64).reshape(-1)
        self.end = np.asarray(self.end, dtype=np.int64).reshape(-1)
        if self.start.shape != self.end.shape:
            raise ValueError("start and end timestamps differ in length")
        if self.origin is None and self.coords is None:
            raise ValueError("trips need region ids or coordinates")
        if self.origin is not None:
            self.origin = np.asarray(self.origin, dtype=np.int64).reshape(-1)
            self.dest = np.asarray(self.dest, dtype=np.int64).reshape(-1)
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 4)

    def __len__(self):
        return len(self.start)

    @classmethod
    def empty(cls):
        z = np.zeros(0, np.int64)
        return cls(z, z, z, z)

    def endpoints(self, n_regions, regions=None):
        """(origin, dest) region ids with -1 for endpoints outside every region."""
        if self.origin is not None:
            o, d = self.origin.copy(), self.dest.copy()
            o[(o < 0) | (o >= n_regions)] = -1
            d[(d < 0) | (d >= n_regions)] = -1
            return o, d
        if regions is None:
            raise ValueError("coordinate trips need a RegionSet to locate endpoints")
        o = np.full(len(self), -1, np.int64)
        d = np.full(len(self), -1, np.int64)
        for k, (a, b, c, e) in enumerate(self.coords):
            ro, rd = regions.locate(a, b), regions.locate(c, e)
            o[k] = -1 if ro is None else ro
            d[k] = -1 if rd is None else rd
        return o, d


def read_trips_csv(path):
    """Read either trip layout; the header decides which one."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return Trips.empty()
    head = [h.strip().lower() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    start = [parse_ts(r[0]) for r in body]
    end = [parse_ts(r[1]) for r in body]
    if "origin_region" in head:
        return Trips(start, end, [int(r[2]) for r in body], [int(r[3]) for r in body])
    if "start_lat" in head:
        return Trips(start, end, coords=[[float(x) for x in r[2:6]] for r in body])
    raise ValueError(f"{path}: unrecognized trip header {rows[0]}")


def write_trips_csv(trips, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if trips.origin is not None:
            w.writerow(["start_ts", "end_ts", "origin_region", "dest_region"])
            for s, e, o, d in zip(trips.start, trips.end, trips.origin, trips.dest):
                w.writerow([format_ts(s), format_ts(e), int(o), int(d)])
        else:
            w.writerow(["start_ts", "end_ts", "start_lat", "start_lon", "end_lat", "end_lon"])
            for s, e, c in zip(trips.start, trips.end, trips.coords):
                w.writerow([format_ts(s), format_ts(e)] + [repr(float(x)) for x in c])


def count_transitions(trips, n_regions, interval, start, n_slices, regions=None):
    """Trip counts per (slice of start time, origin, destination).

    Returns ``(cube, rejects)`` where ``cube`` has shape (n_slices, N, N) and
    ``rejects`` counts trips with an endpoint in no region.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    cube = np.zeros((n_slices, n_regions, n_regions), dtype=np.int64)
    if len(trips) == 0:
        return cube, 0
    o, d = trips.endpoints(n_regions, regions)
    t = (trips.start - start) // interval
    if t.min() < 0 or t.max() >= n_slices:
        raise ValueError("trip start outside the series span")
    ok = (o >= 0) & (d >= 0)
    np.add.at(cube, (t[ok], o[ok], d[ok]), 1)
    return cube, int((~ok).sum())


# ---- graph ----

def build_adjacency(cube, alpha=3, beta=0.1):
    """Edge where the symmetrized count exceeds ``alpha`` in more than a ``beta`` share of slices."""
    cube = np.asarray(cube)
    if cube.ndim != 3 or cube.shape[0] == 0:
        raise ValueError("empty transition cube")
    if alpha < 0 or not 0.0 <= beta <= 1.0:
        raise ValueError("need alpha >= 0 and beta in [0, 1]")
    sym = cube + cube.transpose(0, 2, 1)
    ratio = (sym > alpha).sum(axis=0) / cube.shape[0]
    a = (ratio > beta).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    return a


def haversine(positions):
    """Pairwise great-circle distances in km for (lat, lon) rows in degrees."""
    p = np.radians(np.asarray(positions, dtype=np.float64).reshape(-1, 2))
    lat, lon = p[:, 0], p[:, 1]
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = np.sin(dlat / 2) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, d.T)


def euclidean(positions):
    p = np.asarray(positions, dtype=np.float64)
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


DISTANCES = {"haversine": haversine, "euclidean": euclidean}


def default_kernel_params(adjacency, dist):
    """theta = sample std of edge distances, kappa = their 80th percentile.

    With fewer than two edges all pairs are used instead; a zero spread
    falls back to the mean distance (or 1) so theta stays positive.
    """
    iu = np.triu_indices_from(dist, 1)
    d = dist[iu][np.asarray(adjacency)[iu] > 0]
    if len(d) < 2:
        d = dist[iu]
    if len(d) == 0:
        return 1.0, 1.0
    theta = float(np.std(d, ddof=1)) if len(d) > 1 else 0.0
    if not theta > 0:
        theta = float(d.mean()) or 1.0
    kappa = float(np.percentile(d, 80))
    if not kappa > 0:
        kappa = theta
    return theta, kappa


def spatial_weights(positions=None, theta=None, kappa=None, dist=None, metric="haversine"):
    """Thresholded Gaussian kernel exp(-d^2 / (2 theta^2)) for d <= kappa, else 0."""
    if theta is None or theta <= 0:
        raise ValueError("theta must be positive")
    if kappa is None or kappa <= 0:
        raise ValueError("kappa must be positive")
    if dist is None:
        dist = DISTANCES[metric](positions)
    dist = np.asarray(dist, dtype=np.float64)
    w = np.where(dist <= kappa, np.exp(-(dist * dist) / (2.0 * theta * theta)), 0.0)
    np.fill_diagonal(w, 1.0)
    return w


def modify_adjacency(a, w):
    a = np.asarray(a, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if a.shape != w.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency {a.shape} and weights {w.shape} must be equal square shapes")
    return a * w


def propagation_matrix(s):
    """Q^{-1/2} (S + I) Q^{-1/2} as a SparseMatrix, Q the row sums of S + I."""
    s = np.asarray(s, dtype=np.float64)
    st = s + np.eye(len(s))
    d = 1.0 / np.sqrt(st.sum(axis=1))
    # d_i * d_j is commutative, so the result is exactly symmetric
    return SparseMatrix.from_dense(st * np.outer(d, d))


@dataclass(frozen=True)
class STGraph:
    n: int
    adjacency: np.ndarray
    omega: np.ndarray
    s: np.ndarray
    prop: SparseMatrix
    positions: np.ndarray
    theta: float
    kappa: float
    alpha: float = 3
    beta: float = 0.1

    def without_geoposition(self):
        """Same edges with all-ones weights: plain normalized adjacency."""
        ones = np.ones_like(self.omega)
        return STGraph(self.n, self.adjacency, ones, self.adjacency.copy(),
                       propagation_matrix(self.adjacency), self.positions,
                       self.theta, self.kappa, self.alpha, self.beta)


def graph_from_adjacency(a, positions, theta=None, kappa=None, metric="haversine",
                         alpha=3, beta=0.1, geoposition=True):
    a = np.asarray(a, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) != len(a):
        raise ValueError(f"{len(positions)} positions for {len(a)} nodes")
    dist = DISTANCES[metric](positions)
    t0, k0 = default_kernel_params(a, dist)
    theta = t0 if theta is None else float(theta)
    kappa = k0 if kappa is None else float(kappa)
    omega = spatial_weights(theta=theta, kappa=kappa, dist=dist) if geoposition else np.ones_like(a)
    s = modify_adjacency(a, omega)
    return STGraph(len(a), a, omega, s, propagation_matrix(s), positions,
                   theta, kappa, alpha, beta)


def build_graph(cube, positions, alpha=3, beta=0.1, theta=None, kappa=None,
                metric="haversine", geoposition=True):
    a = build_adjacency(cube, alpha, beta)
    return graph_from_adjacency(a, positions, theta, kappa, metric, alpha, beta, geoposition)


# ---- files ----

def write_graph(g, path):
    """Header lines ``# key,value`` then one row per pair i<j with an edge or nonzero weight."""
    with open(path, "w", newline="") as fh:
        for k, v in (("N", g.n), ("theta", g.theta), ("kappa", g.kappa),
                     ("alpha", g.alpha), ("beta", g.beta)):
            fh.write(f"# {k},{v!r}\n")
        w = csv.writer(fh)
        w.writerow(["i", "j", "a_ij", "omega_ij", "s_ij"])
        for i in range(g.n):
            for j in range(i + 1, g.n):
                if g.adjacency[i, j] or g.omega[i, j]:
                    w.writerow([i, j, int(g.adjacency[i, j]), repr(float(g.omega[i, j])),
                                repr(float(g.s[i, j]))])


def read_graph(path, positions=None):
    head = {}
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                k, v = line[1:].strip().split(",", 1)
                head[k] = float(v)
            elif line.strip() and not line.startswith("i,"):
                rows.append(line.strip().split(","))
    if "N" not in head:
        raise ValueError(f"{path}: missing N header")
    n = int(head["N"])
    a = np.zeros((n, n))
    omega = np.eye(n)
    for i, j, aij, wij, _ in rows:
        i, j = int(i), int(j)
        a[i, j] = a[j, i] = float(aij)
        omega[i, j] = omega[j, i] = float(wij)
    s = modify_adjacency(a, omega)
    pos = np.zeros((n, 2)) if positions is None else np.asarray(positions, dtype=np.float64)
    return STGraph(n, a, omega, s, propagation_matrix(s), pos, head["theta"], head["kappa"],
                   head.get("alpha", 3), head.get("beta", 0.1))

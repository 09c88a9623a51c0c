"""Model-ready data: flow series, scaling, temporal views, global features, splits."""
import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .numkit import dtn
from .stg import format_ts, parse_ts

VIEW_NAMES = ("recent", "daily", "weekly", "monthly", "quarterly")
_EPOCH = datetime(1970, 1, 1)


class HistoryError(ValueError):
    pass


# ---- flow series ----

@dataclass
class FlowSeries:
    values: np.ndarray      # (T, N, C); channel 0 inflow, 1 outflow
    start: int              # seconds of slice 0
    interval: int = 3600    # seconds per slice

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"flow values must be (T, N, C), got {self.values.shape}")
        if self.interval <= 0:
            raise ValueError("interval must be positive")

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]

    @property
    def C(self):
        return self.values.shape[2]

    def timestamp(self, t):
        return self.start + int(t) * self.interval

    @property
    def steps_per_week(self):
        return 7 * 86400 // self.interval


def aggregate_flows(trips, n_regions, interval, start, n_slices, regions=None):
    """Outflow of the origin at the start slice, inflow of the destination at the end slice.

    Intra-region trips add nothing. Trips with an endpoint in no region, or
    with a slice outside the span, are skipped. Returns ``(series, tally)``
    with ``outflow + intra + rejects == total``.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    values = np.zeros((n_slices, n_regions, 2))
    tally = {"total": len(trips), "outflow": 0, "intra": 0, "rejects": 0}
    if len(trips):
        o, d = trips.endpoints(n_regions, regions)
        t1 = (trips.start - start) // interval
        t2 = (trips.end - start) // interval
        ok = (o >= 0) & (d >= 0) & (t1 >= 0) & (t1 < n_slices) & (t2 >= 0) & (t2 < n_slices)
        intra = ok & (o == d)
        move = ok & (o != d)
        np.add.at(values, (t1[move], o[move], 1), 1.0)
        np.add.at(values, (t2[move], d[move], 0), 1.0)
        tally.update(outflow=int(move.sum()), intra=int(intra.sum()), rejects=int((~ok).sum()))
    return FlowSeries(values, start, interval), tally


def write_series(series, path):
    """DTN1 tensor (T, N, C) plus ``<path>.header.csv``."""
    dtn.write(path, series.values)
    with open(f"{path}.header.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start_ts", "interval_seconds", "N", "C"])
        w.writerow([format_ts(series.start), series.interval, series.N, series.C])


def read_series(path):
    values = dtn.read(path)
    with open(f"{path}.header.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    if values.ndim != 3 or (values.shape[1], values.shape[2]) != (int(row["N"]), int(row["C"])):
        raise ValueError(f"{path}: tensor shape {values.shape} disagrees with its header")
    return FlowSeries(values, parse_ts(row["start_ts"]), int(row["interval_seconds"]))


# ---- scaling ----

@dataclass
class Scaler:
    """Per-channel min-max map onto ``(lo, hi)``; a constant channel maps to 0."""
    mn: np.ndarray
    mx: np.ndarray
    lo: float = -1.0
    hi: float = 1.0

    @classmethod
    def fit(cls, values, lo=-1.0, hi=1.0):
        v = np.asarray(values, dtype=np.float64)
        if (lo, hi) not in ((-1.0, 1.0), (0.0, 1.0)):
            raise ValueError(f"unsupported scaling range ({lo}, {hi})")
        axes = tuple(range(v.ndim - 1))
        return cls(v.min(axis=axes), v.max(axis=axes), float(lo), float(hi))

    def _span(self):
        span = self.mx - self.mn
        return span, span > 0

    def transform(self, x):
        span, ok = self._span()
        unit = (np.asarray(x, dtype=np.float64) - self.mn) / np.where(ok, span, 1.0)
        return np.where(ok, self.lo + unit * (self.hi - self.lo), 0.0)

    def inverse(self, y):
        span, ok = self._span()
        unit = (np.asarray(y, dtype=np.float64) - self.lo) / (self.hi - self.lo)
        return np.where(ok, self.mn + unit * span, self.mn)


# ---- views ----

@dataclass(frozen=True)
class ViewConfig:
    lengths: tuple = (3, 3, 3, 3, 3)       # l_r, l_d, l_w, l_m, l_q
    spans: tuple = (24, 168, 720, 2160)    # p_d, p_w, p_m, p_q

    def __post_init__(self):
        if len(self.lengths) != 5 or len(self.spans) != 4:
            raise ValueError("need five view lengths and four spans")
        if any(not 0 <= l <= 6 for l in self.lengths):
            raise ValueError(f"view lengths must be in 0..6, got {self.lengths}")
        if any(p <= 0 for p in self.spans) or any(a >= b for a, b in zip(self.spans, self.spans[1:])):
            raise ValueError(f"spans must be positive and strictly increasing, got {self.spans}")
        if not any(self.lengths):
            raise ValueError("at least one temporal view must be enabled")

    @property
    def periods(self):
        return (1,) + tuple(self.spans)

    @property
    def active(self):
        return [v for v in range(5) if self.lengths[v] > 0]


def view_indices(t, cfg, horizon=1):
    """Source timesteps of each view for target ``t``.

    The recent view counts back from the forecast origin ``t - horizon + 1``;
    the periodic views count back from the target in whole periods.
    """
    origin = t - horizon + 1
    out = [[origin - j for j in range(1, cfg.lengths[0] + 1)]]
    for v in range(1, 5):
        out.append([t - j * cfg.periods[v] for j in range(1, cfg.lengths[v] + 1)])
    for v in range(4, -1, -1):
        if out[v] and min(out[v]) < 0:
            raise HistoryError(f"insufficient history: {VIEW_NAMES[v]} view")
        if out[v] and max(out[v]) >= origin:
            raise HistoryError(f"{VIEW_NAMES[v]} view reaches past the forecast origin at horizon {horizon}")
    return out


def first_target(cfg, horizon=1):
    need = [cfg.lengths[0] + horizon - 1]
    need += [cfg.lengths[v] * cfg.periods[v] for v in range(1, 5)]
    return max(need)


def sample_views(values, t, cfg, horizon=1):
    """Five arrays (N, C, l_v), oldest-last as in the view definitions."""
    values = np.asarray(values)
    return [np.ascontiguousarray(values[idx].transpose(1, 2, 0)) if idx else
            np.zeros(values.shape[1:] + (0,)) for idx in view_indices(t, cfg, horizon)]


# ---- global features ----

def encode_meta(ts, interval=3600):
    """One-hot time of day, one-hot day of week (Monday 0), weekend flag."""
    slots = 86400 // interval if 86400 % interval == 0 and interval <= 86400 else 24
    dt = _EPOCH + timedelta(seconds=int(ts))
    vec = np.zeros(slots + 8)
    vec[(dt.hour * 3600 + dt.minute * 60 + dt.second) * slots // 86400] = 1.0
    vec[slots + dt.weekday()] = 1.0
    vec[slots + 7] = 1.0 if dt.weekday() >= 5 else 0.0
    return vec


def meta_matrix(series):
    return np.stack([encode_meta(series.timestamp(t), series.interval) for t in range(series.T)])


def _missing(x):
    return x is None or (isinstance(x, float) and math.isnan(x))


def _unit(x, lo, hi):
    return 0.0 if hi <= lo else (x - lo) / (hi - lo)


def encode_external(weather_code, holiday, temperature, wind_speed, vocab,
                    temp_range=(0.0, 1.0), wind_range=(0.0, 1.0),
                    use_temperature=True, use_wind=True):
    """One-hot weather (``vocab`` codes, 0 for none) ++ holiday bit ++ scaled temperature ++ wind.

    Missing fields give all-zero blocks. Temperature and wind are min-max
    scaled by the given ranges.
    """
    parts = []
    if vocab:
        w = np.zeros(vocab)
        if not _missing(weather_code):
            code = int(weather_code)
            if not 0 <= code < vocab:
                raise ValueError(f"unknown weather code {weather_code} (vocabulary of {vocab})")
            w[code] = 1.0
        parts.append(w)
    parts.append([0.0 if _missing(holiday) else float(bool(holiday))])
    if use_temperature:
        parts.append([0.0 if _missing(temperature) else _unit(float(temperature), *temp_range)])
    if use_wind:
        parts.append([0.0 if _missing(wind_speed) else _unit(float(wind_speed), *wind_range)])
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


@dataclass
class Externals:
    """Per-timestep records; NaN (or -1 for weather) marks a missing field."""
    ts: np.ndarray
    weather: np.ndarray
    holiday: np.ndarray
    temperature: np.ndarray
    wind: np.ndarray

    def __len__(self):
        return len(self.ts)

    @classmethod
    def blank(cls, timestamps):
        n = len(timestamps)
        nan = np.full(n, np.nan)
        return cls(np.asarray(timestamps, np.int64), np.full(n, -1), nan, nan.copy(), nan.copy())

    def align(self, series):
        """Records for every slice of ``series``; slices with no record are blank."""
        pos = {int(t): k for k, t in enumerate(self.ts)}
        out = Externals.blank([series.timestamp(t) for t in range(series.T)])
        for t, ts in enumerate(out.ts):
            k = pos.get(int(ts))
            if k is not None:
                out.weather[t] = self.weather[k]
                out.holiday[t] = self.holiday[k]
                out.temperature[t] = self.temperature[k]
                out.wind[t] = self.wind[k]
        return out


@dataclass
class ExternalEncoder:
    vocab: int = 0
    temp_range: tuple = (0.0, 1.0)
    wind_range: tuple = (0.0, 1.0)
    use_temperature: bool = False
    use_wind: bool = False

    @classmethod
    def fit(cls, ext, train_end=None, vocab=None):
        """Blocks present in the data are enabled; scaling ranges come from ``[:train_end]``."""
        sl = slice(None, train_end)
        codes = ext.weather[ext.weather >= 0]
        if vocab is None:
            vocab = int(codes.max()) + 1 if len(codes) else 0

        def rng(x):
            x = x[sl]
            x = x[~np.isnan(x)]
            return (float(x.min()), float(x.max())) if len(x) else (0.0, 1.0)

        return cls(vocab, rng(ext.temperature), rng(ext.wind),
                   bool((~np.isnan(ext.temperature)).any()), bool((~np.isnan(ext.wind)).any()))

    @property
    def width(self):
        return self.vocab + 1 + int(self.use_temperature) + int(self.use_wind)

    def encode(self, weather, holiday, temperature, wind):
        return encode_external(None if weather < 0 else weather, holiday, temperature, wind,
                               self.vocab, self.temp_range, self.wind_range,
                               self.use_temperature, self.use_wind)

    def matrix(self, ext):
        return np.stack([self.encode(int(ext.weather[k]), ext.holiday[k], ext.temperature[k],
                                     ext.wind[k]) for k in range(len(ext))])


def read_externals(path):
    ts, weather, hol, temp, wind = [], [], [], [], []

    def num(s):
        return float(s) if s.strip() else np.nan

    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ts.append(parse_ts(row["ts"]))
            weather.append(int(row["weather_code"]) if row["weather_code"].strip() else -1)
            hol.append(num(row["holiday"]))
            temp.append(num(row["temperature"]))
            wind.append(num(row["wind_speed"]))
    return Externals(np.array(ts, np.int64), np.array(weather, np.int64), np.array(hol),
                     np.array(temp), np.array(wind))


def write_externals(ext, path):
    def cell(x):
        return "" if np.isnan(x) else repr(float(x))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ts", "weather_code", "holiday", "temperature", "wind_speed"])
        for k in range(len(ext)):
            w.writerow([format_ts(ext.ts[k]), "" if ext.weather[k] < 0 else int(ext.weather[k]),
                        "" if np.isnan(ext.holiday[k]) else int(ext.holiday[k]),
                        cell(ext.temperature[k]), cell(ext.wind[k])])


# ---- datasets ----

@dataclass
class TrainingInstance:
    views: list          # five (N, C, l_v) arrays
    ext: np.ndarray
    meta: np.ndarray
    target: np.ndarray   # (N, C)
    t: int


@dataclass
class Dataset:
    """Instances stored as target indices over a shared scaled series."""
    values: np.ndarray          # scaled (T, N, C)
    ext: np.ndarray             # (T, E)
    meta: np.ndarray            # (T, M)
    cfg: ViewConfig
    targets: np.ndarray         # (K,) target indices
    horizon: int = 1
    index: list = field(default=None, repr=False)   # per view (K, l_v)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.index is None:
            self.index = _index_table(self.targets, self.cfg, self.horizon)

    def __len__(self):
        return len(self.targets)

    def subset(self, rows):
        rows = np.asarray(rows)
        if rows.dtype != bool:
            rows = rows.astype(np.int64)
        return Dataset(self.values, self.ext, self.meta, self.cfg, self.targets[rows],
                       self.horizon, [ix[rows] for ix in self.index])

    def batch(self, rows):
        """Node-first arrays: views (N, B, C*l_v), ext (B, E), meta (B, M), target (N, B, C)."""
        rows = np.asarray(rows)
        views = []
        for ix in self.index:
            g = self.values[ix[rows]]                 # (B, l_v, N, C)
            views.append(np.ascontiguousarray(g.transpose(2, 0, 3, 1)).reshape(
                self.values.shape[1], len(rows), -1))
        t = self.targets[rows]
        target = np.ascontiguousarray(self.values[t].transpose(1, 0, 2))
        return views, self.ext[t], self.meta[t], target

    def __getitem__(self, k):
        t = int(self.targets[k])
        return TrainingInstance(sample_views(self.values, t, self.cfg, self.horizon),
                                self.ext[t], self.meta[t], self.values[t], t)


def _index_table(targets, cfg, horizon):
    # same sets as view_indices, vectorized over targets
    if len(targets):
        view_indices(int(targets.min()), cfg, horizon)
    out = []
    for v in range(5):
        j = np.arange(1, cfg.lengths[v] + 1)
        base = targets - horizon + 1 if v == 0 else targets
        out.append(base[:, None] - j[None, :] * cfg.periods[v])
    return out


def make_dataset(values, ext, meta, cfg, horizon=1):
    """One instance per feasible target t."""
    values = np.asarray(values, dtype=np.float64)
    T = len(values)
    first = first_target(cfg, horizon)
    if first >= T:
        raise ValueError(f"series of {T} steps is too short for the view configuration")
    ext = np.zeros((T, 0)) if ext is None else np.asarray(ext, dtype=np.float64)
    return Dataset(values, ext, np.asarray(meta, dtype=np.float64), cfg,
                   np.arange(first, T), horizon)


def split_bounds(T, steps_per_week, weeks_test=4, weeks_val=4):
    """(val_start, test_start) timestep boundaries."""
    test_start = T - weeks_test * steps_per_week
    val_start = test_start - weeks_val * steps_per_week
    if val_start <= 0:
        raise ValueError(f"span too short: {T} steps cannot hold {weeks_val}+{weeks_test} weeks")
    return val_start, test_start


def split(dataset, steps_per_week=168, weeks_test=4, weeks_val=4):
    """Time-ordered (train, val, test); test is the final four weeks, val the four before."""
    val_start, test_start = split_bounds(len(dataset.values), steps_per_week, weeks_test, weeks_val)
    t = dataset.targets
    train = np.flatnonzero(t < val_start)
    if len(train) == 0:
        raise ValueError("span too short: no training targets before the validation weeks")
    return (dataset.subset(train),
            dataset.subset(np.flatnonzero((t >= val_start) & (t < test_start))),
            dataset.subset(np.flatnonzero(t >= test_start)))


@dataclass
class Prepared:
    train: Dataset
    val: Dataset
    test: Dataset
    scaler: Scaler
    encoder: ExternalEncoder
    series: FlowSeries


def prepare(series, externals=None, cfg=None, scale_range=(-1.0, 1.0), horizon=1,
            weeks_test=4, weeks_val=4):
    """Scale on the training span only, encode global views, build and split instances."""
    cfg = cfg or ViewConfig()
    val_start, _ = split_bounds(series.T, series.steps_per_week, weeks_test, weeks_val)
    scaler = Scaler.fit(series.values[:val_start], *scale_range)
    scaled = scaler.transform(series.values)
    if externals is None:
        externals = Externals.blank([series.timestamp(t) for t in range(series.T)])
    else:
        externals = externals.align(series)
    enc = ExternalEncoder.fit(externals, val_start)
    ds = make_dataset(scaled, enc.matrix(externals), meta_matrix(series), cfg, horizon)
    train, val, test = split(ds, series.steps_per_week, weeks_test, weeks_val)
    return Prepared(train, val, test, scaler, enc, series)

"""Synthetic city for desk-scale runs.

Hourly outflow of region i is

    base_i * (1 + daily + weekly + z + noise) * shock

where the daily profile is a sinusoid plus citywide hour-specific deviations
that persist from one day to the next, so the same hour yesterday says more
than the calendar alone. ``z`` is an AR(1) field diffused between nearby
regions, predictable from recent history and correlated by distance. The
shocks are citywide storms (a few hours at a low factor) and holidays.
Trips are spread over destinations in proportion to fixed OD probabilities
that favour nearby regions, plus a few long-range pairs whose traffic is high
but whose latent field is unrelated. Inflow is the column sum of the trips.
"""
from dataclasses import dataclass

import numpy as np

from .dataprep import Externals, FlowSeries
from .stg import haversine, parse_ts

STORM_CODE = 12


@dataclass(frozen=True)
class SynthConfig:
    n_regions: int = 20
    weeks: int = 12
    daily_amp: float = 0.5
    weekly_amp: float = 0.2
    diffusion: float = 0.6
    persistence: float = 0.98
    shock_prob: float = 0.03        # per day, for storms and for holidays
    shock_mag: float = 0.35         # storm multiplier (< 0.5)
    noise: float = 0.1
    white: float = 0.5              # share of the noise level that is unpredictable
    drift: float = 0.3              # daily-profile deviation innovations, in noise units
    drift_persistence: float = 0.9
    base: float = 40.0
    long_pairs: int = 3
    seed: int = 0
    start: str = "2016-01-04T00:00:00"   # a Monday

    def __post_init__(self):
        if self.weeks < 10:
            raise ValueError("weeks must be >= 10 so the 4 + 4 week splits leave training data")
        for k in ("daily_amp", "weekly_amp", "diffusion", "shock_prob", "noise", "white", "drift", "base"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if not all(0 <= x < 1 for x in (self.shock_mag, self.persistence, self.drift_persistence)):
            raise ValueError("shock_mag and persistence values must lie in [0, 1)")
        if self.n_regions < 2:
            raise ValueError("need at least two regions")


@dataclass
class SynthData:
    series: FlowSeries
    cube: np.ndarray           # (T, N, N) trip counts
    externals: Externals
    positions: np.ndarray      # (N, 2) lat, lon
    clamped: int               # outflow rates clamped at zero
    storms: np.ndarray         # timesteps inside a storm


def _largest_remainder(counts, probs):
    """Split integer ``counts`` (T, N) over destinations by ``probs`` (N, N), ties to lower index."""
    quota = counts[:, :, None] * probs[None]
    whole = np.floor(quota)
    left = counts - whole.sum(-1)
    frac = quota - whole
    rank = np.argsort(np.argsort(-frac, axis=-1, kind="stable"), axis=-1, kind="stable")
    return (whole + (rank < left[:, :, None])).astype(np.int64)


def synth_generate(cfg=SynthConfig()):
    rng = np.random.default_rng(cfg.seed)
    n, T = cfg.n_regions, cfg.weeks * 168
    pos = np.column_stack([rng.uniform(39.80, 40.05, n), rng.uniform(116.20, 116.55, n)])
    dist = haversine(pos)
    scale = np.median(dist[np.triu_indices(n, 1)])

    # latent field: AR(1) diffused by a distance kernel
    kern = np.exp(-(dist / (0.35 * scale)) ** 2)
    np.fill_diagonal(kern, 0.0)
    kern /= np.maximum(kern.sum(1, keepdims=True), 1e-12)
    mix = (1 - cfg.diffusion) * np.eye(n) + cfg.diffusion * kern
    z = np.zeros((T, n))
    eps = rng.normal(size=(T, n)) * cfg.noise
    for t in range(1, T):
        z[t] = cfg.persistence * (mix @ z[t - 1]) + eps[t]

    hours = np.arange(T)
    base = cfg.base * rng.uniform(0.6, 1.4, n)
    phase = rng.uniform(-2.0, 2.0, n)
    days = cfg.weeks * 7
    # citywide hour-of-day deviations of the profile, persistent from day to day
    dev = np.zeros((days, 24))
    for d in range(1, days):
        dev[d] = cfg.drift_persistence * dev[d - 1] + rng.normal(size=24) * cfg.noise * cfg.drift
    daily = cfg.daily_amp * np.sin(2 * np.pi * (hours[:, None] - 6.0 - phase[None]) / 24)
    daily = daily + dev.reshape(-1)[:, None]
    dow = (hours // 24) % 7
    weekly = cfg.weekly_amp * np.where(dow >= 5, -1.0, 0.4)[:, None] * np.ones(n)
    white = rng.normal(size=(T, n)) * cfg.noise * cfg.white

    # shocks: citywide storms and holidays, drawn per day
    shock = np.ones(T)
    storm = np.zeros(T, bool)
    holiday = np.zeros(T)
    storm_day = rng.random(days) < cfg.shock_prob
    hol_day = rng.random(days) < cfg.shock_prob
    for d in range(days):
        if hol_day[d]:
            shock[d * 24:(d + 1) * 24] *= 0.7
            holiday[d * 24:(d + 1) * 24] = 1.0
        if storm_day[d]:
            h0 = d * 24 + int(rng.integers(6, 20))
            h1 = min(h0 + int(rng.integers(2, 6)), T)
            shock[h0:h1] *= cfg.shock_mag
            storm[h0:h1] = True

    rate = base * (1.0 + daily + weekly + z + white) * shock[:, None]
    clamped = int((rate < 0).sum())
    out_counts = np.rint(np.maximum(rate, 0.0)).astype(np.int64)

    # OD probabilities: near regions plus a few long-range pairs
    pull = np.exp(-dist / (0.5 * scale))
    np.fill_diagonal(pull, 0.0)
    far = np.argsort(-dist[np.triu_indices(n, 1)])[:cfg.long_pairs]
    iu = np.triu_indices(n, 1)
    for k in far:
        i, j = iu[0][k], iu[1][k]
        pull[i, j] = pull[j, i] = pull[i].max() * 1.5
    probs = pull / pull.sum(1, keepdims=True)
    cube = _largest_remainder(out_counts, probs)

    values = np.stack([cube.sum(axis=1), cube.sum(axis=2)], axis=-1).astype(np.float64)
    start = parse_ts(cfg.start)
    ts = start + 3600 * hours
    weather = np.where(storm, STORM_CODE, rng.integers(0, 4, T))
    temp = 10 + 8 * np.sin(2 * np.pi * (hours - 9) / 24) + rng.normal(size=T)
    wind = np.abs(rng.normal(3, 1, T)) + 6 * storm
    ext = Externals(ts.astype(np.int64), weather.astype(np.int64), holiday, np.round(temp, 2),
                    np.round(wind, 2))
    return SynthData(FlowSeries(values, start, 3600), cube, ext, pos, clamped, np.flatnonzero(storm))

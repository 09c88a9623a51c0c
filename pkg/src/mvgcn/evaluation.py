"""Metrics, the seasonal-average baseline, sudden-change analysis and ablations."""
import csv
import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np

from . import model
from .dataprep import VIEW_NAMES, ViewConfig, prepare


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    mae: float
    count: int
    partition: str = "all"
    experiment: str = ""


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"prediction has {pred.size} values, truth has {truth.size}")
    if pred.size == 0:
        raise ValueError("cannot score an empty prediction")
    return pred, truth


def rmse(pred, truth):
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred, truth):
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def score(pred, truth, partition="all", experiment=""):
    return MetricReport(rmse(pred, truth), mae(pred, truth), int(np.size(truth)), partition, experiment)


# ---- baseline ----

def ha_predict(values, t, period=168):
    """Mean of every earlier X_s with s = t (mod period)."""
    values = np.asarray(values)
    if t < period:
        raise ValueError(f"no history for t={t}: needs a step one period ({period}) earlier")
    return values[t % period:t:period].mean(axis=0)


def ha_predictions(values, targets, period=168):
    return np.stack([ha_predict(values, int(t), period) for t in targets])


# ---- sudden changes ----

def sudden_change_split(values, fraction=0.05):
    """(sudden, normal) timesteps of 1..T-1 ranked by mean |X_t - X_{t-1}|.

    The top ceil(fraction * (T-1)) are sudden; equal scores go to the earlier t.
    """
    values = np.asarray(values, dtype=np.float64)
    T = len(values)
    if T < 2:
        raise ValueError("need at least two timesteps")
    diff = np.abs(values[1:] - values[:-1]).reshape(T - 1, -1).mean(axis=1)
    k = math.ceil(round(fraction * (T - 1), 9))
    order = np.lexsort((np.arange(1, T), -diff))   # by score desc, then t asc
    ts = np.arange(1, T)[order]
    return np.sort(ts[:k]), np.sort(ts[k:])


def partition_reports(pred, truth, targets, sudden, experiment=""):
    """Metrics over all targets and over the normal and sudden subsets."""
    targets = np.asarray(targets)
    flag = np.isin(targets, sudden)
    out = [score(pred, truth, "all", experiment)]
    for name, mask in (("normal", ~flag), ("sudden", flag)):
        if mask.any():
            out.append(score(pred[mask], truth[mask], name, experiment))
    return out


# ---- experiments ----

@dataclass
class RunResult:
    params: dict
    report: model.TrainReport
    test: MetricReport
    pred: np.ndarray       # unscaled (K, N, C)
    truth: np.ndarray
    targets: np.ndarray


def run_experiment(prepared, graph, cfg, name="mvgcn"):
    """Train on the prepared splits and score the test split in flow units."""
    params, report = model.train(prepared.train, prepared.val, graph, cfg, prepared.scaler)
    test = prepared.test
    pred = prepared.scaler.inverse(model.predict(params, test, graph.prop, cfg))
    truth = prepared.series.values[test.targets]
    return RunResult(params, report, score(pred, truth, "all", name), pred, truth, test.targets)


def multistep_eval(models, test_sets, prop, cfg, scaler, series, steps=None):
    """One report per horizon k; ``models[k]`` forecasts X_{t+k-1} from data before t."""
    steps = steps or sorted(test_sets)
    out = []
    for k in steps:
        if k not in models:
            raise KeyError(f"missing model for horizon {k}")
        ds = test_sets[k]
        pred = scaler.inverse(model.predict(models[k], ds, prop, cfg))
        out.append(score(pred, series.values[ds.targets], f"step {k}", "multistep"))
    return out


@dataclass(frozen=True)
class AblationSpec:
    name: str = "full"
    views: tuple = None          # view lengths; None keeps the base ones
    geoposition: bool = True
    external: bool = True
    meta: bool = True
    residual: bool = True
    units: int = None


def derive_seed(master, label):
    """Stable per-run seed from the master seed and a label."""
    h = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def ablation_run(spec, series, externals, graph, view_cfg, cfg, scale_range=(-1.0, 1.0)):
    """Train and test with the components named by ``spec`` switched off."""
    views = ViewConfig(spec.views, view_cfg.spans) if spec.views is not None else view_cfg
    if not spec.external and not spec.meta and not any(views.lengths):
        raise ValueError("ablation disables every input")
    run_cfg = replace(cfg, use_external=spec.external, use_meta=spec.meta, residual=spec.residual,
                      units=spec.units or cfg.units)
    g = graph if spec.geoposition else graph.without_geoposition()
    prepared = prepare(series, externals, views, scale_range)
    return run_experiment(prepared, g, run_cfg, spec.name)


# ---- reports ----

def write_report(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "partition", "rmse", "mae", "count"])
        for r in reports:
            w.writerow([r.experiment, r.partition, repr(r.rmse), repr(r.mae), r.count])


def read_report(path):
    with open(path, newline="") as fh:
        return [MetricReport(float(r["rmse"]), float(r["mae"]), int(r["count"]),
                             r["partition"], r["experiment"]) for r in csv.DictReader(fh)]


def format_table(reports):
    """Plain-text table, one line per (experiment, partition)."""
    rows = [("experiment", "partition", "RMSE", "MAE", "count")]
    rows += [(r.experiment, r.partition, f"{r.rmse:.4f}", f"{r.mae:.4f}", str(r.count)) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(5)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def view_label(lengths):
    return "+".join(VIEW_NAMES[v] for v in range(5) if lengths[v]) or "none"

"""Flat ``key = value`` run configuration with ``MVGCN_<KEY>`` environment overrides."""
import os
from dataclasses import dataclass, fields

from .dataprep import ViewConfig
from .model import ModelConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    t = str(text).strip().lower()
    return None if t in ("", "auto", "none") else float(t)


# key: (parser, default, help)
KEYS = {
    # files, relative to the working directory
    "flows": (str, "flows.dtn", "flow series tensor (T, N, C); header in <flows>.header.csv"),
    "externals": (str, "externals.csv", "external records: ts, weather_code, holiday, temperature, wind_speed"),
    "transitions": (str, "transitions.dtn", "transition cube tensor (T, N, N)"),
    "trips": (str, "trips.csv", "trip records, either layout"),
    "regions": (str, "regions.csv", "region_id, centroid_lat, centroid_lon, cell_count"),
    "cells": (str, "cells.csv", "row, col, region_id"),
    "graph": (str, "graph.csv", "edge list with header"),
    "checkpoint": (str, "model.ckpt", "trained parameters"),
    "train_log": (str, "train_log.csv", "per-epoch loss and validation RMSE"),
    "predictions": (str, "predictions.csv", "prediction export in flow units"),
    "report": (str, "report.csv", "metric report"),
    "heatmap": (str, "heatmap.csv", "per-region flows at one timestep"),
    "manifest": (str, "manifest.csv", "artifact hashes"),
    # data and views
    "seed": (int, 0, "master seed"),
    "interval": (int, 3600, "seconds per timestep"),
    "len_recent": (int, 3, "l_r"),
    "len_daily": (int, 3, "l_d"),
    "len_weekly": (int, 3, "l_w"),
    "len_monthly": (int, 3, "l_m"),
    "len_quarterly": (int, 3, "l_q"),
    "span_daily": (int, 24, "p_d"),
    "span_weekly": (int, 168, "p_w"),
    "span_monthly": (int, 720, "p_m"),
    "span_quarterly": (int, 2160, "p_q"),
    "output": (str, "tanh", "tanh (scale to [-1,1]) or sigmoid (scale to [0,1])"),
    "horizon": (int, 1, "forecast step k"),
    "weeks_test": (int, 4, "weeks in the test split"),
    "weeks_val": (int, 4, "weeks in the validation split"),
    # graph
    "alpha": (float, 3.0, "transition count threshold"),
    "beta": (float, 0.1, "valid-slice ratio threshold"),
    "theta": (_opt_float, None, "kernel scale in km; auto = std of edge distances"),
    "kappa": (_opt_float, None, "kernel cutoff in km; auto = 80th percentile of edge distances"),
    "distance": (str, "haversine", "haversine or euclidean"),
    "geoposition": (_bool, True, "weight edges by distance"),
    # model
    "hidden": (int, 32, "GCN width"),
    "units": (int, 3, "residual units"),
    "activation": (str, "relu", "hidden activation"),
    "delta": (float, 1.0, "Huber threshold"),
    "lr": (float, 3e-4, "Adam learning rate"),
    "batch": (int, 32, "batch size"),
    "epochs": (int, 1000, "maximum epochs"),
    "patience": (int, 50, "early-stopping patience"),
    "embed": (int, 10, "embed width per global view"),
    "residual": (_bool, True, "skip connections in the view networks"),
    "postnet": (str, "none", "none or linear"),
    "use_external": (_bool, True, "external global view"),
    "use_meta": (_bool, True, "meta global view"),
    # segmentation
    "dilate": (int, 2, "dilation iterations"),
    "min_cells": (int, 4, "regions smaller than this fold into a neighbour"),
    # synthetic data
    "synth_regions": (int, 20, "regions"),
    "synth_weeks": (int, 12, "weeks of hourly data"),
    "synth_daily_amp": (float, 0.5, "daily amplitude"),
    "synth_weekly_amp": (float, 0.2, "weekly amplitude"),
    "synth_diffusion": (float, 0.6, "latent diffusion strength"),
    "synth_shock_prob": (float, 0.03, "daily probability of storms and of holidays"),
    "synth_shock_mag": (float, 0.35, "storm multiplier"),
    "synth_noise": (float, 0.1, "noise level"),
    "synth_white": (float, 0.5, "share of the noise that is unpredictable"),
    "synth_persistence": (float, 0.98, "AR(1) coefficient of the latent field"),
    "synth_drift": (float, 0.3, "day-to-day innovations of the hourly profile, in noise units"),
    "synth_drift_persistence": (float, 0.9, "AR(1) coefficient of the hourly profile deviations"),
}


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def path(self, key, workdir="."):
        return os.path.join(workdir, self.values[key])

    @property
    def views(self):
        v = self.values
        try:
            return ViewConfig(
                (v["len_recent"], v["len_daily"], v["len_weekly"], v["len_monthly"], v["len_quarterly"]),
                (v["span_daily"], v["span_weekly"], v["span_monthly"], v["span_quarterly"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def scale_range(self):
        return (-1.0, 1.0) if self.values["output"] == "tanh" else (0.0, 1.0)

    def model(self, seed=None):
        v = self.values
        try:
            return ModelConfig(hidden=v["hidden"], units=v["units"], act=v["activation"],
                               out_act=v["output"], delta=v["delta"], lr=v["lr"], batch=v["batch"],
                               epochs=v["epochs"], patience=v["patience"], embed=v["embed"],
                               seed=v["seed"] if seed is None else seed, residual=v["residual"],
                               postnet=v["postnet"], use_external=v["use_external"],
                               use_meta=v["use_meta"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def synth(self):
        v = self.values
        names = {f.name for f in fields(SynthConfig)}
        kw = {k[6:]: val for k, val in v.items() if k.startswith("synth_") and k[6:] in names}
        kw["n_regions"] = v["synth_regions"]
        try:
            return SynthConfig(seed=v["seed"], **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def parse_text(text, source="config"):
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _check(values):
    if values["output"] not in ("tanh", "sigmoid"):
        raise ConfigError("output must be tanh or sigmoid")
    if values["distance"] not in ("haversine", "euclidean"):
        raise ConfigError("distance must be haversine or euclidean")
    if values["activation"] not in ("relu", "tanh", "sigmoid", "linear"):
        raise ConfigError(f"unknown activation {values['activation']!r}")


def load(path=None, env=None, overrides=None):
    """Defaults, then the file, then ``MVGCN_*`` variables, then ``overrides``."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw.update(parse_text(fh.read(), path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    env = os.environ if env is None else env
    for k, v in env.items():
        if k.startswith("MVGCN_") and k[6:].lower() in KEYS:
            raw[k[6:].lower()] = v
    raw.update(overrides or {})
    values = {k: d for k, (_, d, _) in KEYS.items()}
    for k, v in raw.items():
        if k not in KEYS:
            raise ConfigError(f"unknown config key {k!r}")
        try:
            values[k] = KEYS[k][0](v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from exc
    _check(values)
    return RunConfig(values)


def describe():
    """Key reference for ``--help``."""
    lines = []
    for k, (typ, default, text) in KEYS.items():
        tname = {str: "str", int: "int", float: "float", _bool: "bool", _opt_float: "float|auto"}[typ]
        lines.append(f"  {k} ({tname}, default {default}): {text}")
    return "\n".join(lines)

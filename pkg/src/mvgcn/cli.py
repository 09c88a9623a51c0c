"""Command line entry point: ``mvgcn <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 unknown command or bad usage,
3 invalid configuration. Errors are one line on stderr.
"""
import argparse
import csv
import hashlib
import math
import os
import sys

import numpy as np

from . import config as config_mod
from . import dataprep, evaluation, mapseg, model, stg, synth
from .numkit import dtn

COMMANDS = ("segment", "cluster", "build-graph", "prepare", "synth", "train", "predict",
            "evaluate", "ablate", "export-heatmap")

ABLATIONS = {
    "full": evaluation.AblationSpec("full"),
    "recent-only": evaluation.AblationSpec("recent-only", views=(3, 0, 0, 0, 0)),
    "recent+daily": evaluation.AblationSpec("recent+daily", views=(3, 3, 0, 0, 0)),
    "no-geo": evaluation.AblationSpec("no-geo", geoposition=False),
    "no-external": evaluation.AblationSpec("no-external", external=False),
    "no-meta": evaluation.AblationSpec("no-meta", meta=False),
    "plain": evaluation.AblationSpec("plain", residual=False),
}


class Context:
    def __init__(self, cfg, workdir, show):
        self.cfg = cfg
        self.workdir = workdir
        self.show = show
        self.written = []

    def path(self, key):
        return self.cfg.path(key, self.workdir)

    def wrote(self, *paths):
        self.written.extend(paths)

    def say(self, text):
        if self.show:
            print(text)


def _floats(text, n, name):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        vals = []
    if len(vals) != n:
        raise config_mod.ConfigError(f"--{name} needs {n} comma-separated numbers")
    return vals


def _bbox(text):
    return mapseg.BBox(*_floats(text, 4, "bbox"))


def _dims(text):
    return tuple(int(v) for v in _floats(text, 2, "dims"))


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def update_manifest(ctx):
    """Record every file written so far with its content hash."""
    path = ctx.path("manifest")
    rows = {}
    if os.path.exists(path):
        with open(path, newline="") as fh:
            rows = {r["path"]: r for r in csv.DictReader(fh)}
    for p in ctx.written:
        rel = os.path.relpath(p, ctx.workdir)
        rows[rel] = {"path": rel, "sha256": sha256_file(p), "bytes": os.path.getsize(p)}
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["path", "sha256", "bytes"])
        w.writeheader()
        for k in sorted(rows):
            w.writerow(rows[k])


# ---- shared loading ----

def _load_regions(ctx, bbox=None, dims=None):
    cells = ctx.path("cells")
    return mapseg.read_regions(ctx.path("regions"), cells if os.path.exists(cells) else None,
                               bbox, dims)


def _load_graph(ctx):
    positions = None
    if os.path.exists(ctx.path("regions")):
        positions = _load_regions(ctx).centroids
    return stg.read_graph(ctx.path("graph"), positions)


def _load_data(ctx):
    series = dataprep.read_series(ctx.path("flows"))
    ext = dataprep.read_externals(ctx.path("externals")) if os.path.exists(ctx.path("externals")) else None
    return series, ext


def _prepare(ctx, views=None):
    series, ext = _load_data(ctx)
    c = ctx.cfg
    return dataprep.prepare(series, ext, views or c.views, c.scale_range, c.horizon,
                            c.weeks_test, c.weeks_val)


# ---- commands ----

def cmd_segment(ctx, args):
    lines = mapseg.read_roads_csv(args.roads)
    grid = mapseg.rasterize_roads(lines, _bbox(args.bbox), _dims(args.dims))
    grid = mapseg.thin(mapseg.dilate(grid, ctx.cfg.dilate))
    rs = mapseg.label_regions(grid, _bbox(args.bbox))
    mapseg.write_regions(rs, ctx.path("regions"), ctx.path("cells"))
    ctx.wrote(ctx.path("regions"), ctx.path("cells"))
    ctx.say(f"regions {len(rs)}")


def _daily_profiles(series):
    per_day = 86400 // series.interval
    days = series.T // per_day
    if days < 1:
        raise ValueError("flow series shorter than one day")
    v = series.values[:days * per_day].sum(axis=2)               # (T, N)
    return v.reshape(days, per_day, -1).mean(axis=0).T           # (N, slots)


def cmd_cluster(ctx, args):
    rs = _load_regions(ctx, _bbox(args.bbox) if args.bbox else None,
                       _dims(args.dims) if args.dims else None)
    series = dataprep.read_series(ctx.path("flows"))
    if series.N != len(rs):
        raise ValueError(f"flow series has {series.N} regions, region file has {len(rs)}")
    profiles = _daily_profiles(series)
    if rs.labels.size:
        out = mapseg.cluster_regions(rs, profiles, args.target, ctx.cfg.min_cells)
    else:
        assign = mapseg.cluster_points(rs.centroids, profiles, args.target)
        out = mapseg.relabel(rs, assign)
    regions = os.path.join(ctx.workdir, args.out_regions)
    cells = os.path.join(ctx.workdir, args.out_cells)
    mapseg.write_regions(out, regions, cells)
    ctx.wrote(regions, cells)
    ctx.say(f"regions {len(rs)} -> {len(out)}")


def _trips_span(trips, interval):
    start = int(trips.start.min()) // interval * interval
    end = int(max(trips.start.max(), trips.end.max()))
    return start, (end - start) // interval + 1


def cmd_build_graph(ctx, args):
    c = ctx.cfg
    bbox = _bbox(args.bbox) if args.bbox else None
    rs = _load_regions(ctx, bbox, _dims(args.dims) if args.dims else None)
    if os.path.exists(ctx.path("transitions")):
        cube = dtn.read(ctx.path("transitions")).astype(np.int64)
        rejects = 0
    else:
        trips = stg.read_trips_csv(ctx.path("trips"))
        if len(trips) == 0:
            raise ValueError("no trips to build a graph from")
        start, n = _trips_span(trips, c.interval)
        cube, rejects = stg.count_transitions(trips, len(rs), c.interval, start, n, rs)
    if cube.shape[1] != len(rs):
        raise ValueError(f"transition cube has {cube.shape[1]} regions, region file has {len(rs)}")
    g = stg.build_graph(cube, rs.centroids, c.alpha, c.beta, c.theta, c.kappa, c.distance,
                        c.geoposition)
    stg.write_graph(g, ctx.path("graph"))
    ctx.wrote(ctx.path("graph"))
    ctx.say(f"nodes {g.n} edges {int(g.adjacency.sum() // 2)} theta {g.theta:.4g} "
            f"kappa {g.kappa:.4g} rejected trips {rejects}")


def cmd_prepare(ctx, args):
    c = ctx.cfg
    if not os.path.exists(ctx.path("flows")):
        rs = _load_regions(ctx, _bbox(args.bbox) if args.bbox else None,
                           _dims(args.dims) if args.dims else None)
        trips = stg.read_trips_csv(ctx.path("trips"))
        if len(trips) == 0:
            raise ValueError("no flow series and no trips to aggregate")
        start, n = _trips_span(trips, c.interval)
        series, tally = dataprep.aggregate_flows(trips, len(rs), c.interval, start, n, rs)
        dataprep.write_series(series, ctx.path("flows"))
        ctx.wrote(ctx.path("flows"), ctx.path("flows") + ".header.csv")
        ctx.say(f"trips {tally['total']} counted {tally['outflow']} intra {tally['intra']} "
                f"rejected {tally['rejects']}")
    prep = _prepare(ctx)
    path = os.path.join(ctx.workdir, args.out)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "first_t", "last_t", "count"])
        for name, ds in (("train", prep.train), ("val", prep.val), ("test", prep.test)):
            w.writerow([name, int(ds.targets.min()), int(ds.targets.max()), len(ds)])
    ctx.wrote(path)
    ctx.say(f"train {len(prep.train)} val {len(prep.val)} test {len(prep.test)}")


def cmd_synth(ctx, args):
    data = synth.synth_generate(ctx.cfg.synth())
    dataprep.write_series(data.series, ctx.path("flows"))
    dtn.write(ctx.path("transitions"), data.cube.astype(np.float64))
    dataprep.write_externals(data.externals, ctx.path("externals"))
    with open(ctx.path("regions"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id", "centroid_lat", "centroid_lon", "cell_count"])
        for i, (lat, lon) in enumerate(data.positions):
            w.writerow([i, repr(float(lat)), repr(float(lon)), 0])
    ctx.wrote(ctx.path("flows"), ctx.path("flows") + ".header.csv", ctx.path("transitions"),
              ctx.path("externals"), ctx.path("regions"))
    ctx.say(f"T {data.series.T} N {data.series.N} clamped {data.clamped} storm steps {len(data.storms)}")


def _header(ctx, prep, cfg):
    h = model.checkpoint_header(cfg, prep.train.cfg, prep.series.N, prep.series.C,
                                prep.train.ext.shape[1], prep.train.meta.shape[1])
    h.update(horizon=ctx.cfg.horizon, weeks_test=ctx.cfg.weeks_test, weeks_val=ctx.cfg.weeks_val,
             scaler={"min": prep.scaler.mn.tolist(), "max": prep.scaler.mx.tolist(),
                     "lo": prep.scaler.lo, "hi": prep.scaler.hi})
    return h


def cmd_train(ctx, args):
    prep = _prepare(ctx)
    g = _load_graph(ctx)
    if g.n != prep.series.N:
        raise ValueError(f"graph has {g.n} nodes, flow series has {prep.series.N} regions")
    if not ctx.cfg.geoposition:
        g = g.without_geoposition()
    cfg = ctx.cfg.model()
    params, report = model.train(prep.train, prep.val, g, cfg, prep.scaler)
    model.save_params(ctx.path("checkpoint"), params, _header(ctx, prep, cfg))
    with open(ctx.path("train_log"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_rmse"])
        for e, (l, v) in enumerate(zip(report.train_loss, report.val_rmse)):
            w.writerow([e, repr(l), repr(v)])
    ctx.wrote(ctx.path("checkpoint"), ctx.path("train_log"))
    ctx.say(f"epochs {report.epochs_run} best {report.best_epoch} "
            f"val rmse {report.val_rmse[report.best_epoch]:.4f} stop {report.stop_reason}")


def _restore(ctx):
    """Checkpoint parameters plus data prepared the way the checkpoint was trained."""
    params, header = model.load_params(ctx.path("checkpoint"))
    cfg, views = model.config_from_header(header)
    series, ext = _load_data(ctx)
    prep = dataprep.prepare(series, ext, views, (header["scaler"]["lo"], header["scaler"]["hi"]),
                            header["horizon"], header["weeks_test"], header["weeks_val"])
    expected = model.param_shapes(cfg, views, series.N, series.C, prep.train.ext.shape[1],
                                  prep.train.meta.shape[1])
    params, _ = model.load_params(ctx.path("checkpoint"), expected)
    g = _load_graph(ctx)
    if g.n != series.N:
        raise ValueError(f"graph has {g.n} nodes, flow series has {series.N} regions")
    if not ctx.cfg.geoposition:
        g = g.without_geoposition()
    return params, cfg, prep, g


def cmd_predict(ctx, args):
    params, cfg, prep, g = _restore(ctx)
    ds = getattr(prep, args.split)
    pred = prep.scaler.inverse(model.predict(params, ds, g.prop, cfg))
    truth = prep.series.values[ds.targets]
    model.write_predictions(ctx.path("predictions"), ds.targets, pred, truth)
    ctx.wrote(ctx.path("predictions"))
    ctx.say(f"predicted {len(ds)} timesteps")


def _read_pred_arrays(path):
    rows = model.read_predictions(path)
    ts = sorted({t for t, _ in rows})
    n = 1 + max(i for _, i in rows)
    arr = np.array([[rows[(t, i)] for i in range(n)] for t in ts])     # (K, N, 4)
    return np.array(ts), arr[..., :2], arr[..., 2:]


def cmd_evaluate(ctx, args):
    if not os.path.exists(ctx.path("predictions")):
        cmd_predict(ctx, args)
    targets, pred, truth = _read_pred_arrays(ctx.path("predictions"))
    series, _ = _load_data(ctx)
    sudden, _ = evaluation.sudden_change_split(series.values, args.fraction)
    period = series.steps_per_week
    ha = evaluation.ha_predictions(series.values, targets, period)
    reports = evaluation.partition_reports(pred, truth, targets, sudden, "mvgcn")
    reports += evaluation.partition_reports(ha, truth, targets, sudden, "ha")
    evaluation.write_report(ctx.path("report"), reports)
    table = os.path.splitext(ctx.path("report"))[0] + ".txt"
    with open(table, "w") as fh:
        fh.write(evaluation.format_table(reports))
    ctx.wrote(ctx.path("report"), table)
    ctx.say(evaluation.format_table(reports).rstrip())


def cmd_ablate(ctx, args):
    names = [s.strip() for s in args.specs.split(",") if s.strip()]
    unknown = [s for s in names if s not in ABLATIONS]
    if unknown:
        raise config_mod.ConfigError(f"unknown ablation {unknown[0]!r}; choose from {', '.join(ABLATIONS)}")
    series, ext = _load_data(ctx)
    g = _load_graph(ctx)
    reports = []
    for rep in range(args.seeds):
        seed = ctx.cfg.seed if rep == 0 else evaluation.derive_seed(ctx.cfg.seed, rep)
        cfg = ctx.cfg.model(seed)
        for name in names:
            r = evaluation.ablation_run(ABLATIONS[name], series, ext, g, ctx.cfg.views, cfg,
                                        ctx.cfg.scale_range)
            reports.append(evaluation.MetricReport(r.test.rmse, r.test.mae, r.test.count,
                                                   f"seed {seed}", name))
    evaluation.write_report(ctx.path("report"), reports)
    ctx.wrote(ctx.path("report"))
    ctx.say(evaluation.format_table(reports).rstrip())


def export_heatmap(pred_path, regions, t, out_path):
    """Predicted flows of the t-th predicted timestep (0-based) per region."""
    targets, pred, _ = _read_pred_arrays(pred_path)
    if not 0 <= t < len(targets):
        raise ValueError(f"t={t} outside the predicted range 0..{len(targets) - 1}")
    if pred.shape[1] != len(regions.regions):
        raise ValueError(f"predictions cover {pred.shape[1]} regions, region file has {len(regions.regions)}")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id", "centroid_lat", "centroid_lon", "inflow", "outflow"])
        for r in regions.regions:
            w.writerow([r.id, repr(float(r.centroid[0])), repr(float(r.centroid[1])),
                        repr(float(pred[t, r.id, 0])), repr(float(pred[t, r.id, 1]))])
    return int(targets[t])


def cmd_export_heatmap(ctx, args):
    series_t = export_heatmap(ctx.path("predictions"), _load_regions(ctx), args.t, ctx.path("heatmap"))
    ctx.wrote(ctx.path("heatmap"))
    ctx.say(f"heatmap for series timestep {series_t}")


HANDLERS = {
    "segment": cmd_segment, "cluster": cmd_cluster, "build-graph": cmd_build_graph,
    "prepare": cmd_prepare, "synth": cmd_synth, "train": cmd_train, "predict": cmd_predict,
    "evaluate": cmd_evaluate, "ablate": cmd_ablate, "export-heatmap": cmd_export_heatmap,
}


def build_parser():
    p = argparse.ArgumentParser(
        prog="mvgcn", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Region segmentation, graph construction and multi-view GCN flow forecasting.",
        epilog="config keys (file lines 'key = value', or env MVGCN_<KEY>):\n" + config_mod.describe())
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--workdir", default=".", help="directory holding every artifact")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key")
    p.add_argument("--print", dest="show", action="store_true", help="print a summary on stdout")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("segment", help="roads CSV to regions")
    s.add_argument("--roads", required=True)
    s.add_argument("--bbox", required=True, help="lat_min,lon_min,lat_max,lon_max")
    s.add_argument("--dims", default="240,240", help="H,W")
    s = sub.add_parser("cluster", help="merge regions by flow correlation")
    s.add_argument("--target", type=int, required=True)
    s.add_argument("--bbox")
    s.add_argument("--dims")
    s.add_argument("--out-regions", default="regions_clustered.csv")
    s.add_argument("--out-cells", default="cells_clustered.csv")
    for name in ("build-graph", "prepare"):
        s = sub.add_parser(name, help={"build-graph": "transitions to graph file",
                                       "prepare": "aggregate trips and check the splits"}[name])
        s.add_argument("--bbox", help="needed with coordinate trips")
        s.add_argument("--dims", help="needed with coordinate trips")
        if name == "prepare":
            s.add_argument("--out", default="splits.csv")
    sub.add_parser("synth", help="write a synthetic dataset")
    sub.add_parser("train", help="train and checkpoint")
    s = sub.add_parser("predict", help="predict one split in flow units")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s = sub.add_parser("evaluate", help="metrics against the HA baseline")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--fraction", type=float, default=0.05, help="share of sudden-change steps")
    s = sub.add_parser("ablate", help="train variants with components disabled")
    s.add_argument("--specs", default="full,recent-only,recent+daily,no-geo,no-external,no-meta,plain")
    s.add_argument("--seeds", type=int, default=1)
    s = sub.add_parser("export-heatmap", help="per-region flows at one predicted timestep")
    s.add_argument("--t", type=int, required=True, help="index into the predicted timesteps")
    return p


def _one_line(exc):
    text = " ".join(str(exc).split())
    return f"mvgcn: error: {type(exc).__name__}: {text}"


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise config_mod.ConfigError(f"--set needs KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        cfg = config_mod.load(args.config, overrides=overrides)
        cfg.views  # validate early
        cfg.model()
        os.makedirs(args.workdir, exist_ok=True)
        ctx = Context(cfg, args.workdir, args.show)
        HANDLERS[args.command](ctx, args)
        update_manifest(ctx)
    except config_mod.ConfigError as exc:
        print(_one_line(exc), file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - every failure becomes exit 1
        print(_one_line(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

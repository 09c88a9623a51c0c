"""Acceptance criteria 1-11, each printed as one PASS/FAIL line in the summary.

Criteria 6-9 train real models on the default synthetic city and take
several minutes on one core.
"""
import functools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mvgcn import cli, evaluation, kernels, mapseg, model, stg
from mvgcn.dataprep import ViewConfig, prepare, sample_views
from mvgcn.evaluation import AblationSpec
from mvgcn.numkit import SparseMatrix, const, finite_diff_grad, huber_loss, matmul, relative_error
from mvgcn.synth import SynthConfig, synth_generate
from oracles import (
    count_components8,
    flood_fill_labels,
    same_partition,
    spearman_reference,
    view_indices_reference,
)

SYNTH_VIEWS = ViewConfig((3, 3, 1, 0, 0))     # twelve weeks leave no room for monthly history
ABLATION_EPOCHS = 200
SEEDS = (0, 1, 2)


def criterion(number, title):
    """Run the body, record one summary line, then fail the test if the body did."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.time()
            try:
                ok, detail = fn(*args, **kwargs)
            except Exception as exc:
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            line = (f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} "
                    f"({detail}; {time.time() - start:.1f}s)")
            ACCEPTANCE_LINES.append(line)
            print(line)
            assert ok, line
        return run
    return wrap


# ---- 1 ----

def _grad_problem(seed, n=10, c=2, batch=2):
    rng = np.random.default_rng(seed)
    a = np.triu((rng.random((n, n)) < 0.4).astype(float), 1)
    g = stg.graph_from_adjacency(a + a.T, rng.uniform([39.9, 116.3], [40.0, 116.4], (n, 2)))
    views = ViewConfig((2, 2, 2, 2, 2))
    cfg = model.ModelConfig(seed=seed)
    params = model.init_params(cfg, views, n, c, 6, 32)
    data = ([rng.normal(size=(n, batch, c * 2)) for _ in range(5)], rng.random((batch, 6)),
            np.eye(32)[rng.integers(0, 32, batch)], rng.uniform(-1, 1, (n, batch, c)))
    return g, views, cfg, params, data


def _relu_margin(g, views, cfg, params, data, monkeypatch):
    """Smallest |input| of any relu in one forward pass."""
    seen = []
    orig = model.activation

    def record(x, name):
        if name == "relu":
            seen.append(float(np.abs(x.value).min()))
        return orig(x, name)

    with monkeypatch.context() as m:
        m.setattr(model, "activation", record)
        model.batch_loss(params, data, g.prop, cfg, views)
    return min(seen)


@criterion(1, "full-model gradient matches central differences")
def test_criterion_1_gradient_oracle(monkeypatch):
    h = 1e-5
    # central differences are meaningless across a relu kink, so draws with a
    # relu input closer to zero than 2h are skipped
    for seed in range(100):
        prob = _grad_problem(seed)
        if _relu_margin(*prob, monkeypatch) > 2 * h:
            break
    g, views, cfg, params, data = prob
    start = time.time()
    _, grads = model.loss_and_grads(params, data, g.prop, cfg, views)
    worst, count = 0.0, 0
    for name, value in params.items():
        num = finite_diff_grad(lambda x: model.batch_loss({**params, name: x}, data, g.prop, cfg, views),
                               value, h)
        worst = max(worst, float(relative_error(grads[name], num, 1e-6).max()))
        count += value.size
    elapsed = time.time() - start
    return worst < 1e-4 and elapsed < 60, (f"draw {seed}, {count} entries, max rel err {worst:.2e}, "
                                          f"{elapsed:.1f}s")


# ---- 2 ----

@criterion(2, "equation-exactness suite")
def test_criterion_2_equation_exactness():
    tol = 1e-12

    def huber(e, d=1.0):
        return float(huber_loss(const([e]), const([0.0]), d).value)

    checks = {
        "huber quadratic": abs(huber(0.5) - 0.125) <= tol,
        "huber linear": abs(huber(2.0) - 1.5) <= tol,
        "huber branches meet": all(abs(huber(d, d) - d * d / 2) <= tol and
                                   abs(huber(d * (1 + 1e-15), d) - d * d / 2) <= tol
                                   for d in (0.5, 1.0, 3.0)),
    }
    rng = np.random.default_rng(0)
    o = rng.normal(size=(4, 3, 2))
    out = model.fuse_global(const(o), const(np.zeros(o.shape)), "tanh").value
    checks["identity global fusion"] = np.abs(out - np.tanh(1.5 * o)).max() <= tol
    outs = [rng.normal(size=(4, 3, 2)) for _ in range(5)]
    ws = [np.ones((4, 2))] + [np.zeros((4, 2))] * 4
    sel = model.fuse_temporal([const(x) for x in outs], [const(w) for w in ws]).value
    checks["temporal fusion selector"] = np.abs(sel - outs[0]).max() <= tol
    theta = 1.7
    d = np.array([[0.0, math.sqrt(2) * theta, 5.0], [math.sqrt(2) * theta, 0.0, 1.0], [5.0, 1.0, 0.0]])
    w = stg.spatial_weights(theta=theta, kappa=4.0, dist=d)
    checks["kernel values"] = (abs(w[0, 0] - 1) <= tol and abs(w[0, 1] - math.exp(-1)) <= tol
                               and w[0, 2] == 0.0)
    p = stg.propagation_matrix(np.array([[0.0, 1.0], [1.0, 0.0]])).to_dense()
    checks["two-node propagation"] = np.abs(p - 0.5).max() <= tol
    bad = [k for k, v in checks.items() if not v]
    return not bad, f"{len(checks) - len(bad)}/{len(checks)} exact" + (f", failed {bad}" if bad else "")


# ---- 3 ----

@criterion(3, "propagation matrix symmetric with spectrum in [-1, 1]")
def test_criterion_3_spectrum():
    rng = np.random.default_rng(3)
    worst_sym, lo, hi = 0.0, np.inf, -np.inf
    for _ in range(50):
        n = int(rng.integers(1, 17))
        mask = np.triu(rng.random((n, n)) < rng.random(), 1)
        s = np.triu(rng.random((n, n)), 1) * mask
        p = stg.propagation_matrix(s + s.T).to_dense()
        worst_sym = max(worst_sym, float(np.abs(p - p.T).max()))
        ev = np.linalg.eigvalsh(p)
        lo, hi = min(lo, ev.min()), max(hi, ev.max())
    ok = worst_sym <= 1e-12 and lo >= -1 and hi <= 1 + 1e-9
    return ok, f"asymmetry {worst_sym:.1e}, eigenvalues in [{lo:.6f}, {hi:.12f}]"


# ---- 4 ----

@criterion(4, "oracle equivalences")
def test_criterion_4_oracles():
    rng = np.random.default_rng(4)
    labels_ok = True
    for _ in range(100):
        g = (rng.random((50, 50)) < rng.uniform(0.1, 0.7)).astype(np.uint8)
        lab, n = kernels.label_blank4(g)
        ref, rn = flood_fill_labels(g, 0, 4)
        lab8, n8 = kernels.label_fg8(g)
        ref8, rn8 = flood_fill_labels(g, 1, 8)
        labels_ok &= n == rn and same_partition(lab, ref) and n8 == rn8 and same_partition(lab8, ref8)
    rho_err = 0.0
    for _ in range(100):
        k = int(rng.integers(3, 60))
        x, y = rng.integers(0, 6, k).astype(float), rng.normal(size=k)
        if np.ptp(x) == 0:
            continue
        rho_err = max(rho_err, abs(mapseg.spearman(x, y) - spearman_reference(x, y)))
    views_ok = True
    values = np.arange(3000 * 2 * 2, dtype=float).reshape(3000, 2, 2)
    for _ in range(200):
        lengths = tuple(int(v) for v in rng.integers(0, 7, 5))
        if not any(lengths):
            continue
        spans = tuple(sorted(int(v) for v in rng.choice(np.arange(1, 400), 4, replace=False)))
        cfg = ViewConfig(lengths, spans)
        want = view_indices_reference(2999, lengths, spans)
        if min(i for v in want for i in v) < 0:
            continue
        got = sample_views(values, 2999, cfg)
        views_ok &= all(np.array_equal(got[v], values[want[v]].transpose(1, 2, 0)) if want[v]
                        else got[v].size == 0 for v in range(5))
    spmm_ok = True
    for _ in range(100):
        n, m, f = (int(v) for v in rng.integers(1, 40, 3))
        dense = np.round(rng.random((n, m)) * 10) * (rng.random((n, m)) < rng.random())
        x = np.round(rng.normal(size=(m, f)) * 10)
        spmm_ok &= np.array_equal(SparseMatrix.from_dense(dense).matmul(x),
                                  matmul(const(dense), const(x)).value)
    ok = labels_ok and rho_err <= 1e-12 and views_ok and spmm_ok
    return ok, (f"labels {'exact' if labels_ok else 'MISMATCH'}, spearman err {rho_err:.1e}, "
                f"views {'exact' if views_ok else 'MISMATCH'}, spmm {'exact' if spmm_ok else 'MISMATCH'}")


# ---- 5 ----

@criterion(5, "thinning keeps 8-components and stays inside its input")
def test_criterion_5_thin_safety():
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(50):
        seeds = (rng.random((60, 60)) < rng.uniform(0.01, 0.08)).astype(np.uint8)
        g = mapseg.dilate(seeds, int(rng.integers(1, 4)))
        t = mapseg.thin(g)
        if count_components8(t) != count_components8(g) or (t > g).any():
            bad += 1
    return bad == 0, f"{50 - bad}/50 rasters safe"


# ---- 6 to 9 ----

@pytest.fixture(scope="module")
def city():
    data = synth_generate(SynthConfig())
    return data, stg.build_graph(data.cube, data.positions)


@criterion(6, "MVGCN test RMSE at least 20% below HA")
def test_criterion_6_beats_ha(city):
    start = time.time()
    data, graph = city
    prep = prepare(data.series, data.externals, SYNTH_VIEWS)
    res = evaluation.run_experiment(prep, graph, model.ModelConfig())
    ha = evaluation.rmse(evaluation.ha_predictions(data.series.values, prep.test.targets),
                         data.series.values[prep.test.targets])
    elapsed = time.time() - start
    ratio = res.test.rmse / ha
    return ratio <= 0.8 and elapsed < 600, (f"MVGCN {res.test.rmse:.3f} vs HA {ha:.3f}, ratio {ratio:.3f}, "
                                           f"best epoch {res.report.best_epoch}")


@pytest.fixture(scope="module")
def ablations(city):
    """Test RMSE and final training loss per (variant, seed) at a fixed epoch budget."""
    data, graph = city
    specs = {
        "recent-only": AblationSpec("recent-only", views=(3, 0, 0, 0, 0)),
        "recent+daily": AblationSpec("recent+daily", views=(3, 3, 0, 0, 0)),
        "full": AblationSpec("full"),
        "no-geo": AblationSpec("no-geo", geoposition=False),
        "plain": AblationSpec("plain", residual=False),
    }
    out = {}
    for seed in SEEDS:
        cfg = model.ModelConfig(seed=seed, epochs=ABLATION_EPOCHS, patience=ABLATION_EPOCHS)
        for name, spec in specs.items():
            r = evaluation.ablation_run(spec, data.series, data.externals, graph, SYNTH_VIEWS, cfg)
            out[name, seed] = (r.test.rmse, r.report.train_loss[-1])
    return out


def _pairs(results, a, b, idx):
    return [(results[a, s][idx], results[b, s][idx]) for s in SEEDS]


@criterion(7, "recent-only RMSE above recent+daily RMSE")
def test_criterion_7_daily_view_helps(ablations):
    pairs = _pairs(ablations, "recent-only", "recent+daily", 0)
    return all(r > rd for r, rd in pairs), "; ".join(f"{r:.4f} > {rd:.4f}" for r, rd in pairs)


@criterion(8, "geoposition off does not improve RMSE")
def test_criterion_8_geoposition(ablations):
    pairs = _pairs(ablations, "no-geo", "full", 0)
    return all(off >= on for off, on in pairs), "; ".join(f"{off:.4f} >= {on:.4f}" for off, on in pairs)


@criterion(9, "residual final training loss at most the plain one at 5 layers")
def test_criterion_9_residual(ablations):
    pairs = _pairs(ablations, "full", "plain", 1)
    return all(res <= plain for res, plain in pairs), "; ".join(f"{a:.5f} <= {b:.5f}" for a, b in pairs)


# ---- 10 ----

@criterion(10, "same seed gives byte-identical checkpoints and reports")
def test_criterion_10_determinism(tmp_path):
    runs = []
    for name in ("a", "b"):
        work = tmp_path / name
        argv = ["--workdir", str(work), "--set", "epochs=5", "--set", "len_monthly=0",
                "--set", "len_quarterly=0", "--set", "len_weekly=1"]
        for cmd in (["synth"], ["build-graph"], ["train"], ["evaluate"]):
            if cli.main(argv + cmd) != 0:
                return False, f"command {cmd[0]} failed"
        runs.append({f: (work / f).read_bytes() for f in ("model.ckpt", "report.csv", "report.txt")})
    same = [f for f in runs[0] if runs[0][f] == runs[1][f]]
    return len(same) == 3, f"identical: {', '.join(same)}"


# ---- 11 ----

@criterion(11, "sudden-change split flags 5 steps including the spike")
def test_criterion_11_sudden_changes():
    rng = np.random.default_rng(11)
    values = 10 + rng.random((101, 4, 2))
    values[57] += 100.0
    sudden, normal = evaluation.sudden_change_split(values)
    truth = values[1:]
    pred = truth + rng.normal(size=truth.shape)
    reps = evaluation.partition_reports(pred, truth, np.arange(1, 101), sudden, "check")
    parts = {r.partition: r for r in reps}
    ok = (len(sudden) == 5 and 57 in sudden and len(normal) == 95
          and set(parts) == {"all", "normal", "sudden"}
          and all(math.isfinite(r.rmse) for r in reps))
    return ok, (f"sudden {sudden.tolist()}, RMSE all {parts['all'].rmse:.3f} "
                f"normal {parts['normal'].rmse:.3f} sudden {parts['sudden'].rmse:.3f}")

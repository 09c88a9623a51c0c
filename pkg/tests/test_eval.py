import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvgcn import evaluation, model, stg
from mvgcn.dataprep import ViewConfig, prepare
from mvgcn.evaluation import (
    AblationSpec,
    MetricReport,
    ablation_run,
    ha_predict,
    mae,
    partition_reports,
    rmse,
    run_experiment,
    sudden_change_split,
)
from mvgcn.model import ModelConfig
from mvgcn.synth import SynthConfig, synth_generate

QUICK = ModelConfig(hidden=8, units=1, embed=4, epochs=2, batch=64)


@pytest.fixture(scope="module")
def small():
    data = synth_generate(SynthConfig(n_regions=6, weeks=10, seed=5))
    return data, stg.build_graph(data.cube, data.positions)


# ---- metrics ----

def test_metric_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0 and mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([1.0, 1.0], [0.0, 2.0]) == 1.0 and mae([1.0, 1.0], [0.0, 2.0]) == 1.0
    assert rmse([5.0], [2.0]) == 3.0 and mae([5.0], [2.0]) == 3.0


def test_metric_errors():
    with pytest.raises(ValueError, match="empty"):
        rmse([], [])
    with pytest.raises(ValueError):
        mae([1.0, 2.0], [1.0])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 200))
def test_metrics_match_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=n) * 50, rng.normal(size=n) * 50
    sq = sum((a - b) ** 2 for a, b in zip(p.tolist(), t.tolist()))
    ab = sum(abs(a - b) for a, b in zip(p.tolist(), t.tolist()))
    assert abs(rmse(p, t) - math.sqrt(sq / n)) <= 1e-12 * max(1.0, math.sqrt(sq / n))
    assert abs(mae(p, t) - ab / n) <= 1e-12 * max(1.0, ab / n)


# ---- HA ----

def test_ha_examples():
    week = np.random.default_rng(0).integers(0, 50, (168, 3, 2)).astype(float)
    series = np.tile(week, (4, 1, 1))
    for t in (168, 300, 4 * 168 - 1):
        assert np.array_equal(ha_predict(series, t), series[t])
    v = np.zeros((3 * 168, 1, 1))
    v[5], v[173] = 2.0, 4.0
    assert ha_predict(v, 341)[0, 0] == 3.0
    with pytest.raises(ValueError, match="history"):
        ha_predict(v, 100)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.integers(168, 700))
def test_ha_ignores_other_phases(seed, t):
    rng = np.random.default_rng(seed)
    v = rng.random((720, 2, 2))
    other = np.flatnonzero(np.arange(t) % 168 != t % 168)
    shuffled = v.copy()
    shuffled[other] = v[rng.permutation(other)]
    assert np.array_equal(ha_predict(v, t), ha_predict(shuffled, t))


# ---- sudden changes ----

def test_sudden_split_examples():
    s, n = sudden_change_split(np.ones((101, 2, 2)))
    assert s.tolist() == [1, 2, 3, 4, 5] and len(n) == 95
    rng = np.random.default_rng(1)
    v = rng.random((101, 3, 2))
    v[60] += 50.0
    s, _ = sudden_change_split(v)
    assert len(s) == 5 and 60 in s


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(2, 400), f=st.floats(0.01, 0.5))
def test_sudden_split_partitions(seed, T, f):
    v = np.random.default_rng(seed).random((T, 2, 2))
    s, n = sudden_change_split(v, f)
    assert len(s) == math.ceil(round(f * (T - 1), 9))
    assert not set(s) & set(n) and sorted(set(s) | set(n)) == list(range(1, T))


def test_sudden_split_needs_two_steps():
    with pytest.raises(ValueError):
        sudden_change_split(np.zeros((1, 2, 2)))


def test_partition_reports():
    truth = np.zeros((4, 2, 2))
    pred = truth.copy()
    pred[2] = 1.0
    reps = partition_reports(pred, truth, np.array([10, 11, 12, 13]), [12], "x")
    got = {r.partition: r for r in reps}
    assert got["sudden"].rmse == 1.0 and got["normal"].rmse == 0.0
    assert got["all"].count == 16 and got["sudden"].count == 4


# ---- experiments ----

def test_metrics_are_in_flow_units(small):
    data, g = small
    prep = prepare(data.series, data.externals, ViewConfig((2, 1, 0, 0, 0)))
    res = run_experiment(prep, g, QUICK)
    scaled = model.predict(res.params, prep.test, g.prop, QUICK)
    assert res.test.rmse == rmse(prep.scaler.inverse(scaled), data.series.values[prep.test.targets])
    assert np.abs(prep.scaler.inverse(prep.scaler.transform(res.truth)) - res.truth).max() < 1e-9
    assert res.test.rmse > 1.0     # scaled errors would be far below one


def test_full_ablation_equals_standard_run(small):
    data, g = small
    views = ViewConfig((2, 1, 0, 0, 0))
    std = run_experiment(prepare(data.series, data.externals, views), g, QUICK, "full")
    abl = ablation_run(AblationSpec("full"), data.series, data.externals, g, views, QUICK)
    assert abl.test == std.test
    assert all(np.array_equal(abl.params[k], std.params[k]) for k in std.params)


def test_geo_off_uses_unweighted_normalization(small):
    _, g = small
    plain = g.without_geoposition()
    assert np.array_equal(plain.prop.to_dense(), stg.propagation_matrix(g.adjacency).to_dense())
    assert (plain.omega == 1).all()


def test_ablation_that_disables_everything():
    spec = AblationSpec("none", views=(0, 0, 0, 0, 0), external=False, meta=False)
    with pytest.raises(ValueError):
        ablation_run(spec, None, None, None, ViewConfig(), QUICK)


def test_multistep_single_horizon_equals_single_step(small):
    data, g = small
    views = ViewConfig((2, 1, 0, 0, 0))
    prep = prepare(data.series, data.externals, views)
    res = run_experiment(prep, g, QUICK)
    reps = evaluation.multistep_eval({1: res.params}, {1: prep.test}, g.prop, QUICK,
                                     prep.scaler, data.series)
    assert len(reps) == 1 and reps[0].rmse == res.test.rmse and reps[0].mae == res.test.mae
    with pytest.raises(KeyError):
        evaluation.multistep_eval({}, {1: prep.test}, g.prop, QUICK, prep.scaler, data.series)


def test_multistep_identical_models_on_periodic_data():
    data = synth_generate(SynthConfig(n_regions=5, weeks=10, noise=0.0, shock_prob=0.0, seed=2))
    g = stg.build_graph(data.cube, data.positions)
    views = ViewConfig((0, 1, 1, 0, 0))        # no recent view: inputs do not depend on k
    tests = {k: prepare(data.series, None, views, horizon=k).test for k in (1, 2, 3)}
    prep = prepare(data.series, None, views)
    params = model.init_params(QUICK, views, 5, 2, tests[1].ext.shape[1], tests[1].meta.shape[1])
    reps = evaluation.multistep_eval({k: params for k in tests}, tests, g.prop, QUICK,
                                     prep.scaler, data.series)
    assert len({r.rmse for r in reps}) == 1


def test_derive_seed_is_stable():
    assert evaluation.derive_seed(0, 1) == evaluation.derive_seed(0, 1)
    assert evaluation.derive_seed(0, 1) != evaluation.derive_seed(0, 2)


@pytest.mark.slow
def test_multistep_error_grows_with_horizon():
    data = synth_generate(SynthConfig())
    g = stg.build_graph(data.cube, data.positions)
    views = ViewConfig((3, 3, 1, 0, 0))
    cfg = ModelConfig(epochs=120)
    models, tests = {}, {}
    for k in range(1, 7):
        prep = prepare(data.series, data.externals, views, horizon=k)
        models[k], _ = model.train(prep.train, prep.val, g, cfg, prep.scaler)
        tests[k] = prep.test
    reps = evaluation.multistep_eval(models, tests, g.prop, cfg, prep.scaler, data.series)
    errs = [r.rmse for r in reps]
    print("per-step RMSE", " ".join(f"{e:.3f}" for e in errs))
    assert all(b >= 0.95 * a for a, b in zip(errs, errs[1:]))


# ---- reports ----

def test_report_round_trip_and_table(tmp_path):
    reps = [MetricReport(1.25, 0.5, 10, "all", "mvgcn"), MetricReport(2.0, 1.0, 4, "sudden", "ha")]
    evaluation.write_report(tmp_path / "r.csv", reps)
    assert evaluation.read_report(tmp_path / "r.csv") == reps
    table = evaluation.format_table(reps)
    assert "mvgcn" in table and "1.2500" in table and len(table.splitlines()) == 4
    assert evaluation.view_label((3, 3, 0, 0, 0)) == "recent+daily"

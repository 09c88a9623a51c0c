import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvgcn import model
from mvgcn.dataprep import Dataset, ViewConfig
from mvgcn.model import (
    CheckpointError,
    DivergenceError,
    ModelConfig,
    embed_global,
    forward,
    fuse_global,
    fuse_temporal,
    init_params,
    loss_and_grads,
    residual_unit,
    sgc_layer,
    view_net,
)
from mvgcn.numkit import SparseMatrix, Tape, const, finite_diff_grad, huber_loss, relative_error
from mvgcn.stg import propagation_matrix


def random_prop(rng, n, density=0.4):
    a = np.triu((rng.random((n, n)) < density) * rng.random((n, n)), 1)
    return propagation_matrix(a + a.T)


def problem(seed=0, n=5, c=2, lengths=(2, 1, 1, 0, 0), b=3, ext_dim=4, meta_dim=6, **cfg_kw):
    rng = np.random.default_rng(seed)
    views = ViewConfig(lengths)
    cfg = ModelConfig(hidden=6, units=2, embed=3, seed=seed, **cfg_kw)
    params = init_params(cfg, views, n, c, ext_dim, meta_dim)
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}
    inputs = [rng.normal(size=(n, b, c * l)) for l in lengths]
    batch = (inputs, rng.normal(size=(b, ext_dim)), rng.random((b, meta_dim)),
             rng.uniform(-0.9, 0.9, (n, b, c)))
    return cfg, views, params, batch, random_prop(rng, n)


def run_forward(params, batch, prop, cfg, views):
    inputs, ext, meta, _ = batch
    p = {k: const(v) for k, v in params.items()}
    return forward([const(x) for x in inputs], const(ext), const(meta), prop, p, cfg, views).value


# ---- layers ----

def test_sgc_layer_examples():
    h = np.abs(np.random.default_rng(0).normal(size=(4, 1, 3)))
    eye = SparseMatrix.identity(4)
    assert np.array_equal(sgc_layer(const(h), eye, const(np.eye(3)), "relu").value, h)
    assert not sgc_layer(const(h), eye, const(np.zeros((3, 2))), "relu").value.any()
    half = SparseMatrix.from_dense(np.full((2, 2), 0.5))
    out = sgc_layer(const(np.array([[2.0, 0.0], [0.0, 2.0]])), half, const(np.eye(2)), "relu")
    assert np.array_equal(out.value, [[1.0, 1.0], [1.0, 1.0]])


def test_sgc_layer_dimension_mismatch():
    with pytest.raises(ValueError):
        sgc_layer(const(np.ones((3, 2))), SparseMatrix.identity(3), const(np.ones((4, 2))), "relu")
    with pytest.raises(ValueError):
        sgc_layer(const(np.ones((3, 2))), SparseMatrix.identity(4), const(np.ones((2, 2))), "relu")


def test_residual_unit_examples():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(5, 2, 4))
    prop = random_prop(rng, 5)
    assert np.array_equal(residual_unit(const(h), prop, const(np.zeros((4, 4))), "relu").value, h)
    w = rng.normal(size=(4, 4))
    out = residual_unit(const(h), prop, const(w), "relu").value
    assert np.array_equal(out - h, (h + sgc_layer(const(h), prop, const(w), "relu").value) - h)


def test_residual_unit_gradient():
    rng = np.random.default_rng(2)
    h = rng.normal(size=(6, 2, 4))
    prop = random_prop(rng, 6)
    w0 = rng.normal(size=(4, 4))
    target = rng.normal(size=h.shape)

    def loss(w):
        return huber_loss(residual_unit(const(h), prop, const(w), "tanh"), const(target)).value

    tape = Tape()
    w = tape.leaf(w0, "w")
    grads = tape.backward(huber_loss(residual_unit(const(h), prop, w, "tanh"), const(target)))
    assert relative_error(grads["w"], finite_diff_grad(loss, w0), 1e-6).max() < 1e-4


def test_view_net_examples():
    cfg = ModelConfig(hidden=1, units=1)
    params = {"recent.in": np.array([[3.0]]), "recent.res0": np.array([[0.5]]),
              "recent.out": np.array([[2.0]])}
    one = SparseMatrix.identity(1)
    # relu(2*3) = 6; 6 + relu(6*0.5) = 9; 9*2 = 18
    out = view_net(const(np.array([[[2.0]]])), one, {k: const(v) for k, v in params.items()},
                   "recent", cfg)
    assert out.value.item() == 18.0
    zeros = {k: const(np.zeros_like(v)) for k, v in params.items()}
    assert view_net(const(np.array([[[2.0]]])), one, zeros, "recent", cfg).value.item() == 0.0


def test_embed_global_examples():
    cfg = ModelConfig(embed=1)
    params = {"embed.ext": const([[1.0]]), "embed.meta": const([[-1.0]]),
              "embed.con": const(np.arange(1.0, 9.0).reshape(2, 4))}
    # ext -> relu(2) = 2, meta -> relu(-3) = 0, then [2, 0] @ W_c = [2, 4, 6, 8]
    out = embed_global(const([[2.0]]), const([[3.0]]), params, 2, 2, cfg)
    assert np.array_equal(out.value[:, 0], [[2.0, 4.0], [6.0, 8.0]])
    zero = {k: const(np.zeros(v.shape)) for k, v in params.items()}
    assert not embed_global(const([[2.0]]), const([[3.0]]), zero, 2, 2, cfg).value.any()
    assert embed_global(const([[2.0]]), const([[3.0]]), {}, 2, 2, cfg) is None


def test_embed_gradient_through_reshape():
    rng = np.random.default_rng(3)
    cfg = ModelConfig(embed=3, act="tanh")
    ext, meta = rng.normal(size=(4, 5)), rng.normal(size=(4, 2))
    base = {"embed.ext": rng.normal(size=(5, 3)), "embed.meta": rng.normal(size=(2, 3)),
            "embed.con": rng.normal(size=(6, 6))}
    target = rng.normal(size=(3, 4, 2))

    def objective(p):
        return huber_loss(embed_global(const(ext), const(meta), p, 3, 2, cfg), const(target))

    tape = Tape()
    grads = tape.backward(objective({k: tape.leaf(v, k) for k, v in base.items()}))
    for name, value in base.items():
        def f(x, name=name):
            return objective({k: const(x if k == name else v) for k, v in base.items()}).value
        assert relative_error(grads[name], finite_diff_grad(f, value), 1e-6).max() < 1e-4


def test_fuse_temporal_examples():
    o1 = np.random.default_rng(4).normal(size=(3, 2, 2))
    others = [np.ones((3, 2, 2)) * k for k in (2, 3, 4, 5)]
    ws = [np.ones((3, 2))] + [np.zeros((3, 2))] * 4
    out = fuse_temporal([const(o) for o in [o1] + others], [const(w) for w in ws])
    assert np.array_equal(out.value, o1)
    zero = fuse_temporal([const(np.zeros((3, 2, 2)))] * 5, [const(np.ones((3, 2)))] * 5)
    assert not zero.value.any()
    small = fuse_temporal([const([[[2.0]]]), const([[[3.0]]])], [const([[0.5]]), const([[1.0]])])
    assert small.value.item() == 4.0


def test_fuse_global_examples():
    o = np.random.default_rng(5).normal(size=(4, 2, 2)) * 3
    out = fuse_global(const(o), const(np.zeros(o.shape)), "tanh").value
    assert np.abs(out - np.tanh(1.5 * o)).max() <= 1e-12
    assert np.abs(fuse_global(const(o), None, "tanh").value - np.tanh(1.5 * o)).max() <= 1e-12
    con = np.random.default_rng(6).normal(size=o.shape)
    assert np.array_equal(fuse_global(const(np.zeros(o.shape)), const(con), "tanh").value, np.tanh(con))
    big = fuse_global(const(o * 100), const(con * 100), "tanh").value
    assert (np.abs(big) <= 1).all()


# ---- huber ----

def huber(e, delta=1.0):
    return huber_loss(const([e]), const([0.0]), delta).value


def test_huber_examples():
    assert huber(0.0) == 0.0
    assert abs(huber(0.5) - 0.125) <= 1e-12
    assert abs(huber(2.0) - 1.5) <= 1e-12
    for d in (0.3, 1.0, 2.5):
        assert abs(huber(d, d) - d * d / 2) <= 1e-12
        assert abs((d * abs(d) - d * d / 2) - d * d / 2) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(e=st.floats(-1e3, 1e3), delta=st.floats(0.01, 10))
def test_huber_nonnegative_and_symmetric(e, delta):
    assert huber(e, delta) >= 0
    assert huber(e, delta) == huber(-e, delta)


# ---- forward ----

def test_forward_all_zero_params_give_zero():
    cfg, views, params, batch, prop = problem()
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    assert not run_forward(zeros, batch, prop, cfg, views).any()


def test_forward_equals_hand_composition():
    cfg, views, params, batch, prop = problem(seed=7)
    inputs, ext, meta, _ = batch
    p = {k: const(v) for k, v in params.items()}
    names = ("recent", "daily", "weekly")
    outs = [view_net(const(inputs[v]), prop, p, names[v], cfg) for v in range(3)]
    o = fuse_temporal(outs, [p[f"fuse.{k}"] for k in names])
    con = embed_global(const(ext), const(meta), p, 5, 2, cfg)
    want = fuse_global(o, con, "tanh").value
    assert np.array_equal(run_forward(params, batch, prop, cfg, views), want)


def test_forward_without_globals_is_scaled_temporal_fusion():
    cfg, views, params, batch, prop = problem(seed=8)
    inputs, ext, meta, target = batch
    params = {k: (np.zeros_like(v) if k.startswith("embed") else v) for k, v in params.items()}
    batch = (inputs, np.zeros_like(ext), np.zeros_like(meta), target)
    p = {k: const(v) for k, v in params.items()}
    outs = [view_net(const(inputs[v]), prop, p, n, cfg) for v, n in enumerate(("recent", "daily", "weekly"))]
    o = fuse_temporal(outs, [p["fuse.recent"], p["fuse.daily"], p["fuse.weekly"]]).value
    assert np.array_equal(run_forward(params, batch, prop, cfg, views), np.tanh(1.5 * o))


def test_postnet_linear_adds_a_trainable_matrix():
    cfg, views, params, batch, prop = problem(seed=9, postnet="linear")
    assert params["post"].shape == (2, 2)
    params["post"] = np.eye(2)
    plain = {k: v for k, v in params.items() if k != "post"}
    base = replace(cfg, postnet="none")
    assert np.array_equal(run_forward(params, batch, prop, cfg, views),
                          run_forward(plain, batch, prop, base, views))


def test_zero_length_views_have_no_parameters():
    cfg = ModelConfig()
    shapes = model.param_shapes(cfg, ViewConfig((3, 0, 2, 0, 0)), 4, 2, 3, 32)
    assert not any(k.startswith(("daily", "monthly", "quarterly", "fuse.daily")) for k in shapes)
    params = init_params(cfg, ViewConfig((3, 0, 2, 0, 0)), 4, 2, 3, 32)
    assert np.array_equal(params["fuse.recent"], np.full((4, 2), 0.5))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_forward_permutation_equivariance(seed):
    cfg, views, params, batch, prop = problem(seed=seed % 1000, n=6)
    inputs, ext, meta, target = batch
    perm = np.random.default_rng(seed).permutation(6)
    dense = prop.to_dense()
    pprop = SparseMatrix.from_dense(dense[np.ix_(perm, perm)])
    pp = dict(params)
    for k in params:
        if k.startswith("fuse."):
            pp[k] = params[k][perm]
    # the global projection emits node-major (N*C) columns
    cols = (perm[:, None] * 2 + np.arange(2)).ravel()
    pp["embed.con"] = params["embed.con"][:, cols]
    pbatch = ([x[perm] for x in inputs], ext, meta, target[perm])
    out = run_forward(params, batch, prop, cfg, views)
    pout = run_forward(pp, pbatch, pprop, cfg, views)
    assert np.allclose(pout, out[perm], atol=1e-12)


def test_full_gradient_small_problem():
    cfg, views, params, batch, prop = problem(seed=10, n=4, b=2)
    _, grads = loss_and_grads(params, batch, prop, cfg, views)
    for name, value in params.items():
        def f(x, name=name):
            return model.batch_loss({**params, name: x}, batch, prop, cfg, views)
        num = finite_diff_grad(f, value)
        assert relative_error(grads[name], num, 1e-6).max() < 1e-4, name


# ---- training ----

def tiny_dataset(seed=0, n=3, repeat=64, T=40):
    rng = np.random.default_rng(seed)
    values = rng.uniform(-0.8, 0.8, (T, n, 2))
    cfg = ViewConfig((2, 1, 0, 0, 0), (24, 168, 720, 2160))
    ds = Dataset(values, rng.random((T, 2)), rng.random((T, 3)), cfg, [30] * repeat)
    return ds, random_prop(rng, n)


def test_overfit_single_instance():
    ds, prop = tiny_dataset()
    cfg = ModelConfig(hidden=16, units=1, embed=4, epochs=500, patience=500, batch=32)
    _, report = model.train(ds, ds.subset([0]), prop, cfg)
    assert min(report.train_loss) < 0.01 * report.train_loss[0]


def test_patience_counts_from_best(monkeypatch):
    ds, prop = tiny_dataset(repeat=4)
    monkeypatch.setattr(model, "_val_rmse", lambda *a: 1.0)
    cfg = ModelConfig(hidden=4, units=1, embed=2, epochs=500, patience=50)
    _, report = model.train(ds, ds.subset([0]), prop, cfg)
    assert report.best_epoch == 0 and report.epochs_run == 51
    assert report.stop_reason == "patience"


def test_max_epochs_stop():
    ds, prop = tiny_dataset(repeat=4)
    cfg = ModelConfig(hidden=4, units=1, embed=2, epochs=3)
    _, report = model.train(ds, ds.subset([0]), prop, cfg)
    assert report.epochs_run == 3 and report.stop_reason == "max_epochs"
    assert report.best_epoch <= 2


def test_training_is_deterministic():
    ds, prop = tiny_dataset(repeat=20)
    cfg = ModelConfig(hidden=8, units=2, embed=2, epochs=5, batch=8, seed=3)
    p1, r1 = model.train(ds, ds.subset([0, 1]), prop, cfg)
    p2, r2 = model.train(ds, ds.subset([0, 1]), prop, cfg)
    assert r1.to_dict() == r2.to_dict()
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)


def test_divergence_raises_with_report():
    ds, prop = tiny_dataset(repeat=4)
    ds.values[29] = np.nan
    with pytest.raises(DivergenceError) as info:
        model.train(ds, ds.subset([0]), prop, ModelConfig(hidden=4, units=1, embed=2, epochs=2))
    assert info.value.report.stop_reason == "diverged"


def test_train_rejects_empty_splits():
    ds, prop = tiny_dataset(repeat=4)
    with pytest.raises(ValueError, match="non-empty"):
        model.train(ds, ds.subset([]), prop, ModelConfig(epochs=1))


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(units=0)
    with pytest.raises(ValueError):
        ModelConfig(delta=0)
    with pytest.raises(ValueError):
        ModelConfig(postnet="mlp")


# ---- checkpoints ----

def test_checkpoint_round_trip(tmp_path):
    cfg, views, params, _, _ = problem(seed=11)
    header = model.checkpoint_header(cfg, views, 5, 2, 4, 6)
    path = tmp_path / "m.ckpt"
    model.save_params(path, params, header)
    back, head = model.load_params(path, model.param_shapes(cfg, views, 5, 2, 4, 6))
    assert set(back) == set(params)
    assert all(back[k].tobytes() == params[k].tobytes() for k in params)
    assert head["config_hash"] == cfg.digest() and head["N"] == 5 and head["seed"] == cfg.seed
    assert model.config_from_header(head) == (cfg, views)


def test_truncated_checkpoint(tmp_path):
    cfg, views, params, _, _ = problem(seed=12)
    path = tmp_path / "m.ckpt"
    model.save_params(path, params, model.checkpoint_header(cfg, views, 5, 2, 4, 6))
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CheckpointError, match="corrupt|truncat"):
        model.load_params(path)


def test_checkpoint_dimension_mismatch_names_tensor(tmp_path):
    cfg, views, params, _, _ = problem(seed=13)
    path = tmp_path / "m.ckpt"
    model.save_params(path, params, model.checkpoint_header(cfg, views, 5, 2, 4, 6))
    with pytest.raises(CheckpointError, match="fuse.recent"):
        model.load_params(path, model.param_shapes(cfg, views, 7, 2, 4, 6))


def test_prediction_csv_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    pred, truth = rng.random((3, 4, 2)), rng.random((3, 4, 2))
    model.write_predictions(tmp_path / "p.csv", [10, 11, 12], pred, truth)
    rows = model.read_predictions(tmp_path / "p.csv")
    assert len(rows) == 12
    assert rows[(11, 2)] == [pred[1, 2, 0], pred[1, 2, 1], truth[1, 2, 0], truth[1, 2, 1]]
    assert math.isfinite(sum(sum(r) for r in rows.values()))

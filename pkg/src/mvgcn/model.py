"""The multi-view graph convolutional forecaster and its training loop.

Batches use a node-first layout: a view input is (N, B, C*l_v), so the
sparse propagation matrix acts on the leading axis and every dense weight
acts on the trailing one.
"""
import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataprep import VIEW_NAMES, ViewConfig
from .numkit import (
    AdamState,
    Tape,
    Var,
    activation,
    adam_step,
    add,
    concat,
    const,
    dtn,
    huber_loss,
    matmul,
    mul,
    reshape,
    spmm,
    transpose,
)


class DivergenceError(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 32
    units: int = 3               # residual units M; total GCN layers M + 2
    act: str = "relu"
    out_act: str = "tanh"
    delta: float = 1.0
    lr: float = 3e-4
    batch: int = 32
    epochs: int = 1000
    patience: int = 50
    embed: int = 10
    seed: int = 0
    residual: bool = True
    postnet: str = "none"        # "none" or "linear"
    use_external: bool = True
    use_meta: bool = True

    def __post_init__(self):
        if self.units < 1 or self.hidden < 1 or self.embed < 1:
            raise ValueError("units, hidden and embed widths must be >= 1")
        if self.delta <= 0:
            raise ValueError("huber delta must be positive")
        if self.postnet not in ("none", "linear"):
            raise ValueError(f"postnet must be 'none' or 'linear', got {self.postnet!r}")
        if self.batch < 1 or self.epochs < 0 or self.patience < 1 or self.lr <= 0:
            raise ValueError("batch, epochs, patience and lr must be positive")

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---- parameters ----

def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def param_shapes(cfg, views, n, c, ext_dim, meta_dim):
    """Ordered ``{name: shape}`` for the enabled components."""
    shapes = {}
    for v in views.active:
        name = VIEW_NAMES[v]
        shapes[f"{name}.in"] = (c * views.lengths[v], cfg.hidden)
        for m in range(cfg.units):
            shapes[f"{name}.res{m}"] = (cfg.hidden, cfg.hidden)
        shapes[f"{name}.out"] = (cfg.hidden, c)
    for v in views.active:
        shapes[f"fuse.{VIEW_NAMES[v]}"] = (n, c)
    width = 0
    if cfg.use_external and ext_dim:
        shapes["embed.ext"] = (ext_dim, cfg.embed)
        width += cfg.embed
    if cfg.use_meta and meta_dim:
        shapes["embed.meta"] = (meta_dim, cfg.embed)
        width += cfg.embed
    if width:
        shapes["embed.con"] = (width, n * c)
    if cfg.postnet == "linear":
        shapes["post"] = (c, c)
    return shapes


def init_params(cfg, views, n, c, ext_dim, meta_dim, seed=None):
    """Glorot-uniform weights; fusion matrices start as a plain average of the views."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    k = len(views.active)
    out = {}
    for name, shape in param_shapes(cfg, views, n, c, ext_dim, meta_dim).items():
        if name.startswith("fuse."):
            out[name] = np.full(shape, 1.0 / k)
        else:
            out[name] = _glorot(rng, *shape)
    return out


# ---- layers ----

def sgc_layer(h, prop, w, act):
    """act(prop . h . w); h is (N, ..., F_in)."""
    return activation(spmm(prop, matmul(h, w)), act)


def residual_unit(h, prop, w, act):
    return add(h, sgc_layer(h, prop, w, act))


def view_net(x, prop, params, name, cfg):
    """Input projection, M residual (or plain) units, linear output projection."""
    h = sgc_layer(x, prop, params[f"{name}.in"], cfg.act)
    for m in range(cfg.units):
        w = params[f"{name}.res{m}"]
        h = residual_unit(h, prop, w, cfg.act) if cfg.residual else sgc_layer(h, prop, w, cfg.act)
    return sgc_layer(h, prop, params[f"{name}.out"], "linear")


def embed_global(ext, meta, params, n, c, cfg):
    """(B, E), (B, M) -> O_con (N, B, C); ``None`` when no global view is enabled."""
    outs = []
    if "embed.ext" in params:
        outs.append(activation(matmul(ext, params["embed.ext"]), cfg.act))
    if "embed.meta" in params:
        outs.append(activation(matmul(meta, params["embed.meta"]), cfg.act))
    if not outs:
        return None
    z = outs[0] if len(outs) == 1 else concat(outs, axis=1)
    flat = matmul(z, params["embed.con"])                       # (B, N*C)
    b = flat.shape[0]
    return transpose(reshape(flat, (b, n, c)), (1, 0, 2))


def fuse_temporal(outputs, weights):
    """Sum of W_v * O_v over the views present; O_v (N, B, C), W_v (N, C)."""
    total = None
    for o, w in zip(outputs, weights):
        n, c = w.shape
        term = mul(reshape(w, (n, 1, c)), o)
        total = term if total is None else add(total, term)
    return total


def fuse_global(o, o_con, out_act, post=None):
    """out_act(O + O_con + sigmoid(O_con) * O)."""
    if o_con is None:
        o_con = const(np.zeros(o.shape))
    z = add(add(o, o_con), mul(activation(o_con, "sigmoid"), o))
    if post is not None:
        z = matmul(z, post)
    return activation(z, out_act)


def forward(views_in, ext, meta, prop, params, cfg, view_cfg):
    """Batched prediction (N, B, C) from node-first view inputs."""
    outs, ws = [], []
    for v in view_cfg.active:
        name = VIEW_NAMES[v]
        outs.append(view_net(views_in[v], prop, params, name, cfg))
        ws.append(params[f"fuse.{name}"])
    o = fuse_temporal(outs, ws)
    n, _, c = o.shape
    o_con = embed_global(ext, meta, params, n, c, cfg)
    return fuse_global(o, o_con, cfg.out_act, params.get("post"))


def _as_vars(batch):
    views, ext, meta, target = batch
    return [const(x) for x in views], const(ext), const(meta), target


def forward_instance(inst, prop, params, cfg, view_cfg):
    """Prediction (N, C) for one TrainingInstance."""
    n = inst.target.shape[0]
    views = [const(x.reshape(n, 1, -1)) for x in inst.views]
    p = {k: const(v) for k, v in params.items()}
    out = forward(views, const(inst.ext[None]), const(inst.meta[None]), prop, p, cfg, view_cfg)
    return out.value[:, 0]


def loss_and_grads(params, batch, prop, cfg, view_cfg):
    """Summed Huber loss of one batch and its gradient for every parameter."""
    tape = Tape()
    p = {k: tape.leaf(v, k) for k, v in params.items()}
    views, ext, meta, target = _as_vars(batch)
    pred = forward(views, ext, meta, prop, p, cfg, view_cfg)
    loss = huber_loss(pred, const(target), cfg.delta)
    return float(loss.value), tape.backward(loss)


def batch_loss(params, batch, prop, cfg, view_cfg):
    views, ext, meta, target = _as_vars(batch)
    p = {k: const(v) for k, v in params.items()}
    pred = forward(views, ext, meta, prop, p, cfg, view_cfg)
    return float(huber_loss(pred, const(target), cfg.delta).value)


def predict(params, dataset, prop, cfg, chunk=512):
    """Scaled predictions (K, N, C) for every instance of ``dataset``."""
    p = {k: const(v) for k, v in params.items()}
    out = []
    for s in range(0, len(dataset), chunk):
        rows = np.arange(s, min(s + chunk, len(dataset)))
        views, ext, meta, _ = _as_vars(dataset.batch(rows))
        pred = forward(views, ext, meta, prop, p, cfg, dataset.cfg)
        out.append(pred.value.transpose(1, 0, 2))
    if not out:
        return np.zeros((0,) + dataset.values.shape[1:])
    return np.concatenate(out)


# ---- training ----

@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)   # mean per-instance loss each epoch
    val_rmse: list = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def epochs_run(self):
        return len(self.train_loss)

    def to_dict(self):
        return asdict(self)


def _val_rmse(params, val, prop, cfg, scaler):
    pred = predict(params, val, prop, cfg)
    truth = val.values[val.targets]
    if scaler is not None:
        pred, truth = scaler.inverse(pred), scaler.inverse(truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def train(train_set, val_set, graph, cfg, scaler=None, params=None, log=None):
    """Mini-batch Adam on the summed Huber loss with early stopping on validation RMSE.

    Returns the parameters of the best validation epoch and the report.
    The only randomness is the seeded initialization and the per-epoch
    shuffle of the training split, so equal seeds give equal results.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation splits must be non-empty")
    prop = graph.prop if hasattr(graph, "prop") else graph
    n, c = train_set.values.shape[1:]
    view_cfg = train_set.cfg
    if params is None:
        params = init_params(cfg, view_cfg, n, c, train_set.ext.shape[1], train_set.meta.shape[1])
    shuffle = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    report = TrainReport()
    best = (np.inf, params)
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(train_set))
        total = 0.0
        for s in range(0, len(order), cfg.batch):
            loss, grads = loss_and_grads(params, train_set.batch(order[s:s + cfg.batch]),
                                         prop, cfg, view_cfg)
            if not np.isfinite(loss):
                report.stop_reason = "diverged"
                raise DivergenceError(f"non-finite loss at epoch {epoch}", report)
            total += loss
            params, state = adam_step(params, grads, state, cfg.lr)
        report.train_loss.append(total / len(order))
        score = _val_rmse(params, val_set, prop, cfg, scaler)
        report.val_rmse.append(score)
        if score < best[0]:
            best = (score, params)
            report.best_epoch = epoch
        if log is not None:
            log(epoch, report.train_loss[-1], score)
        if epoch - report.best_epoch >= cfg.patience:
            report.stop_reason = "patience"
            break
    else:
        report.stop_reason = "max_epochs"
    return best[1], report


# ---- checkpoints ----

def checkpoint_header(cfg, view_cfg, n, c, ext_dim, meta_dim):
    return {"format": "mvgcn-params", "version": 1, "config_hash": cfg.digest(),
            "config": asdict(cfg), "N": n, "C": c, "view_lengths": list(view_cfg.lengths),
            "spans": list(view_cfg.spans), "ext_dim": ext_dim, "meta_dim": meta_dim,
            "seed": cfg.seed}


def save_params(path, params, header):
    dtn.save_bundle(path, params, header)


def load_params(path, expected=None):
    """Load a checkpoint; ``expected`` maps names to shapes and is checked tensor by tensor."""
    try:
        params, header = dtn.load_bundle(path)
    except dtn.CorruptFileError as exc:
        raise CheckpointError(str(exc)) from exc
    if header.get("format") != "mvgcn-params" or header.get("version") != 1:
        raise CheckpointError(f"unsupported checkpoint version in {path}")
    if expected is not None:
        for name, shape in expected.items():
            if name not in params:
                raise CheckpointError(f"checkpoint is missing tensor {name}")
            if tuple(params[name].shape) != tuple(shape):
                raise CheckpointError(f"dimension mismatch for tensor {name}: checkpoint "
                                      f"{tuple(params[name].shape)}, model {tuple(shape)}")
        extra = sorted(set(params) - set(expected))
        if extra:
            raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]}")
    return params, header


def config_from_header(header):
    cfg = ModelConfig(**header["config"])
    views = ViewConfig(tuple(header["view_lengths"]), tuple(header["spans"]))
    return cfg, views


def write_predictions(path, targets, pred, truth):
    """CSV ``t, region_id, inflow_pred, outflow_pred, inflow_true, outflow_true`` in flow units."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "region_id", "inflow_pred", "outflow_pred", "inflow_true", "outflow_true"])
        for k, t in enumerate(targets):
            for i in range(pred.shape[1]):
                w.writerow([int(t), i, repr(float(pred[k, i, 0])), repr(float(pred[k, i, 1])),
                            repr(float(truth[k, i, 0])), repr(float(truth[k, i, 1]))])


def read_predictions(path):
    rows = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows[(int(r["t"]), int(r["region_id"]))] = [float(r[k]) for k in (
                "inflow_pred", "outflow_pred", "inflow_true", "outflow_true")]
    return rows

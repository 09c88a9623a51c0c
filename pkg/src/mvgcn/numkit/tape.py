"""Reverse-mode differentiation over a flat, topologically ordered tape.

Only the primitives the forecasting model needs are provided. A ``Var``
whose ``tape`` is ``None`` is a plain constant: operations on constants just
compute values, so the same model code serves for training (recording) and
inference (not recording).

    tape = Tape()
    x = tape.leaf(np.array(3.0), "x")
    loss = mul(x, x)
    tape.backward(loss)["x"]   # -> 6.0
"""
from dataclasses import dataclass, field

import numpy as np


class TapeError(Exception):
    pass


class Var:
    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape=None, node=None):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={np.shape(self.value)}, node={self.node})"


@dataclass
class Node:
    op: str
    inputs: tuple
    attrs: dict
    value: np.ndarray
    name: str = None


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def leaf(self, value, name=None):
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), {}, value, name))
        return Var(value, self, len(self.nodes) - 1)

    def _lift(self, v):
        if v.tape is self:
            return v.node
        if v.tape is not None:
            raise TapeError("operands recorded on different tapes")
        return self.leaf(v.value).node

    def record(self, op, inputs, attrs, value):
        ids = tuple(self._lift(v) for v in inputs)
        self.nodes.append(Node(op, ids, attrs, value))
        return Var(value, self, len(self.nodes) - 1)

    def params(self):
        return {n.name: i for i, n in enumerate(self.nodes) if n.op == "leaf" and n.name}

    def backward(self, loss, wrt=None):
        """Gradients of scalar ``loss`` w.r.t. every named leaf.

        Returns ``{name: grad}``; leaves the loss does not depend on get
        zeros. The tape itself is not modified.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("loss node was not recorded on this tape")
        if loss.node is None or not 0 <= loss.node < len(self.nodes):
            raise TapeError(f"unrecorded node id {loss.node}")
        if np.size(loss.value) != 1:
            raise TapeError(f"backward needs a scalar seed, got shape {np.shape(loss.value)}")
        grads = {loss.node: np.ones_like(loss.value)}
        for k in range(loss.node, -1, -1):
            g = grads.get(k)
            node = self.nodes[k]
            if g is None or node.op == "leaf":
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            ins = OPS[node.op][1](g, node.value, *vals, **node.attrs)
            for i, gi in zip(node.inputs, ins):
                if gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        names = self.params() if wrt is None else {n: self.params()[n] for n in wrt}
        return {n: grads.get(i, np.zeros_like(self.nodes[i].value)) for n, i in names.items()}

    def replay(self, overrides=None):
        """Recompute every node from the leaves; returns the list of values.

        ``overrides`` maps leaf names to substitute values. Recorded values
        are left as they were.
        """
        overrides = overrides or {}
        vals = []
        for node in self.nodes:
            if node.op == "leaf":
                vals.append(np.asarray(overrides.get(node.name, node.value), dtype=np.float64)
                            if node.name else node.value)
            else:
                args = [vals[i] for i in node.inputs]
                vals.append(OPS[node.op][0](*args, **node.attrs))
        return vals


def _apply(op, inputs, **attrs):
    vals = [v.value for v in inputs]
    out = OPS[op][0](*vals, **attrs)
    tape = next((v.tape for v in inputs if v.tape is not None), None)
    if tape is None:
        return Var(out)
    return tape.record(op, inputs, attrs, out)


def const(value):
    return Var(np.asarray(value, dtype=np.float64))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# forward and vector-Jacobian product for each primitive

def _matmul_f(a, b):
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def _matmul_b(g, out, a, b):
    a2 = a.reshape(-1, a.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return g @ b.T, a2.T @ g2


def _spmm_f(x, s):
    return s.matmul(x)


def _spmm_b(g, out, x, s):
    return (s.T.matmul(g),)


def _add_f(a, b):
    return a + b


def _add_b(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _mul_f(a, b):
    return a * b


def _mul_b(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


ACTIVATIONS = ("relu", "tanh", "sigmoid", "linear")


def _act_f(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "linear":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def _act_b(g, out, x, kind):
    if kind == "relu":
        return (g * (x > 0),)
    if kind == "tanh":
        return (g * (1.0 - out * out),)
    if kind == "sigmoid":
        return (g * out * (1.0 - out),)
    return (g,)


def _reshape_f(x, shape):
    return x.reshape(shape)


def _reshape_b(g, out, x, shape):
    return (g.reshape(x.shape),)


def _transpose_f(x, axes):
    return np.ascontiguousarray(x.transpose(axes))


def _transpose_b(g, out, x, axes):
    return (g.transpose(np.argsort(axes)),)


def _concat_f(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _concat_b(g, out, *xs, axis):
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _sum_f(x):
    return np.asarray(x.sum())


def _sum_b(g, out, x):
    return (np.broadcast_to(g, x.shape).copy(),)


def _huber_f(pred, target, delta):
    e = np.abs(pred - target)
    quad = np.minimum(e, delta)
    # 0.5*q^2 + delta*(e - q) equals both branches
    return np.asarray((0.5 * quad * quad + delta * (e - quad)).sum())


def _huber_b(g, out, pred, target, delta):
    return g * np.clip(pred - target, -delta, delta), None


OPS = {
    "matmul": (_matmul_f, _matmul_b),
    "spmm": (_spmm_f, _spmm_b),
    "add": (_add_f, _add_b),
    "mul": (_mul_f, _mul_b),
    "act": (_act_f, _act_b),
    "reshape": (_reshape_f, _reshape_b),
    "transpose": (_transpose_f, _transpose_b),
    "concat": (_concat_f, _concat_b),
    "sum": (_sum_f, _sum_b),
    "huber": (_huber_f, _huber_b),
}


def matmul(a, b):
    """``a @ b`` with ``b`` 2-d; leading axes of ``a`` act as batch."""
    return _apply("matmul", (a, b))


def spmm(s, x):
    """Sparse ``s`` (constant) times dense ``x`` along x's first axis."""
    return _apply("spmm", (x,), s=s)


def add(a, b):
    return _apply("add", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def activation(x, kind):
    return _apply("act", (x,), kind=kind)


def reshape(x, shape):
    return _apply("reshape", (x,), shape=tuple(shape))


def transpose(x, axes):
    return _apply("transpose", (x,), axes=tuple(axes))


def concat(xs, axis):
    return _apply("concat", tuple(xs), axis=axis)


def total(x):
    return _apply("sum", (x,))


def huber_loss(pred, target, delta=1.0):
    """Summed Huber loss; gradient flows to ``pred`` only."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    return _apply("huber", (pred, target), delta=float(delta))

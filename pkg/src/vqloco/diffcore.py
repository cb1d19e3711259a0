"""Tape-based reverse-mode autodiff over dense float64 arrays.

A :class:`Graph` is an append-only list of nodes. Ops are evaluated eagerly as
they are recorded, so building a graph is also its first forward pass;
:meth:`Graph.forward` replays the tape with new input bindings and
:meth:`Graph.backward` fills in adjoints from a scalar seed.

Parameters are registered by name (``graph.param(name, array)``) and are
deduplicated, so a network applied at every step of an unrolled rollout
accumulates its gradient into a single leaf.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GraphError",
    "Node",
    "Graph",
    "Mlp",
    "AdamState",
    "adam_step",
    "clip_by_global_norm",
    "params_digest",
    "params_to_json",
    "params_from_json",
    "adam_to_json",
    "adam_from_json",
]

DTYPE = np.float64


class GraphError(ValueError):
    """Raised for malformed graph operations; names the offending node."""

    def __init__(self, message, node_index=None, op=None):
        self.node_index = node_index
        self.op = op
        where = f"node {node_index} ({op})" if node_index is not None else (op or "graph")
        super().__init__(f"{where}: {message}")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _log_softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


# Each op: forward(values, attrs) -> array; backward(g, values, out, attrs) -> tuple of parent grads.

def _fw_matmul(vals, attrs):
    a, b = vals
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ValueError(f"matmul shapes {a.shape} @ {b.shape}")
    return a @ b


def _bw_matmul(g, vals, out, attrs):
    a, b = vals
    if b.ndim == 1:
        ga = np.multiply.outer(g, b)
        gb = np.tensordot(a, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
        return ga, gb
    ga = g @ np.swapaxes(b, -1, -2)
    if a.ndim == 1:
        gb = np.multiply.outer(a, g)
    else:
        gb = np.swapaxes(a, -1, -2) @ g
        gb = gb.reshape(-1, *b.shape).sum(axis=0) if gb.ndim > b.ndim else gb
    return _unbroadcast(ga, a.shape), gb


def _fw_sum(vals, attrs):
    return np.sum(vals[0], axis=attrs["axis"], keepdims=attrs["keepdims"])


def _bw_sum(g, vals, out, attrs):
    (x,) = vals
    axis = attrs["axis"]
    if axis is not None and not attrs["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _fw_concat(vals, attrs):
    return np.concatenate(vals, axis=attrs["axis"])


def _bw_concat(g, vals, out, attrs):
    axis = attrs["axis"]
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _is_basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)


def _unique_fancy(key):
    """True for keys with a single duplicate-free integer array among slices."""
    parts = key if isinstance(key, tuple) else (key,)
    arrays = [k for k in parts if isinstance(k, np.ndarray)]
    if len(arrays) != 1 or arrays[0].dtype.kind not in "iu" or arrays[0].ndim != 1:
        return False
    if not all(isinstance(k, (slice, np.ndarray)) or k is Ellipsis for k in parts):
        return False
    return len(np.unique(arrays[0])) == len(arrays[0])


def _bw_getitem(g, vals, out, attrs):
    full = np.zeros_like(vals[0])
    key = attrs["key"]
    if _is_basic_key(key) or attrs.get("unique", False):
        full[key] += g
    else:
        np.add.at(full, key, g)
    return (full,)


def _bw_gather(g, vals, out, attrs):
    table, = vals
    full = np.zeros_like(table)
    np.add.at(full, attrs["indices"], g)
    return (full,)


def _bw_clip(g, vals, out, attrs):
    x = vals[0]
    mask = (x >= attrs["lo"]) & (x <= attrs["hi"])
    return (g * mask,)


def _bw_log_softmax(g, vals, out, attrs):
    axis = attrs["axis"]
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


_OPS = {
    "add": (lambda v, a: v[0] + v[1],
            lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape))),
    "sub": (lambda v, a: v[0] - v[1],
            lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape))),
    "mul": (lambda v, a: v[0] * v[1],
            lambda g, v, o, a: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape))),
    "div": (lambda v, a: v[0] / v[1],
            lambda g, v, o, a: (_unbroadcast(g / v[1], v[0].shape),
                                _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape))),
    "neg": (lambda v, a: -v[0], lambda g, v, o, a: (-g,)),
    "matmul": (_fw_matmul, _bw_matmul),
    "tanh": (lambda v, a: np.tanh(v[0]), lambda g, v, o, a: (g * (1.0 - o * o),)),
    "elu": (lambda v, a: _elu(v[0]), lambda g, v, o, a: (g * np.where(v[0] > 0, 1.0, o + 1.0),)),
    "exp": (lambda v, a: np.exp(v[0]), lambda g, v, o, a: (g * o,)),
    "log": (lambda v, a: np.log(v[0]), lambda g, v, o, a: (g / v[0],)),
    "sqrt": (lambda v, a: np.sqrt(v[0]), lambda g, v, o, a: (g * 0.5 / o,)),
    "square": (lambda v, a: v[0] * v[0], lambda g, v, o, a: (2.0 * g * v[0],)),
    "abs": (lambda v, a: np.abs(v[0]), lambda g, v, o, a: (g * np.sign(v[0]),)),
    "sum": (_fw_sum, _bw_sum),
    "concat": (_fw_concat, _bw_concat),
    "stop_gradient": (lambda v, a: v[0].copy(), lambda g, v, o, a: (None,)),
    "gather_rows": (lambda v, a: v[0][a["indices"]], _bw_gather),
    "getitem": (lambda v, a: np.array(v[0][a["key"]], dtype=DTYPE), _bw_getitem),
    "reshape": (lambda v, a: v[0].reshape(a["shape"]), lambda g, v, o, a: (g.reshape(v[0].shape),)),
    "clip": (lambda v, a: np.clip(v[0], a["lo"], a["hi"]), _bw_clip),
    "log_softmax": (lambda v, a: _log_softmax(v[0], a["axis"]), _bw_log_softmax),
}

_LEAVES = ("input", "param", "const")


class Node:
    """One recorded value. Arithmetic operators record new nodes on the same graph."""

    __slots__ = ("graph", "index", "op", "parents", "attrs", "value", "grad", "name")

    def __init__(self, graph, index, op, parents, attrs, value, name=None):
        self.graph = graph
        self.index = index
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = value
        self.grad = None
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.index}, {self.op}{label}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other):
        return other if isinstance(other, Node) else self.graph.const(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    def __radd__(self, other):
        return self.graph.add(self._lift(other), self)

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.graph.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.mul(self._lift(other), self)

    def __truediv__(self, other):
        return self.graph.div(self, self._lift(other))

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))

    def __getitem__(self, key):
        return self.graph.getitem(self, key)


class Graph:
    """Append-only computation record supporting replay and reverse-mode sweeps."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: dict[str, Node] = {}
        self._inputs: dict[str, Node] = {}

    def __len__(self):
        return len(self.nodes)

    # -- leaves ---------------------------------------------------------------

    def _leaf(self, op, value, name=None):
        node = Node(self, len(self.nodes), op, (), {}, value, name)
        self.nodes.append(node)
        return node

    def input(self, name, value):
        if name in self._inputs:
            raise GraphError(f"input {name!r} already bound", op="input")
        node = self._leaf("input", np.asarray(value, dtype=DTYPE), name)
        self._inputs[name] = node
        return node

    def param(self, name, array):
        """Register (or fetch) a named parameter leaf. The array is referenced, not copied."""
        node = self._params.get(name)
        if node is not None:
            if node.value is not array:
                raise GraphError(f"parameter {name!r} rebound to a different array", node.index, "param")
            return node
        node = self._leaf("param", array, name)
        self._params[name] = node
        return node

    def const(self, value):
        return self._leaf("const", np.asarray(value, dtype=DTYPE))

    # -- op recording ------------------------------------------------------------

    def _record(self, op, parents, **attrs):
        for p in parents:
            if p.graph is not self:
                raise GraphError("operand belongs to another graph", len(self.nodes), op)
        index = len(self.nodes)
        fwd = _OPS[op][0]
        try:
            with np.errstate(all="ignore"):
                value = fwd([p.value for p in parents], attrs)
        except (ValueError, IndexError, TypeError) as exc:
            shapes = [p.shape for p in parents]
            raise GraphError(f"{exc} (operand shapes {shapes})", index, op) from exc
        node = Node(self, index, op, tuple(parents), attrs, np.asarray(value, dtype=DTYPE))
        self.nodes.append(node)
        return node

    def add(self, a, b):
        return self._record("add", (a, b))

    def sub(self, a, b):
        return self._record("sub", (a, b))

    def mul(self, a, b):
        return self._record("mul", (a, b))

    def div(self, a, b):
        return self._record("div", (a, b))

    def neg(self, a):
        return self._record("neg", (a,))

    def matmul(self, a, b):
        return self._record("matmul", (a, b))

    def tanh(self, a):
        return self._record("tanh", (a,))

    def elu(self, a):
        return self._record("elu", (a,))

    def exp(self, a):
        return self._record("exp", (a,))

    def log(self, a):
        return self._record("log", (a,))

    def sqrt(self, a):
        return self._record("sqrt", (a,))

    def square(self, a):
        return self._record("square", (a,))

    def abs(self, a):
        return self._record("abs", (a,))

    def sum(self, a, axis=None, keepdims=False):
        return self._record("sum", (a,), axis=axis, keepdims=keepdims)

    def mean(self, a, axis=None):
        count = a.value.size if axis is None else a.value.shape[axis]
        return self.sum(a, axis=axis) * (1.0 / count)

    def concat(self, parts, axis=-1):
        return self._record("concat", tuple(parts), axis=axis)

    def stop_gradient(self, a):
        return self._record("stop_gradient", (a,))

    def gather_rows(self, table, indices):
        return self._record("gather_rows", (table,), indices=np.asarray(indices, dtype=np.intp))

    def getitem(self, a, key):
        return self._record("getitem", (a,), key=key, unique=_unique_fancy(key))

    def reshape(self, a, shape):
        return self._record("reshape", (a,), shape=tuple(shape))

    def clip(self, a, lo, hi):
        return self._record("clip", (a,), lo=lo, hi=hi)

    def log_softmax(self, a, axis=-1):
        return self._record("log_softmax", (a,), axis=axis)

    # -- evaluation -------------------------------------------------------------------

    def forward(self, inputs=None):
        """Re-evaluate every node, rebinding the named inputs given in ``inputs``."""
        inputs = inputs or {}
        unknown = set(inputs) - set(self._inputs)
        if unknown:
            raise GraphError(f"unknown inputs {sorted(unknown)}", op="forward")
        for name, value in inputs.items():
            node = self._inputs[name]
            value = np.asarray(value, dtype=DTYPE)
            if value.shape != node.value.shape:
                raise GraphError(f"input {name!r} shape {value.shape} != {node.value.shape}",
                                 node.index, "input")
            node.value = value
        for node in self.nodes:
            if node.op in _LEAVES:
                continue
            try:
                with np.errstate(all="ignore"):
                    node.value = np.asarray(
                        _OPS[node.op][0]([p.value for p in node.parents], node.attrs), dtype=DTYPE)
            except (ValueError, IndexError) as exc:
                raise GraphError(str(exc), node.index, node.op) from exc
        return {name: node.value for name, node in self._inputs.items()}

    def backward(self, seed: Node):
        """Reverse sweep from scalar ``seed``; returns gradients keyed by parameter name."""
        if seed.graph is not self:
            raise GraphError("seed belongs to another graph", seed.index, seed.op)
        if seed.value.size != 1:
            raise GraphError(f"seed must be scalar, got shape {seed.shape}", seed.index, seed.op)
        for node in self.nodes:
            node.grad = None
        seed.grad = np.ones_like(seed.value)
        for node in reversed(self.nodes[: seed.index + 1]):
            g = node.grad
            if g is None or node.op in _LEAVES:
                continue
            parent_grads = _OPS[node.op][1](g, [p.value for p in node.parents], node.value, node.attrs)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=DTYPE)
                else:
                    parent.grad = parent.grad + pg
        return {
            name: (node.grad if node.grad is not None else np.zeros_like(node.value))
            for name, node in self._params.items()
        }


# -- networks ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Weights and biases of a fully connected stack; hidden layers use ELU, the last is linear."""

    sizes: tuple
    weights: list
    biases: list

    @property
    def activations(self):
        return ["elu"] * (len(self.sizes) - 2) + ["identity"]


class Mlp:
    """Dense feed-forward network. Parameter names are ``{prefix}.W{i}`` / ``{prefix}.b{i}``."""

    def __init__(self, sizes, rng, prefix="mlp", zero_last=False, last_scale=1.0,
                 final_activation=False):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.prefix = prefix
        self.final_activation = final_activation
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out))
                if last:
                    w *= last_scale
            weights.append(w.astype(DTYPE))
            biases.append(np.zeros(fan_out, dtype=DTYPE))
        self.p = MlpParams(tuple(sizes), weights, biases)

    @property
    def sizes(self):
        return self.p.sizes

    @property
    def in_dim(self):
        return self.p.sizes[0]

    @property
    def out_dim(self):
        return self.p.sizes[-1]

    def named_params(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.p.weights, self.p.biases)):
            out[f"{self.prefix}.W{i}"] = w
            out[f"{self.prefix}.b{i}"] = b
        return out

    def apply(self, x):
        """Plain numpy forward pass (no recording); same arithmetic as ``__call__``."""
        x = np.asarray(x, dtype=DTYPE)
        n = len(self.p.weights)
        for i, (w, b) in enumerate(zip(self.p.weights, self.p.biases)):
            x = x @ w + b
            if i < n - 1 or self.final_activation:
                x = _elu(x)
        return x

    def __call__(self, graph: Graph, x: Node) -> Node:
        if x.shape[-1] != self.in_dim:
            raise GraphError(f"{self.prefix} expects input width {self.in_dim}, got {x.shape[-1]}",
                             x.index, x.op)
        n = len(self.p.weights)
        for i, (w, b) in enumerate(zip(self.p.weights, self.p.biases)):
            x = x @ graph.param(f"{self.prefix}.W{i}", w) + graph.param(f"{self.prefix}.b{i}", b)
            if i < n - 1 or self.final_activation:
                x = graph.elu(x)
        return x


# -- optimisation -----------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_by_global_norm(grads, max_norm):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``. Returns (grads, norm)."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam update applied in place to the arrays in ``params``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def params_digest(params) -> str:
    """Stable SHA-256 over parameter names, shapes and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=DTYPE)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def params_to_json(params):
    """Flat value lists plus a shape manifest; floats survive a JSON round trip exactly."""
    return {name: {"shape": list(np.shape(arr)), "data": np.asarray(arr, dtype=DTYPE).ravel().tolist()}
            for name, arr in sorted(params.items())}


def params_from_json(doc, into=None):
    """Inverse of ``params_to_json``. With ``into`` the arrays are overwritten in place."""
    out = {}
    for name, entry in doc.items():
        arr = np.asarray(entry["data"], dtype=DTYPE).reshape(entry["shape"])
        if into is not None:
            if name not in into:
                raise KeyError(f"checkpoint parameter {name!r} has no counterpart")
            if into[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {into[name].shape}")
            into[name][...] = arr
        out[name] = arr
    if into is not None:
        missing = set(into) - set(doc)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
    return out


def adam_to_json(state: AdamState):
    return {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            "step": state.step, "m": params_to_json(state.m), "v": params_to_json(state.v)}


def adam_from_json(doc) -> AdamState:
    return AdamState(lr=doc["lr"], beta1=doc["beta1"], beta2=doc["beta2"], eps=doc["eps"], step=doc["step"],
                     m=params_from_json(doc["m"]), v=params_from_json(doc["v"]))

"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a static compute graph is built once per
model shape, placeholders are bound to concrete arrays on every call, a
forward pass caches one value per node, and a backward pass walks the nodes
in reverse topological order accumulating vector-Jacobian products.  All
arithmetic is float64 and all reductions run in a fixed order, so repeated
runs with identical bindings are bit-identical.

Non-finite values are treated as bugs, not data: every node checks its
output eagerly and raises NonFiniteError naming the offending node.
"""

from __future__ import annotations

import math

import numpy as np

# Parameter partitions.  Every parameter belongs to exactly one of these;
# optimizer masks and adaptation rules are expressed as sets of partitions.
ENCODER = "encoder"
CLASSIFIER = "classifier"
LAYER_WEIGHTS = "layer_weights"
PARTITIONS = (ENCODER, CLASSIFIER, LAYER_WEIGHTS)


class GraphError(Exception):
    """Base class for compute-graph failures."""


class ShapeMismatchError(GraphError):
    """Operands fed to a primitive have incompatible shapes."""


class NonFiniteError(GraphError):
    """A NaN or Inf appeared in a node value or gradient."""


class GraphStateError(GraphError):
    """A graph operation was called out of order or on unbound placeholders."""


def _as_f64(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.dtype != np.float64:
        raise ShapeMismatchError(f"expected float-convertible data, got dtype {arr.dtype}")
    return arr


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in {where}")


class Tensor:
    """An immutable float64 array with an optional gradient of the same shape.

    Values are copied on construction and the copy is marked read-only, so a
    Tensor held by a ParamSet can never change underneath an optimizer.
    """

    __slots__ = ("values", "grad")

    def __init__(self, values, grad=None):
        arr = np.array(values, dtype=np.float64)
        _check_finite(arr, "tensor values")
        arr.flags.writeable = False
        self.values = arr
        if grad is not None:
            g = np.array(grad, dtype=np.float64)
            if g.shape != arr.shape:
                raise ShapeMismatchError(
                    f"gradient shape {g.shape} does not match value shape {arr.shape}")
            _check_finite(g, "tensor gradient")
            g.flags.writeable = False
            self.grad = g
        else:
            self.grad = None

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape})"


class ParamSet:
    """A named, partitioned collection of parameter tensors.

    Iteration order is insertion order and is part of the contract: every
    consumer that flattens or accumulates over parameters sees the same
    sequence, which keeps whole training runs reproducible.
    """

    def __init__(self, tensors, partitions):
        if set(tensors) != set(partitions):
            raise ValueError("tensors and partitions must cover the same names")
        for name, part in partitions.items():
            if part not in PARTITIONS:
                raise ValueError(f"unknown partition {part!r} for parameter {name!r}")
        self._tensors = dict(tensors)
        self._partitions = dict(partitions)

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def partition(self, name) -> str:
        return self._partitions[name]

    def partitions(self):
        return dict(self._partitions)

    def names_in(self, partitions) -> list:
        wanted = set(partitions)
        return [n for n in self._tensors if self._partitions[n] in wanted]

    def with_values(self, updates) -> "ParamSet":
        """Return a new ParamSet with some values replaced, sharing the rest."""
        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise KeyError(f"unknown parameters in update: {sorted(unknown)}")
        tensors = dict(self._tensors)
        for name, values in updates.items():
            arr = _as_f64(values)
            if arr.shape != self._tensors[name].shape:
                raise ShapeMismatchError(
                    f"parameter {name!r}: update shape {arr.shape} "
                    f"!= current shape {self._tensors[name].shape}")
            tensors[name] = Tensor(arr)
        return ParamSet(tensors, self._partitions)

    def copy(self) -> "ParamSet":
        return ParamSet(dict(self._tensors), dict(self._partitions))


class Node:
    """One operation (or placeholder) in a compute graph."""

    __slots__ = ("idx", "op", "inputs", "attrs", "name", "value", "grad", "aux")

    def __init__(self, idx, op, inputs=(), attrs=None, name=None):
        self.idx = idx
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.name = name
        self.value = None
        self.grad = None
        self.aux = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node#{self.idx}({self.op}{label})"


_LEAF_OPS = ("param", "input", "const")


class ComputeGraph:
    """A static graph of primitives with named parameter and input leaves.

    Builder methods append nodes in topological order.  Calling the same
    ``param``/``placeholder`` name twice returns the existing node, so
    shared weights are shared nodes.
    """

    def __init__(self):
        self.nodes = []
        self.params = {}
        self.inputs = {}
        self.output = None
        self._forward_done = False

    # ------------------------------------------------------------------ leaves

    def param(self, name) -> Node:
        if name in self.params:
            return self.params[name]
        node = self._add("param", (), name=name)
        self.params[name] = node
        return node

    def placeholder(self, name) -> Node:
        if name in self.inputs:
            return self.inputs[name]
        node = self._add("input", (), name=name)
        self.inputs[name] = node
        return node

    def const(self, values) -> Node:
        arr = _as_f64(values)
        _check_finite(arr, "constant node")
        node = self._add("const", ())
        node.value = arr
        return node

    # -------------------------------------------------------------- primitives

    def affine(self, x, w, b) -> Node:
        return self._add("affine", (x, w, b))

    def matmul(self, a, b) -> Node:
        return self._add("matmul", (a, b))

    def relu(self, x) -> Node:
        return self._add("relu", (x,))

    def sigmoid(self, x) -> Node:
        return self._add("sigmoid", (x,))

    def add(self, a, b) -> Node:
        return self._add("add", (a, b))

    def scale(self, x, factor) -> Node:
        return self._add("scale", (x,), attrs={"factor": float(factor)})

    def concat(self, xs, axis) -> Node:
        return self._add("concat", tuple(xs), attrs={"axis": int(axis)})

    def slice_axis(self, x, axis, start, stop) -> Node:
        return self._add(
            "slice_axis", (x,),
            attrs={"axis": int(axis), "start": int(start), "stop": int(stop)})

    def reshape(self, x, shape) -> Node:
        return self._add("reshape", (x,), attrs={"shape": tuple(int(s) for s in shape)})

    def broadcast_axis(self, x, axis, reps) -> Node:
        return self._add("broadcast_axis", (x,), attrs={"axis": int(axis), "reps": int(reps)})

    def mean_axis(self, x, axis) -> Node:
        return self._add("mean_axis", (x,), attrs={"axis": int(axis)})

    def weight_sum(self, x, w) -> Node:
        """Contract a stack of layers with a weight vector.

        ``x`` is ``[L, d]`` or ``[B, L, d]``, ``w`` is ``[L]``; the result
        drops the layer axis.
        """
        return self._add("weight_sum", (x, w))

    def softmax(self, x) -> Node:
        return self._add("softmax", (x,))

    def group_lse(self, x, group_size) -> Node:
        """Log-sum-exp over contiguous column groups: [R, C] -> [R, C/k].

        Shifted by the per-group maximum, so sums of vanishing exponentials
        keep a finite, meaningful result where materializing the summed
        probabilities would round to zero.
        """
        return self._add("group_lse", (x,), attrs={"k": int(group_size)})

    def pairwise_sqdist(self, a, b) -> Node:
        """Squared Euclidean distances between all rows of ``a`` and ``b``."""
        return self._add("pairwise_sqdist", (a, b))

    def paired_sqdist(self, q, s) -> Node:
        """Per-batch squared distances: ``q`` is [B, n], ``s`` is [B, S, n]."""
        return self._add("paired_sqdist", (q, s))

    def attention(self, q, k, v) -> Node:
        """Scaled dot-product attention: softmax(q kᵀ / sqrt(d)) v."""
        return self._add("attention", (q, k, v))

    def softmax_cross_entropy(self, logits, labels, reduction="mean") -> Node:
        if reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {reduction!r}")
        return self._add("softmax_xent", (logits, labels), attrs={"reduction": reduction})

    def nll_of_probs(self, probs, labels, reduction="mean") -> Node:
        if reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {reduction!r}")
        return self._add("nll_of_probs", (probs, labels), attrs={"reduction": reduction})

    def mse(self, pred, target) -> Node:
        return self._add("mse", (pred, target))

    # ------------------------------------------------------------------ wiring

    def set_output(self, node) -> None:
        if node is not self.nodes[node.idx]:
            raise GraphStateError("output node does not belong to this graph")
        self.output = node

    def _add(self, op, inputs, attrs=None, name=None):
        for inp in inputs:
            if inp is not self.nodes[inp.idx]:
                raise GraphStateError("input node does not belong to this graph")
        node = Node(len(self.nodes), op, inputs, attrs, name)
        self.nodes.append(node)
        return node


# ---------------------------------------------------------------------------
# Forward implementations.  Each takes the node plus its input values and
# returns the output array.  Shape validation lives here so that errors name
# the primitive that rejected the operands.


def _shape_err(op, msg):
    raise ShapeMismatchError(f"{op}: {msg}")


def _fw_affine(node, x, w, b):
    if w.ndim != 2:
        _shape_err("affine", f"weights must be 2-d, got {w.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != w.shape[0]:
        _shape_err("affine", f"input {x.shape} incompatible with weights {w.shape}")
    if b.shape != (w.shape[1],):
        _shape_err("affine", f"bias {b.shape} incompatible with weights {w.shape}")
    return x @ w + b


def _fw_matmul(node, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        _shape_err("matmul", f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _fw_relu(node, x):
    return np.maximum(x, 0.0)


def _fw_sigmoid(node, x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fw_add(node, a, b):
    if a.shape != b.shape:
        _shape_err("add", f"shapes {a.shape} and {b.shape} differ")
    return a + b


def _fw_scale(node, x):
    return x * node.attrs["factor"]


def _fw_concat(node, *xs):
    axis = node.attrs["axis"]
    try:
        return np.concatenate(xs, axis=axis)
    except ValueError as exc:
        _shape_err("concat", str(exc))


def _fw_slice_axis(node, x):
    axis, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
    if axis >= x.ndim or stop > x.shape[axis] or start < 0 or start >= stop:
        _shape_err("slice_axis", f"slice [{start}:{stop}] on axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return x[tuple(index)]


def _fw_reshape(node, x):
    shape = node.attrs["shape"]
    if math.prod(shape) != x.size:
        _shape_err("reshape", f"cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


def _fw_broadcast_axis(node, x):
    axis, reps = node.attrs["axis"], node.attrs["reps"]
    if axis >= x.ndim or x.shape[axis] != 1:
        _shape_err("broadcast_axis", f"axis {axis} of {x.shape} must have length 1")
    return np.repeat(x, reps, axis=axis)


def _fw_mean_axis(node, x):
    axis = node.attrs["axis"]
    if axis >= x.ndim:
        _shape_err("mean_axis", f"axis {axis} out of range for {x.shape}")
    return x.mean(axis=axis)


def _fw_weight_sum(node, x, w):
    if w.ndim != 1:
        _shape_err("weight_sum", f"weights must be 1-d, got {w.shape}")
    if x.ndim == 2:
        if x.shape[0] != w.shape[0]:
            _shape_err("weight_sum", f"layers {x.shape} vs weights {w.shape}")
        return np.einsum("ld,l->d", x, w)
    if x.ndim == 3:
        if x.shape[1] != w.shape[0]:
            _shape_err("weight_sum", f"layers {x.shape} vs weights {w.shape}")
        return np.einsum("bld,l->bd", x, w)
    _shape_err("weight_sum", f"expected rank 2 or 3 input, got {x.shape}")


def _softmax_last(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _fw_softmax(node, x):
    return _softmax_last(x)


def _fw_group_lse(node, x):
    k = node.attrs["k"]
    if x.ndim != 2 or k < 1 or x.shape[1] % k:
        _shape_err("group_lse", f"cannot group {x.shape} columns by {k}")
    grouped = x.reshape(x.shape[0], x.shape[1] // k, k)
    m = grouped.max(axis=2, keepdims=True)
    e = np.exp(grouped - m)
    s = e.sum(axis=2, keepdims=True)
    node.aux = e / s
    return m[:, :, 0] + np.log(s[:, :, 0])


def _fw_pairwise_sqdist(node, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        _shape_err("pairwise_sqdist", f"rows of {a.shape} vs {b.shape}")
    diff = a[:, None, :] - b[None, :, :]
    node.aux = diff
    return np.einsum("mnd,mnd->mn", diff, diff)


def _fw_paired_sqdist(node, q, s):
    if q.ndim != 2 or s.ndim != 3 or q.shape[0] != s.shape[0] or q.shape[1] != s.shape[2]:
        _shape_err("paired_sqdist", f"query {q.shape} vs supports {s.shape}")
    diff = q[:, None, :] - s
    node.aux = diff
    return np.einsum("bsd,bsd->bs", diff, diff)


def _attention_shapes(q, k, v):
    if q.shape[-1] != k.shape[-1]:
        _shape_err("attention", f"query dim {q.shape} vs key dim {k.shape}")
    if k.shape[:-1] != v.shape[:-1]:
        _shape_err("attention", f"key rows {k.shape} vs value rows {v.shape}")
    if q.ndim != k.ndim:
        _shape_err("attention", f"rank mismatch {q.shape} vs {k.shape}")


def _fw_attention(node, q, k, v):
    if q.ndim not in (2, 3):
        _shape_err("attention", f"expected rank 2 or 3 operands, got {q.shape}")
    _attention_shapes(q, k, v)
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = q[None], k[None], v[None]
    if q.shape[0] != k.shape[0]:
        _shape_err("attention", f"batch mismatch {q.shape} vs {k.shape}")
    scores = q @ k.swapaxes(-1, -2) / math.sqrt(q.shape[-1])
    weights = _softmax_last(scores)
    node.aux = (weights, squeeze)
    out = weights @ v
    return out[0] if squeeze else out


def _gather_labels(op, scores, labels):
    if labels.ndim != 1 or scores.ndim != 2 or labels.shape[0] != scores.shape[0]:
        _shape_err(op, f"scores {scores.shape} vs labels {labels.shape}")
    idx = labels.astype(np.int64)
    if not np.array_equal(idx, labels):
        raise ShapeMismatchError(f"{op}: labels must be integral, got {labels}")
    if idx.min() < 0 or idx.max() >= scores.shape[1]:
        raise ShapeMismatchError(
            f"{op}: label out of range 0..{scores.shape[1] - 1}")
    return idx


def _fw_softmax_xent(node, logits, labels):
    idx = _gather_labels("softmax_xent", logits, labels)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    losses = lse - logits[np.arange(len(idx)), idx]
    node.aux = idx
    total = losses.sum()
    return np.float64(total / len(idx) if node.attrs["reduction"] == "mean" else total)


def _fw_nll_of_probs(node, probs, labels):
    idx = _gather_labels("nll_of_probs", probs, labels)
    picked = probs[np.arange(len(idx)), idx]
    if np.any(picked <= 0.0):
        raise NonFiniteError("nll_of_probs: zero probability at a true label")
    node.aux = idx
    total = -np.log(picked).sum()
    return np.float64(total / len(idx) if node.attrs["reduction"] == "mean" else total)


def _fw_mse(node, pred, target):
    if pred.shape != target.shape:
        _shape_err("mse", f"shapes {pred.shape} and {target.shape} differ")
    diff = pred - target
    return np.float64((diff * diff).mean())


_FORWARD = {
    "affine": _fw_affine,
    "matmul": _fw_matmul,
    "relu": _fw_relu,
    "sigmoid": _fw_sigmoid,
    "add": _fw_add,
    "scale": _fw_scale,
    "concat": _fw_concat,
    "slice_axis": _fw_slice_axis,
    "reshape": _fw_reshape,
    "broadcast_axis": _fw_broadcast_axis,
    "mean_axis": _fw_mean_axis,
    "weight_sum": _fw_weight_sum,
    "softmax": _fw_softmax,
    "group_lse": _fw_group_lse,
    "pairwise_sqdist": _fw_pairwise_sqdist,
    "paired_sqdist": _fw_paired_sqdist,
    "attention": _fw_attention,
    "softmax_xent": _fw_softmax_xent,
    "nll_of_probs": _fw_nll_of_probs,
    "mse": _fw_mse,
}


# ---------------------------------------------------------------------------
# Backward implementations.  Each returns one gradient per input (None for
# non-differentiable inputs such as labels).  ``g`` is the gradient of the
# loss with respect to the node's output.


def _bw_affine(node, g):
    x, w, _ = (i.value for i in node.inputs)
    if x.ndim == 1:
        return w @ g, np.outer(x, g), g
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _bw_matmul(node, g):
    a, b = (i.value for i in node.inputs)
    return g @ b.T, a.T @ g


def _bw_relu(node, g):
    x = node.inputs[0].value
    return (g * (x > 0.0),)


def _bw_sigmoid(node, g):
    s = node.value
    return (g * s * (1.0 - s),)


def _bw_add(node, g):
    return g, g


def _bw_scale(node, g):
    return (g * node.attrs["factor"],)


def _bw_concat(node, g):
    axis = node.attrs["axis"]
    sizes = [i.value.shape[axis] for i in node.inputs]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _bw_slice_axis(node, g):
    x = node.inputs[0].value
    axis, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
    out = np.zeros_like(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    out[tuple(index)] = g
    return (out,)


def _bw_reshape(node, g):
    return (g.reshape(node.inputs[0].value.shape),)


def _bw_broadcast_axis(node, g):
    return (g.sum(axis=node.attrs["axis"], keepdims=True),)


def _bw_mean_axis(node, g):
    x = node.inputs[0].value
    axis = node.attrs["axis"]
    n = x.shape[axis]
    return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy(),)


def _bw_weight_sum(node, g):
    x, w = (i.value for i in node.inputs)
    if x.ndim == 2:
        return np.einsum("d,l->ld", g, w), np.einsum("ld,d->l", x, g)
    return np.einsum("bd,l->bld", g, w), np.einsum("bld,bd->l", x, g)


def _bw_softmax(node, g):
    s = node.value
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _bw_group_lse(node, g):
    x = node.inputs[0].value
    return ((node.aux * g[:, :, None]).reshape(x.shape),)


def _bw_pairwise_sqdist(node, g):
    diff = node.aux
    da = 2.0 * np.einsum("mn,mnd->md", g, diff)
    db = -2.0 * np.einsum("mn,mnd->nd", g, diff)
    return da, db


def _bw_paired_sqdist(node, g):
    diff = node.aux
    dq = 2.0 * np.einsum("bs,bsd->bd", g, diff)
    ds = -2.0 * g[:, :, None] * diff
    return dq, ds


def _bw_attention(node, g):
    q, k, v = (i.value for i in node.inputs)
    weights, squeeze = node.aux
    if squeeze:
        q, k, v, g = q[None], k[None], v[None], g[None]
    dv = weights.swapaxes(-1, -2) @ g
    dw = g @ v.swapaxes(-1, -2)
    dscores = weights * (dw - (dw * weights).sum(axis=-1, keepdims=True))
    scale = 1.0 / math.sqrt(q.shape[-1])
    dq = dscores @ k * scale
    dk = dscores.swapaxes(-1, -2) @ q * scale
    if squeeze:
        dq, dk, dv = dq[0], dk[0], dv[0]
    return dq, dk, dv


def _bw_softmax_xent(node, g):
    logits = node.inputs[0].value
    idx = node.aux
    p = _softmax_last(logits)
    p[np.arange(len(idx)), idx] -= 1.0
    if node.attrs["reduction"] == "mean":
        p /= len(idx)
    return p * g, None


def _bw_nll_of_probs(node, g):
    probs = node.inputs[0].value
    idx = node.aux
    rows = np.arange(len(idx))
    out = np.zeros_like(probs)
    out[rows, idx] = -1.0 / probs[rows, idx]
    if node.attrs["reduction"] == "mean":
        out /= len(idx)
    return out * g, None


def _bw_mse(node, g):
    pred, target = (i.value for i in node.inputs)
    d = (2.0 / pred.size) * (pred - target) * g
    return d, -d


_BACKWARD = {
    "affine": _bw_affine,
    "matmul": _bw_matmul,
    "relu": _bw_relu,
    "sigmoid": _bw_sigmoid,
    "add": _bw_add,
    "scale": _bw_scale,
    "concat": _bw_concat,
    "slice_axis": _bw_slice_axis,
    "reshape": _bw_reshape,
    "broadcast_axis": _bw_broadcast_axis,
    "mean_axis": _bw_mean_axis,
    "weight_sum": _bw_weight_sum,
    "softmax": _bw_softmax,
    "group_lse": _bw_group_lse,
    "pairwise_sqdist": _bw_pairwise_sqdist,
    "paired_sqdist": _bw_paired_sqdist,
    "attention": _bw_attention,
    "softmax_xent": _bw_softmax_xent,
    "nll_of_probs": _bw_nll_of_probs,
    "mse": _bw_mse,
}

PRIMITIVE_OPS = tuple(sorted(_FORWARD))


# ---------------------------------------------------------------------------
# Graph execution.


def forward_eval(graph, params, inputs):
    """Bind placeholders and evaluate the graph, returning the output Tensor.

    ``params`` is a ParamSet covering every parameter leaf; ``inputs`` maps
    placeholder names to arrays.  Node values are cached on the graph for the
    subsequent backward pass.
    """
    if graph.output is None:
        raise GraphStateError("graph has no output node")
    for name, node in graph.params.items():
        if name not in params:
            raise GraphStateError(f"parameter {name!r} is not bound")
        node.value = params[name].values
    for name, node in graph.inputs.items():
        if name not in inputs:
            raise GraphStateError(f"input {name!r} is not bound")
        bound = inputs[name]
        arr = bound.values if isinstance(bound, Tensor) else _as_f64(bound)
        _check_finite(arr, f"input {name!r}")
        node.value = arr
    for node in graph.nodes:
        node.grad = None
        if node.op in _LEAF_OPS:
            continue
        node.value = _FORWARD[node.op](node, *(i.value for i in node.inputs))
        _check_finite(node.value, f"node {node!r}")
    graph._forward_done = True
    return Tensor(graph.output.value)


def backward(graph):
    """Accumulate gradients from the scalar output back to every parameter.

    Returns a dict mapping parameter name to its gradient Tensor; parameters
    that the output does not depend on get zero gradients.
    """
    if not graph._forward_done:
        raise GraphStateError("backward called before forward_eval")
    out = graph.output
    if np.ndim(out.value) != 0:
        raise GraphStateError(f"output must be scalar, got shape {np.shape(out.value)}")
    out.grad = np.ones_like(out.value)
    for node in reversed(graph.nodes):
        if node.grad is None or node.op in _LEAF_OPS:
            continue
        grads = _BACKWARD[node.op](node, node.grad)
        for inp, g in zip(node.inputs, grads):
            if g is None:
                continue
            _check_finite(g, f"gradient from {node!r}")
            if inp.grad is None:
                inp.grad = np.array(g)
            else:
                inp.grad += g
    graph._forward_done = False
    result = {}
    for name, node in graph.params.items():
        grad = node.grad if node.grad is not None else np.zeros_like(node.value)
        result[name] = Tensor(grad)
    return result


# ---------------------------------------------------------------------------
# Optimizers.  All steps are functional: they return fresh ParamSets and
# never mutate their arguments.


def _select_masked(params, grads, mask):
    selected = []
    for name in params.names():
        if params.partition(name) not in mask:
            continue
        if name not in grads:
            raise KeyError(f"missing gradient for masked parameter {name!r}")
        g = grads[name]
        garr = g.values if isinstance(g, Tensor) else _as_f64(g)
        if garr.shape != params[name].shape:
            raise ShapeMismatchError(
                f"gradient shape {garr.shape} != parameter shape "
                f"{params[name].shape} for {name!r}")
        selected.append((name, garr))
    return selected


def sgd_step(params, grads, lr, mask=PARTITIONS):
    """One vanilla gradient step on the parameters whose partition is in mask."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    updates = {}
    for name, g in _select_masked(params, grads, mask):
        updates[name] = params[name].values - lr * g
    return params.with_values(updates)


class AdamState:
    """First and second moment estimates plus the shared step counter."""

    def __init__(self, m, v, t, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = m
        self.v = v
        self.t = t
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    @classmethod
    def init(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        m = {name: np.zeros(t.shape) for name, t in params.items()}
        v = {name: np.zeros(t.shape) for name, t in params.items()}
        return cls(m, v, 0, beta1, beta2, eps)


def adam_step(params, grads, state, lr, mask=PARTITIONS):
    """One Adam step; returns (new params, new state) without mutating either."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, t in params.items():
        if name not in state.m or state.m[name].shape != t.shape:
            raise ShapeMismatchError(f"optimizer state does not match parameter {name!r}")
    t_new = state.t + 1
    m = dict(state.m)
    v = dict(state.v)
    updates = {}
    b1, b2, eps = state.beta1, state.beta2, state.eps
    for name, g in _select_masked(params, grads, mask):
        m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m[name] / (1.0 - b1 ** t_new)
        v_hat = v[name] / (1.0 - b2 ** t_new)
        updates[name] = params[name].values - lr * m_hat / (np.sqrt(v_hat) + eps)
    new_state = AdamState(m, v, t_new, b1, b2, eps)
    return params.with_values(updates), new_state


def reptile_step(params, adapted, beta):
    """Move parameters toward the mean of adapted copies.

    ``adapted`` is a non-empty sequence of ParamSets produced by inner-loop
    adaptation of ``params``; the update is θ − β · Σᵢ (θ − θ̂ᵢ) / len.
    """
    if not adapted:
        raise ValueError("reptile_step needs at least one adapted parameter set")
    updates = {}
    for name, t in params.items():
        delta = np.zeros(t.shape)
        for a in adapted:
            if name not in a:
                raise KeyError(f"adapted parameters missing {name!r}")
            if a[name].shape != t.shape:
                raise ShapeMismatchError(f"adapted shape drift for {name!r}")
            delta += t.values - a[name].values
        updates[name] = t.values - beta * delta / len(adapted)
    return params.with_values(updates)


# ---------------------------------------------------------------------------
# Finite differences, the reference oracle for every gradient in the tests.


def finite_diff_grad(loss_fn, params, h=1e-5):
    """Central-difference gradient of ``loss_fn(params)`` for every entry.

    ``loss_fn`` maps a ParamSet to a float.  Slow by construction; intended
    for verification at small sizes only.
    """
    if h <= 0.0:
        raise ValueError(f"step size must be positive, got {h}")
    grads = {}
    for name, t in params.items():
        base = t.values
        grad = np.zeros(base.shape)
        flat = grad.reshape(-1)
        for i in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[i] += h
            hi = loss_fn(params.with_values({name: bumped.reshape(base.shape)}))
            bumped[i] -= 2.0 * h
            lo = loss_fn(params.with_values({name: bumped.reshape(base.shape)}))
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError(f"loss non-finite while probing {name!r}")
            flat[i] = (hi - lo) / (2.0 * h)
        grads[name] = Tensor(grad)
    return grads


def glorot_uniform(rng, fan_in, fan_out):
    """Glorot uniform weight draw for an affine layer."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))

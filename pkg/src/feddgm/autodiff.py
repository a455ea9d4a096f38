"""Reverse-mode automatic differentiation on dense numpy tensors.

Expressions form an immutable DAG of ``Tensor`` nodes. ``grad`` builds the
backward pass out of ordinary graph nodes, so a gradient is just another
expression and can be differentiated again. That is what lets a matching
loss be differentiated through a chain of unrolled SGD steps: each step
embeds a gradient, and the outer gradient goes through all of them.

Values only exist at evaluation time: ``Graph([outputs]).eval(bindings)``
walks the DAG once in topological order with memoization. Evaluation is
pure, so one graph can be re-evaluated with fresh leaf bindings (that is
the hot loop during distillation).
"""

from __future__ import annotations

import itertools
from collections.abc import Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "GraphError", "EvalError",
    "leaf", "const", "add", "sub", "neg", "mul", "div", "matmul",
    "transpose", "reshape", "broadcast_to", "sum_to", "reduce_sum",
    "reduce_max", "exp", "log", "relu", "heaviside", "stop_gradient",
    "extract_patches", "scatter_patches", "mean_pool2d", "mean_unpool2d",
    "upsample2", "conv2d", "softmax_cross_entropy", "norm_sq", "sigmoid",
    "grad", "sgd_step", "evaluate",
]


class GraphError(ValueError):
    """Raised for malformed graph construction (shapes, bad arguments)."""


class EvalError(RuntimeError):
    """Raised at evaluation time: unbound leaves, shape or finiteness violations."""


_ids = itertools.count()


class Tensor:
    """One node of the expression DAG. Immutable after construction.

    ``op`` names the primitive, ``inputs`` are upstream nodes, ``shape`` is
    inferred at build time, ``attrs`` holds op-specific constants (axis,
    target shape, leaf name, ...). Identity is the node id, so nodes can be
    used as dict keys for bindings.
    """

    __slots__ = ("op", "inputs", "shape", "attrs", "nid")

    def __init__(self, op, inputs=(), shape=(), attrs=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.shape = tuple(int(s) for s in shape)
        self.attrs = attrs if attrs is not None else {}
        self.nid = next(_ids)

    @property
    def size(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    def __repr__(self):
        label = self.attrs.get("name", self.op)
        return f"<{label}#{self.nid}{list(self.shape)}>"

    # Operator sugar; scalars/arrays are lifted to constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return const(x)


def leaf(name: str, shape: Sequence[int]) -> Tensor:
    """Placeholder bound to a concrete array at evaluation time."""
    return Tensor("leaf", (), shape, {"name": name})


def const(value) -> Tensor:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise GraphError("constant contains non-finite values")
    return Tensor("const", (), arr.shape, {"value": arr})


def _broadcast_pair(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise GraphError(f"incompatible shapes {a.shape} and {b.shape}") from e
    if a.shape != shape:
        a = broadcast_to(a, shape)
    if b.shape != shape:
        b = broadcast_to(b, shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _broadcast_pair(_lift(a), _lift(b))
    return Tensor("add", (a, b), a.shape)


def sub(a, b) -> Tensor:
    a, b = _broadcast_pair(_lift(a), _lift(b))
    return Tensor("sub", (a, b), a.shape)


def mul(a, b) -> Tensor:
    a, b = _broadcast_pair(_lift(a), _lift(b))
    return Tensor("mul", (a, b), a.shape)


def div(a, b) -> Tensor:
    a, b = _broadcast_pair(_lift(a), _lift(b))
    return Tensor("div", (a, b), a.shape)


def neg(a) -> Tensor:
    a = _lift(a)
    return Tensor("neg", (a,), a.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise GraphError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return Tensor("matmul", (a, b), (a.shape[0], b.shape[1]))


def transpose(a: Tensor) -> Tensor:
    if len(a.shape) != 2:
        raise GraphError(f"transpose needs rank-2 input, got {a.shape}")
    return Tensor("transpose", (a,), (a.shape[1], a.shape[0]))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    n = 1
    for s in shape:
        n *= s
    if n != a.size:
        raise GraphError(f"cannot reshape {a.shape} to {shape}")
    return Tensor("reshape", (a,), shape, {"shape": shape})


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if np.broadcast_shapes(a.shape, shape) != shape:
        raise GraphError(f"cannot broadcast {a.shape} to {shape}")
    return Tensor("broadcast_to", (a,), shape, {"shape": shape})


def sum_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Adjoint of ``broadcast_to``: sum over the broadcast axes."""
    shape = tuple(int(s) for s in shape)
    if np.broadcast_shapes(shape, a.shape) != a.shape:
        raise GraphError(f"{shape} does not broadcast to {a.shape}")
    return Tensor("sum_to", (a,), shape, {"shape": shape})


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _reduced_shape(shape, axes, keepdims):
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, len(a.shape))
    out = _reduced_shape(a.shape, axes, keepdims)
    return Tensor("reduce_sum", (a,), out, {"axes": axes, "keepdims": keepdims})


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Forward-only maximum, intended for use under ``stop_gradient``."""
    axes = _norm_axes(axis, len(a.shape))
    out = _reduced_shape(a.shape, axes, keepdims)
    return Tensor("reduce_max", (a,), out, {"axes": axes, "keepdims": keepdims})


def exp(a) -> Tensor:
    a = _lift(a)
    return Tensor("exp", (a,), a.shape)


def log(a) -> Tensor:
    a = _lift(a)
    return Tensor("log", (a,), a.shape)


def relu(a: Tensor) -> Tensor:
    return Tensor("relu", (a,), a.shape)


def heaviside(a: Tensor) -> Tensor:
    """0/1 mask of positive entries. Carries no gradient (second derivative
    of ReLU is zero almost everywhere)."""
    return Tensor("heaviside", (a,), a.shape)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor("stop_gradient", (a,), a.shape)


def extract_patches(a: Tensor, kh: int, kw: int) -> Tensor:
    """Gather kh x kw zero-padded neighborhoods: (B,H,W,C) -> (B,H,W,kh*kw*C).

    Linear in the input, with ``scatter_patches`` as its exact adjoint;
    convolution is built on top of this plus a matmul so the whole chain is
    differentiable to any order.
    """
    if len(a.shape) != 4:
        raise GraphError(f"extract_patches needs (B,H,W,C), got {a.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise GraphError("same-padding patches need odd kernel extents")
    b, h, w, c = a.shape
    return Tensor("extract_patches", (a,), (b, h, w, kh * kw * c),
                  {"kh": kh, "kw": kw})


def scatter_patches(a: Tensor, kh: int, kw: int) -> Tensor:
    """Adjoint of ``extract_patches``: (B,H,W,kh*kw*C) -> (B,H,W,C)."""
    if len(a.shape) != 4 or a.shape[3] % (kh * kw) != 0:
        raise GraphError(f"scatter_patches got incompatible shape {a.shape}")
    b, h, w, kc = a.shape
    return Tensor("scatter_patches", (a,), (b, h, w, kc // (kh * kw)),
                  {"kh": kh, "kw": kw})


def mean_pool2d(a: Tensor) -> Tensor:
    """2x2 non-overlapping mean pooling on (B,H,W,C); H and W must be even."""
    if len(a.shape) != 4:
        raise GraphError(f"mean_pool2d needs (B,H,W,C), got {a.shape}")
    b, h, w, c = a.shape
    if h % 2 or w % 2:
        raise GraphError(f"mean_pool2d needs even spatial dims, got {h}x{w}")
    return Tensor("mean_pool2d", (a,), (b, h // 2, w // 2, c))


def mean_unpool2d(a: Tensor) -> Tensor:
    """Adjoint of ``mean_pool2d``: spread each value over its 2x2 window / 4."""
    if len(a.shape) != 4:
        raise GraphError(f"mean_unpool2d needs (B,H,W,C), got {a.shape}")
    b, h, w, c = a.shape
    return Tensor("mean_unpool2d", (a,), (b, 2 * h, 2 * w, c))


def upsample2(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling (composite, fully differentiable)."""
    return mul(mean_unpool2d(a), const(4.0))


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, same-padding 2-D convolution via patches + matmul.

    x: (B,H,W,Cin), w: (kh,kw,Cin,Cout), bias: (Cout,) broadcast over B,H,W.
    """
    if len(x.shape) != 4 or len(w.shape) != 4:
        raise GraphError(f"conv2d needs 4-D input and kernel, got {x.shape}, {w.shape}")
    b, h, wd, cin = x.shape
    kh, kw, cin2, cout = w.shape
    if cin != cin2:
        raise GraphError(f"conv2d channel mismatch: input {cin}, kernel {cin2}")
    p = extract_patches(x, kh, kw)
    pm = reshape(p, (b * h * wd, kh * kw * cin))
    wm = reshape(w, (kh * kw * cin, cout))
    y = reshape(matmul(pm, wm), (b, h, wd, cout))
    if bias is not None:
        y = add(y, bias)
    return y


def softmax_cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean softmax cross-entropy over the batch.

    logits: (B,K); targets: (B,K) one-hot (or soft) rows. The max-shift is
    wrapped in ``stop_gradient``: log-sum-exp does not depend on the shift,
    so first and second derivatives stay exact.
    """
    if logits.shape != targets.shape or len(logits.shape) != 2:
        raise GraphError(f"bad cross-entropy shapes {logits.shape}, {targets.shape}")
    b = logits.shape[0]
    c = stop_gradient(reduce_max(logits, axis=1, keepdims=True))
    z = sub(logits, c)
    lse = log(reduce_sum(exp(z), axis=1))
    picked = reduce_sum(mul(z, targets), axis=1)
    return mul(reduce_sum(sub(lse, picked)), const(1.0 / b))


def norm_sq(a: Tensor) -> Tensor:
    """Sum of squares of all entries."""
    return reduce_sum(mul(a, a))


def sigmoid(a) -> Tensor:
    """Numerically stable logistic; saturates smoothly so gradients survive."""
    a = _lift(a)
    return Tensor("sigmoid", (a,), a.shape)


# ---------------------------------------------------------------------------
# Forward implementations. Each takes (input values, attrs, dtype).

def _fw_extract(vals, attrs, dtype):
    (x,) = vals
    kh, kw = attrs["kh"], attrs["kw"]
    b, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((b, h + kh - 1, w + kw - 1, c), dtype=dtype)
    xp[:, ph:ph + h, pw:pw + w, :] = x
    out = np.empty((b, h, w, kh * kw, c), dtype=dtype)
    k = 0
    for i in range(kh):
        for j in range(kw):
            out[:, :, :, k, :] = xp[:, i:i + h, j:j + w, :]
            k += 1
    return out.reshape(b, h, w, kh * kw * c)


def _fw_scatter(vals, attrs, dtype):
    (g,) = vals
    kh, kw = attrs["kh"], attrs["kw"]
    b, h, w, kc = g.shape
    c = kc // (kh * kw)
    gr = g.reshape(b, h, w, kh * kw, c)
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((b, h + kh - 1, w + kw - 1, c), dtype=dtype)
    k = 0
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + h, j:j + w, :] += gr[:, :, :, k, :]
            k += 1
    return np.ascontiguousarray(xp[:, ph:ph + h, pw:pw + w, :])


def _fw_pool(vals, attrs, dtype):
    (x,) = vals
    b, h, w, c = x.shape
    return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _fw_unpool(vals, attrs, dtype):
    (x,) = vals
    y = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
    return y * np.asarray(0.25, dtype=dtype)


def _fw_sigmoid(vals, attrs, dtype):
    (x,) = vals
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fw_sum_to(vals, attrs, dtype):
    (x,), shape = vals, attrs["shape"]
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return np.asarray(x, dtype=dtype)


_FORWARD = {
    "add": lambda v, a, dt: v[0] + v[1],
    "sub": lambda v, a, dt: v[0] - v[1],
    "mul": lambda v, a, dt: v[0] * v[1],
    "div": lambda v, a, dt: v[0] / v[1],
    "neg": lambda v, a, dt: -v[0],
    "matmul": lambda v, a, dt: v[0] @ v[1],
    "transpose": lambda v, a, dt: v[0].T,
    "reshape": lambda v, a, dt: v[0].reshape(a["shape"]),
    "broadcast_to": lambda v, a, dt: np.broadcast_to(v[0], a["shape"]),
    "sum_to": _fw_sum_to,
    "reduce_sum": lambda v, a, dt: np.asarray(
        v[0].sum(axis=a["axes"], keepdims=a["keepdims"]), dtype=dt),
    "reduce_max": lambda v, a, dt: np.asarray(
        v[0].max(axis=a["axes"], keepdims=a["keepdims"]), dtype=dt),
    "exp": lambda v, a, dt: np.exp(v[0]),
    "log": lambda v, a, dt: np.log(v[0]),
    "relu": lambda v, a, dt: np.maximum(v[0], 0),
    "heaviside": lambda v, a, dt: (v[0] > 0).astype(dt),
    "stop_gradient": lambda v, a, dt: v[0],
    "sigmoid": _fw_sigmoid,
    "extract_patches": _fw_extract,
    "scatter_patches": _fw_scatter,
    "mean_pool2d": _fw_pool,
    "mean_unpool2d": _fw_unpool,
}


# ---------------------------------------------------------------------------
# VJP builders: (node, output adjoint) -> per-input adjoint nodes (None where
# no gradient flows). Every returned adjoint is an ordinary graph node, which
# is what makes second-order differentiation work.

def _vjp_reduce_sum(node, g):
    (a,) = node.inputs
    if not node.attrs["keepdims"]:
        kshape = _reduced_shape(a.shape, node.attrs["axes"], True)
        g = reshape(g, kshape)
    return (broadcast_to(g, a.shape),)


def _vjp_reduce_max(node, g):
    raise GraphError(
        "reduce_max is forward-only; wrap it in stop_gradient "
        "(as softmax_cross_entropy does)")


_VJP = {
    "add": lambda n, g: (g, g),
    "sub": lambda n, g: (g, neg(g)),
    "mul": lambda n, g: (mul(g, n.inputs[1]), mul(g, n.inputs[0])),
    "div": lambda n, g: (div(g, n.inputs[1]), neg(div(mul(g, n), n.inputs[1]))),
    "neg": lambda n, g: (neg(g),),
    "matmul": lambda n, g: (matmul(g, transpose(n.inputs[1])),
                            matmul(transpose(n.inputs[0]), g)),
    "transpose": lambda n, g: (transpose(g),),
    "reshape": lambda n, g: (reshape(g, n.inputs[0].shape),),
    "broadcast_to": lambda n, g: (sum_to(g, n.inputs[0].shape),),
    "sum_to": lambda n, g: (broadcast_to(g, n.inputs[0].shape),),
    "reduce_sum": _vjp_reduce_sum,
    "reduce_max": _vjp_reduce_max,
    "exp": lambda n, g: (mul(g, n),),
    "log": lambda n, g: (div(g, n.inputs[0]),),
    "relu": lambda n, g: (mul(g, heaviside(n.inputs[0])),),
    "heaviside": lambda n, g: (None,),
    "stop_gradient": lambda n, g: (None,),
    "sigmoid": lambda n, g: (mul(g, mul(n, sub(const(1.0), n))),),
    "extract_patches": lambda n, g: (scatter_patches(g, n.attrs["kh"], n.attrs["kw"]),),
    "scatter_patches": lambda n, g: (extract_patches(g, n.attrs["kh"], n.attrs["kw"]),),
    "mean_pool2d": lambda n, g: (mean_unpool2d(g),),
    "mean_unpool2d": lambda n, g: (mean_pool2d(g),),
}


def _topo(outputs: Sequence[Tensor]) -> list[Tensor]:
    """Iterative postorder: every node appears after all of its inputs."""
    order = []
    visited = set()
    stack = [(n, False) for n in reversed(list(outputs))]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.nid in visited:
            continue
        visited.add(node.nid)
        stack.append((node, True))
        for inp in reversed(node.inputs):
            if inp.nid not in visited:
                stack.append((inp, False))
    return order


def grad(root: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Build gradient nodes of a scalar ``root`` with respect to ``wrt``.

    The result nodes live in the same DAG and are differentiable again.
    Nodes in ``wrt`` that the root provably does not depend on (e.g. behind
    ``stop_gradient``) get a zero constant.
    """
    if root.shape != ():
        raise GraphError(f"grad root must be scalar, got shape {root.shape}")
    order = _topo([root])
    in_graph = {n.nid for n in order}
    wrt = list(wrt)
    for w in wrt:
        if w.nid not in in_graph:
            raise GraphError(f"wrt node {w!r} is not in the graph of {root!r}")
    adjoint = {root.nid: const(1.0)}
    for node in reversed(order):
        g = adjoint.get(node.nid)
        if g is None or not node.inputs:
            continue
        builder = _VJP.get(node.op)
        if builder is None:
            raise GraphError(f"no gradient rule for op '{node.op}'")
        for inp, gi in zip(node.inputs, builder(node, g)):
            if gi is None:
                continue
            prev = adjoint.get(inp.nid)
            adjoint[inp.nid] = gi if prev is None else add(prev, gi)
    out = []
    for w in wrt:
        gw = adjoint.get(w.nid)
        out.append(gw if gw is not None else const(np.zeros(w.shape)))
    return out


def sgd_step(params: Sequence[Tensor], loss: Tensor, lr: float) -> list[Tensor]:
    """One differentiable SGD step: each param becomes ``p - lr * dloss/dp``.

    The returned nodes remain differentiable with respect to every upstream
    leaf, including anything the loss was computed from. ``lr`` may be zero
    (a no-op step) but not negative.
    """
    if lr < 0:
        raise GraphError(f"learning rate must be >= 0, got {lr}")
    gs = grad(loss, list(params))
    scale = const(float(lr))
    return [sub(p, mul(scale, g)) for p, g in zip(params, gs)]


class Graph:
    """Compiled evaluation plan for a fixed set of output nodes.

    Topological order and per-dtype constant casts are cached, so repeated
    evaluation with fresh leaf bindings only pays for the numpy calls.
    """

    def __init__(self, outputs):
        self._single = isinstance(outputs, Tensor)
        self.outputs = (outputs,) if self._single else tuple(outputs)
        self.nodes = _topo(self.outputs)
        self.leaves = tuple(n for n in self.nodes if n.op == "leaf")
        self._consts: dict[tuple[int, object], np.ndarray] = {}

    def eval(self, bindings=None, dtype=np.float64, check_all: bool = False):
        """Evaluate all outputs. ``bindings`` maps leaf Tensors to arrays.

        Raises EvalError on unbound leaves, binding-shape mismatches, and
        non-finite output values (naming the earliest offending node). With
        ``check_all=True`` every intermediate is checked instead.
        """
        dtype = np.dtype(dtype)
        bindings = bindings or {}
        vals: dict[int, np.ndarray] = {}
        for lf in self.leaves:
            if lf not in bindings:
                raise EvalError(f"unbound leaf {lf!r}")
            v = np.asarray(bindings[lf], dtype=dtype)
            if v.shape != lf.shape:
                raise EvalError(
                    f"binding for {lf!r} has shape {v.shape}, expected {lf.shape}")
            vals[lf.nid] = v
        for node in self.nodes:
            if node.op == "leaf":
                continue
            if node.op == "const":
                key = (node.nid, dtype.str)
                cached = self._consts.get(key)
                if cached is None:
                    cached = np.asarray(node.attrs["value"], dtype=dtype)
                    self._consts[key] = cached
                vals[node.nid] = cached
                continue
            fn = _FORWARD[node.op]
            out = fn([vals[i.nid] for i in node.inputs], node.attrs, dtype)
            if check_all and not np.all(np.isfinite(out)):
                raise EvalError(f"non-finite value at node {node!r}")
            vals[node.nid] = out
        results = [vals[o.nid] for o in self.outputs]
        if not check_all:
            for o, v in zip(self.outputs, results):
                if not np.all(np.isfinite(v)):
                    culprit = next(
                        n for n in self.nodes
                        if n.nid in vals and not np.all(np.isfinite(vals[n.nid])))
                    raise EvalError(
                        f"non-finite output at {o!r}; first non-finite node: {culprit!r}")
        return results[0] if self._single else results


def evaluate(outputs, bindings=None, dtype=np.float64, check_all: bool = False):
    """One-shot convenience wrapper around ``Graph(...).eval(...)``."""
    return Graph(outputs).eval(bindings, dtype=dtype, check_all=check_all)

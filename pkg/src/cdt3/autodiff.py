"""Tape-based reverse-mode autodiff over numpy arrays.

A :class:`Graph` records primitive applications in creation order, which
is a valid topological order by construction. :func:`backward` walks that
tape in exact reverse, so gradients are deterministic.

Only the primitives the model needs are provided. Shapes are checked
eagerly and every primitive output is checked for NaN/Inf.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels

LN_EPS = 1e-5


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class UnknownLeafError(KeyError):
    pass


class Tensor:
    __slots__ = ("backward_fn", "data", "graph", "name", "needs_grad", "node_id", "op", "parents")

    def __init__(self, data, graph, node_id, op, parents=(), backward_fn=None, needs_grad=False, name=None):
        self.data = data
        self.graph = graph
        self.node_id = node_id
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.needs_grad = needs_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return tuple(self.data.shape)

    def describe(self) -> str:
        label = self.name if self.name is not None else self.op
        return f"{label}#{self.node_id}{list(self.data.shape)}"

    def __repr__(self):
        return f"Tensor({self.describe()}, dtype={self.data.dtype})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


class Graph:
    """One forward evaluation.

    ``seed`` and ``step`` key the dropout masks together with each node's
    id, so replaying the same forward reproduces every mask.
    """

    def __init__(self, *, seed: int = 0, step: int = 0, training: bool = False,
                 dtype=np.float32, check_finite: bool = True):
        self.seed = int(seed)
        self.step = int(step)
        self.training = training
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def leaf(self, name: str, array, requires_grad: bool = True) -> Tensor:
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        data = np.ascontiguousarray(array, dtype=self.dtype)
        t = Tensor(data, self, len(self.nodes), "leaf", needs_grad=requires_grad, name=name)
        self.nodes.append(t)
        self.leaves[name] = t
        return t

    def constant(self, array, name=None) -> Tensor:
        data = np.ascontiguousarray(array, dtype=self.dtype)
        t = Tensor(data, self, len(self.nodes), "const", name=name)
        self.nodes.append(t)
        return t

    def record(self, data, op, parents, backward_fn) -> Tensor:
        node_id = len(self.nodes)
        if self.check_finite and not np.isfinite(data).all():
            raise NumericError(f"non-finite output at node {op}#{node_id} "
                               f"(inputs: {', '.join(p.describe() for p in parents)})")
        needs = any(p.needs_grad for p in parents)
        t = Tensor(data, self, node_id, op, tuple(parents), backward_fn if needs else None, needs)
        self.nodes.append(t)
        return t


def _graph_of(*tensors) -> Graph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise ValueError("tensors belong to different graphs")
    return g


def _shape_error(op, a, b, detail=""):
    msg = f"{op}: incompatible operands {a.describe()} and {b.describe()}"
    raise DimensionError(msg + (f" ({detail})" if detail else ""))


# ------------------------------------------------------------------ primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a of rank 1 or 2 and b of rank 2."""
    g = _graph_of(a, b)
    if b.data.ndim != 2 or a.data.ndim not in (1, 2) or a.data.shape[-1] != b.data.shape[0]:
        _shape_error("matmul", a, b)
    A, B = a.data, b.data

    def bw(go):
        if A.ndim == 1:
            return go @ B.T, np.outer(A, go)
        return go @ B.T, A.T @ go

    return g.record(A @ B, "matmul", (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-shape bias broadcast over ``a``."""
    g = _graph_of(a, b)
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return g.record(a.data + b.data, "add", (a, b), lambda go: (go, go))
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        lead = tuple(range(len(sa) - len(sb)))
        return g.record(a.data + b.data, "add", (a, b), lambda go: (go, go.sum(axis=lead)))
    _shape_error("add", a, b)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    g = a.graph
    return g.record((a.data * c).astype(a.data.dtype, copy=False), "scale", (a,),
                    lambda go: ((go * c).astype(go.dtype, copy=False),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.describe()} as {list(shape)}")
    old = a.data.shape
    return a.graph.record(a.data.reshape(shape), "reshape", (a,), lambda go: (go.reshape(old),))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    g = _graph_of(x, gain, bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,):
        _shape_error("layernorm", x, gain)
    if bias.data.shape != (d,):
        _shape_error("layernorm", x, bias)
    shape = x.data.shape
    x2 = x.data.reshape(-1, d)
    y, xhat, rstd = kernels.layernorm_fwd(x2, gain.data, bias.data, eps)

    def bw(go):
        dx, dg, db = kernels.layernorm_bwd(np.ascontiguousarray(go.reshape(-1, d)), xhat, rstd, gain.data)
        return dx.reshape(shape), dg, db

    return g.record(y.reshape(shape), "layernorm", (x, gain, bias), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shape = x.data.shape
    y = kernels.softmax_rows(x.data.reshape(-1, shape[-1])).reshape(shape)

    def bw(go):
        n = shape[-1]
        return (kernels.softmax_rows_grad(y.reshape(-1, n), np.ascontiguousarray(go.reshape(-1, n))).reshape(shape),)

    return x.graph.record(y, "softmax", (x,), bw)


def gelu(x: Tensor) -> Tensor:
    X = x.data
    return x.graph.record(kernels.gelu_fwd(X), "gelu", (x,),
                          lambda go: (kernels.gelu_bwd(X, np.ascontiguousarray(go)),))


def dropout_mask(seed: int, node_id: int, step: int, shape, rate: float, dtype) -> np.ndarray:
    """Inverted-dropout mask from a counter-based generator keyed by (seed, node, step)."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, ((node_id & 0xFFFFFFFF) << 32) | (step & 0xFFFFFFFF)],
                   dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def dropout(x: Tensor, rate: float) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    g = x.graph
    if not g.training or rate == 0.0:
        return x
    mask = dropout_mask(g.seed, len(g.nodes), g.step, x.data.shape, rate, x.data.dtype)
    return g.record(x.data * mask, "dropout", (x,), lambda go: (go * mask,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    g = _graph_of(*tensors)
    arrays = [t.data for t in tensors]
    ref = arrays[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != ref.ndim or any(s[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            _shape_error("concat", tensors[0], t, f"axis={axis}")
    bounds = np.cumsum([a.shape[ax] for a in arrays])[:-1]

    def bw(go):
        return tuple(np.split(go, bounds, axis=ax))

    return g.record(np.concatenate(arrays, axis=ax), "concat", tuple(tensors), bw)


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing; gradient scatters back into zeros."""
    X = x.data
    out = X[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=X.dtype)

    def bw(go):
        gx = np.zeros_like(X)
        gx[index] = go
        return (gx,)

    return x.graph.record(np.array(out, copy=True), "slice", (x,), bw)


def mean(x: Tensor, axis: int) -> Tensor:
    X = x.data
    ax = axis % X.ndim
    n = X.shape[ax]

    def bw(go):
        return (np.broadcast_to(np.expand_dims(go, ax) / n, X.shape).astype(X.dtype),)

    return x.graph.record(X.mean(axis=ax).astype(X.dtype, copy=False), "mean", (x,), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int):
    """Fused multi-head scaled dot-product attention.

    ``q`` is (n_q, d); ``k`` and ``v`` are (n_k, d). Returns the (n_q, d)
    output tensor and the per-head weights as an (heads, n_q, n_k) array.
    """
    g = _graph_of(q, k, v)
    if q.data.ndim != 2 or k.data.ndim != 2 or q.data.shape[1] != k.data.shape[1]:
        _shape_error("attention", q, k)
    if v.data.shape != k.data.shape:
        _shape_error("attention", k, v)
    nq, d = q.data.shape
    nk = k.data.shape[0]
    if d % heads:
        raise DimensionError(f"attention: width {d} not divisible by {heads} heads")
    dh = d // heads
    sc = 1.0 / math.sqrt(dh)
    Qh = q.data.reshape(nq, heads, dh).transpose(1, 0, 2)
    Kh = k.data.reshape(nk, heads, dh).transpose(1, 0, 2)
    Vh = v.data.reshape(nk, heads, dh).transpose(1, 0, 2)
    S = (Qh @ Kh.transpose(0, 2, 1)) * q.data.dtype.type(sc)
    A = kernels.softmax_rows(np.ascontiguousarray(S.reshape(heads * nq, nk))).reshape(heads, nq, nk)
    O = (A @ Vh).transpose(1, 0, 2).reshape(nq, d)

    def bw(go):
        dO = go.reshape(nq, heads, dh).transpose(1, 0, 2)
        dA = dO @ Vh.transpose(0, 2, 1)
        dV = A.transpose(0, 2, 1) @ dO
        dS = kernels.softmax_rows_grad(A.reshape(heads * nq, nk),
                                       np.ascontiguousarray(dA.reshape(heads * nq, nk))).reshape(heads, nq, nk)
        dS *= go.dtype.type(sc)
        dQ = dS @ Kh
        dK = dS.transpose(0, 2, 1) @ Qh
        return (dQ.transpose(1, 0, 2).reshape(nq, d),
                dK.transpose(1, 0, 2).reshape(nk, d),
                dV.transpose(1, 0, 2).reshape(nk, d))

    out = g.record(np.ascontiguousarray(O), "attention", (q, k, v), bw)
    return out, A


def mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over entries where ``mask`` is true.

    Masked-out entries never enter the arithmetic, so their targets have no
    influence at all. An all-false mask yields exactly 0.
    """
    g = pred.graph
    P = pred.data
    if isinstance(target, Tensor):
        T, parents = target.data, (pred, target)
    else:
        T = np.asarray(target, dtype=P.dtype)
        parents = (pred,)
    if T.shape != P.shape:
        raise DimensionError(f"mse: incompatible operands {pred.describe()} and target{list(T.shape)}")
    if mask is None:
        mask = np.ones(P.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != P.shape:
        raise DimensionError(f"mse: mask shape {list(mask.shape)} does not match {pred.describe()}")
    n = int(mask.sum())
    if n == 0:
        val = np.zeros((), dtype=P.dtype)
        resid = None
    else:
        resid = P[mask] - T[mask]
        val = np.asarray((resid * resid).sum() / n, dtype=P.dtype)

    def bw(go):
        gp = np.zeros_like(P)
        if n:
            gp[mask] = (2.0 / n) * go * resid
        if len(parents) == 2:
            return gp, -gp
        return (gp,)

    return g.record(val, "mse", parents, bw)


# -------------------------------------------------------------------- backward


def backward(graph: Graph, output: Tensor, wrt: Iterable[str] | None = None,
             grad_output=None) -> dict[str, np.ndarray]:
    """Gradients of ``output`` with respect to named leaves.

    ``output`` must be scalar unless ``grad_output`` (same shape) supplies
    the vector for a vector-Jacobian product. Leaves created with
    ``requires_grad=False`` are skipped unless explicitly requested, in
    which case their gradient is reported as zeros.
    """
    if output.graph is not graph:
        raise ValueError("output does not belong to this graph")
    if grad_output is None:
        if output.data.size != 1:
            raise DimensionError(f"backward: output {output.describe()} is not scalar")
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(grad_output, dtype=output.data.dtype)
        if seed.shape != output.data.shape:
            raise DimensionError(f"backward: grad_output shape {list(seed.shape)} vs {output.describe()}")
    if wrt is None:
        names = [n for n, t in graph.leaves.items() if t.needs_grad]
    else:
        names = list(wrt)
        missing = [n for n in names if n not in graph.leaves]
        if missing:
            raise UnknownLeafError(f"unknown leaves: {missing}")

    grads: dict[int, np.ndarray] = {output.node_id: seed}
    nodes = graph.nodes
    for nid in range(output.node_id, -1, -1):
        node = nodes[nid]
        go = grads.get(nid)
        if go is None or node.backward_fn is None:
            continue
        pgrads = node.backward_fn(go)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.needs_grad:
                continue
            pid = p.node_id
            prev = grads.get(pid)
            grads[pid] = pg if prev is None else prev + pg
        if node.op != "leaf":
            del grads[nid]

    out = {}
    for n in names:
        leaf = graph.leaves[n]
        gl = grads.get(leaf.node_id)
        if gl is None:
            out[n] = np.zeros_like(leaf.data)
        else:
            out[n] = np.asarray(gl, dtype=leaf.data.dtype).reshape(leaf.data.shape)
    return out


def relative_error(a, b, floor: float = 1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(fn: Callable[[Graph, Mapping[str, Tensor]], Tensor],
                      point: Mapping[str, np.ndarray], epsilon: float = 1e-4, *,
                      max_entries: int | None = None, seed: int = 0,
                      training: bool = False, graph_seed: int = 0) -> float:
    """Max relative error between :func:`backward` and central differences.

    ``fn(graph, leaves)`` must build a scalar from the leaves it is given.
    Runs in float64. ``max_entries`` samples that many coordinates per leaf
    instead of checking every one.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}

    def evaluate(values):
        g = Graph(seed=graph_seed, training=training, dtype=np.float64)
        leaves = {k: g.leaf(k, v) for k, v in values.items()}
        out = fn(g, leaves)
        return g, out

    g, out = evaluate(point)
    analytic = backward(g, out, wrt=list(point))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, base in point.items():
        flat_idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_idx = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        for fi in flat_idx:
            idx = np.unravel_index(fi, base.shape)
            vals = dict(point)
            plus = base.copy()
            plus[idx] += epsilon
            vals[name] = plus
            fp = float(evaluate(vals)[1].data)
            minus = base.copy()
            minus[idx] -= epsilon
            vals[name] = minus
            fm = float(evaluate(vals)[1].data)
            numeric = (fp - fm) / (2.0 * epsilon)
            err = float(relative_error(analytic[name][idx], numeric))
            worst = max(worst, err)
    return worst

"""Dense tensors with reverse-mode differentiation and an Adam optimizer.

The op set is intentionally small: exactly what the sentence encoders and the
clustering loss need. Every primitive records itself onto an explicit tape
(:class:`Graph`); :func:`backward` walks the tape in reverse recording order.
No fusion, no broadcasting tricks beyond bias-style adds: correctness and
determinism over speed.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float64


class AutodiffError(Exception):
    """Base class for tape/op failures."""


class NonFiniteValueError(AutodiffError):
    """An op produced (or was fed) NaN or Inf."""


class ShapeMismatchError(AutodiffError):
    pass


class WindowTooLargeError(AutodiffError):
    """Convolution window exceeds the sequence length; caller must pad."""


class GraphConsumedError(AutodiffError):
    """backward() was called twice on the same recording."""


class NonCheckablePointError(AutodiffError):
    """finite_diff_check hit a non-differentiable point (relu/max tie)."""


class Tensor:
    """Dense float array, the unit of all numeric computation here.

    Leaves with ``requires_grad=True`` are the trainable parameters;
    everything else is either a constant or an intermediate value.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "meta")

    def __init__(self, op, inputs, output, backward_fn, meta=None):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.meta = meta


_tls = threading.local()


def _graph_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Ordered tape of primitive ops; topological order is recording order.

    Use as a context manager: ops executed inside the ``with`` block record
    themselves here. Recording is single-threaded per graph (the active-graph
    stack is thread-local, so independent trials in separate threads or
    processes do not share state).
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _graph_stack().pop()
        assert popped is self
        return False


def _record(op: str, inputs, out_data, backward_fn, meta=None) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteValueError(f"op {op!r} produced non-finite values")
    out = Tensor(out_data)
    graph = active_graph()
    if graph is not None:
        graph.nodes.append(_Node(op, inputs, out, backward_fn, meta))
    return out


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def constant(value, dtype=None) -> Tensor:
    return Tensor(np.asarray(value), requires_grad=False, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim not in (1, 2) or A.shape[1] != B.shape[0]:
        raise ShapeMismatchError(f"matmul: {A.shape} @ {B.shape}")

    def bwd(g):
        if B.ndim == 2:
            return [(a, g @ B.T), (b, A.T @ g)]
        return [(a, np.outer(g, B)), (b, A.T @ g)]

    return _record("matmul", (a, b), A @ B, bwd)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data + b.data
    except ValueError as err:
        raise ShapeMismatchError(f"add: {a.shape} + {b.shape}") from err

    def bwd(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape))]

    return _record("add", (a, b), out, bwd)


def add_n(terms) -> Tensor:
    """Sum of same-shaped tensors; one node instead of a chain of adds."""
    terms = [_lift(t) for t in terms]
    if not terms:
        raise ShapeMismatchError("add_n of nothing")
    out = terms[0].data
    for t in terms[1:]:
        if t.data.shape != out.shape:
            raise ShapeMismatchError("add_n: shapes differ")
        out = out + t.data

    def bwd(g):
        return [(t, g) for t in terms]

    return _record("add_n", tuple(terms), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data * b.data
    except ValueError as err:
        raise ShapeMismatchError(f"mul: {a.shape} * {b.shape}") from err

    def bwd(g):
        return [(a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape))]

    return _record("mul", (a, b), out, bwd)


def scale(a, s: float) -> Tensor:
    return mul(a, float(s))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def tanh(a) -> Tensor:
    a = _lift(a)
    t = np.tanh(a.data)
    return _record("tanh", (a,), t, lambda g: [(a, (1.0 - t * t) * g)])


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    # stable in both tails
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return [(a, s * (1.0 - s) * g)]

    return _record("sigmoid", (a,), s, bwd)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0  # subgradient 0 at exactly 0

    def bwd(g):
        return [(a, np.where(mask, g, 0.0))]

    return _record("relu", (a,), np.where(mask, a.data, 0.0), bwd)


def conv1d(s, filters) -> Tensor:
    """Valid 1-D convolution of a filter bank over a token matrix.

    ``s`` is d x T (one column per token), ``filters`` is F x d x h. Each
    filter slides over all T-h+1 windows and emits one response per window,
    giving an F x (T-h+1) feature map.
    """
    s, filters = _lift(s), _lift(filters)
    S, W = s.data, filters.data
    if S.ndim != 2 or W.ndim != 3 or W.shape[1] != S.shape[0]:
        raise ShapeMismatchError(f"conv1d: sequence {S.shape}, filters {W.shape}")
    d, T = S.shape
    F, _, h = W.shape
    if h > T:
        raise WindowTooLargeError(f"window {h} > sequence length {T}")
    L = T - h + 1
    windows = np.lib.stride_tricks.sliding_window_view(S, h, axis=1)  # (d, L, h)
    patches = windows.transpose(1, 0, 2).reshape(L, d * h)
    Wf = W.reshape(F, d * h)

    def bwd(g):
        dW = (g @ patches).reshape(F, d, h)
        dpatch = (g.T @ Wf).reshape(L, d, h)
        dS = np.zeros_like(S)
        for t in range(L):
            dS[:, t:t + h] += dpatch[t]
        return [(s, dS), (filters, dW)]

    return _record("conv1d", (s, filters), Wf @ patches.T, bwd)


def max_over_time(x, n_cols: int | None = None) -> Tensor:
    """Row-wise max over the first ``n_cols`` columns (all by default).

    Ties break toward the lowest time index, so the gradient route is
    deterministic: each row's gradient lands on its argmax column only.
    """
    x = _lift(x)
    X = x.data
    if X.ndim != 2:
        raise ShapeMismatchError(f"max_over_time: need 2-D, got {X.shape}")
    n = X.shape[1] if n_cols is None else int(n_cols)
    if not 1 <= n <= X.shape[1]:
        raise ShapeMismatchError(f"max_over_time: n_cols={n} out of range")
    sub = X[:, :n]
    idx = sub.argmax(axis=1)
    rows = np.arange(X.shape[0])

    def bwd(g):
        dX = np.zeros_like(X)
        dX[rows, idx] = g
        return [(x, dX)]

    return _record("max_over_time", (x,), sub[rows, idx], bwd, meta={"n": n, "idx": idx})


def mean_over_time(x, n_cols: int | None = None) -> Tensor:
    """Row-wise mean over the first ``n_cols`` columns (all by default)."""
    x = _lift(x)
    X = x.data
    if X.ndim != 2:
        raise ShapeMismatchError(f"mean_over_time: need 2-D, got {X.shape}")
    n = X.shape[1] if n_cols is None else int(n_cols)
    if not 1 <= n <= X.shape[1]:
        raise ShapeMismatchError(f"mean_over_time: n_cols={n} out of range")

    def bwd(g):
        dX = np.zeros_like(X)
        dX[:, :n] = g[:, None] / n
        return [(x, dX)]

    return _record("mean_over_time", (x,), X[:, :n].mean(axis=1), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as err:
        raise ShapeMismatchError(f"concat along axis {axis}") from err
    sizes = [d.shape[axis] for d in datas]

    def bwd(g):
        contribs = []
        start = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            contribs.append((t, g[tuple(sl)]))
            start += n
        return contribs

    return _record("concat", tuple(tensors), out, bwd)


def sqdist_to_const(x, c) -> Tensor:
    """Squared Euclidean distance from ``x`` to a constant vector ``c``."""
    x = _lift(x)
    c = np.asarray(c, dtype=x.data.dtype)
    if c.shape != x.data.shape:
        raise ShapeMismatchError(f"sqdist: {x.shape} vs {c.shape}")
    diff = x.data - c

    def bwd(g):
        return [(x, 2.0 * diff * g)]

    return _record("sqdist_to_const", (x,), np.asarray((diff * diff).sum()), bwd)


def softmax_cross_entropy(logits, target: int) -> Tensor:
    """Cross-entropy of softmax(logits) against an integer class target."""
    logits = _lift(logits)
    z = logits.data
    if z.ndim != 1:
        raise ShapeMismatchError(f"softmax_cross_entropy: need 1-D logits, got {z.shape}")
    target = int(target)
    if not 0 <= target < z.shape[0]:
        raise ShapeMismatchError(f"target {target} outside {z.shape[0]} classes")
    m = z.max()
    e = np.exp(z - m)
    total = e.sum()
    loss = np.asarray(m + np.log(total) - z[target])

    def bwd(g):
        p = e / total
        p = p.copy()
        p[target] -= 1.0
        return [(logits, p * g)]

    return _record("softmax_cross_entropy", (logits,), loss, bwd)


# ---------------------------------------------------------------------------
# reverse pass


def backward(graph: Graph, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Walk the tape in reverse and return dLoss/dTheta per trainable leaf.

    Gradients of non-leaf intermediates are discarded; each graph may be
    consumed once (re-record to differentiate again).
    """
    if graph._consumed:
        raise GraphConsumedError("graph already consumed; re-record before backward")
    if loss.data.size != 1:
        raise ShapeMismatchError(f"loss must be scalar, got shape {loss.shape}")
    graph._consumed = True
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g_out = grads.get(node.output)
        if g_out is None:
            continue
        for tensor, contrib in node.backward_fn(g_out):
            prev = grads.get(tensor)
            grads[tensor] = contrib if prev is None else prev + contrib
    return {t: g for t, g in grads.items() if t.requires_grad}


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """One Adam update with bias correction; parameters updated in place.

    Parameters missing from ``grads`` take a zero gradient (their moments
    still decay). Non-finite gradient entries are an error.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteValueError(f"non-finite gradient for {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# gradient-check oracle


def _forward_value(f) -> float:
    with Graph():
        out = f()
    return float(out.data)


def _assert_checkable(graph: Graph, step: float) -> None:
    for node in graph.nodes:
        if node.op == "relu":
            x = node.inputs[0].data
            if np.any(np.abs(x) <= step):
                raise NonCheckablePointError("relu input within one step of 0")
        elif node.op == "max_over_time":
            x = node.inputs[0].data[:, :node.meta["n"]]
            if x.shape[1] >= 2:
                top2 = np.sort(x, axis=1)[:, -2:]
                if np.any(top2[:, 1] - top2[:, 0] <= 2 * step):
                    raise NonCheckablePointError("max pooling tie within step window")


def finite_diff_check(f, params: dict[str, Tensor], step: float = 1e-5) -> float:
    """Compare backward() against central finite differences.

    ``f`` is a zero-argument function that rebuilds the scalar loss from the
    current values of ``params`` (it is re-evaluated at perturbed points).
    Returns the worst relative error over all parameter entries, with
    denominator max(|a|, |b|, 1e-8). Raises NonCheckablePointError when the
    loss sits at a relu kink or a pooling tie, where the comparison is
    meaningless.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with Graph() as graph:
        loss = f()
        _assert_checkable(graph, step)
    auto = backward(graph, loss)
    worst = 0.0
    for p in params.values():
        g_auto = auto.get(p)
        if g_auto is None:
            g_auto = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        g_flat = np.asarray(g_auto).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = _forward_value(f)
            flat[i] = orig - step
            f_minus = _forward_value(f)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(numeric), abs(g_flat[i]), 1e-8)
            worst = max(worst, abs(numeric - g_flat[i]) / denom)
    return worst

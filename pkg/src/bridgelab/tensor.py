"""Dense tensors, counter-based RNG streams, and reverse-mode autodiff.

The graph is define-by-run: every operation records its input tensors and
a backward closure on its output, so each training batch builds a fresh
graph. Training arithmetic runs in float32 by convention; verification
paths (grad_check, eigensolvers) promote to float64.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

_U64 = 0xFFFFFFFFFFFFFFFF


class ContractViolation(ValueError):
    """An operation was invoked outside its documented contract."""


# ---------------------------------------------------------------------------
# deterministic, splittable RNG


def splitmix64(z: int) -> int:
    """One round of the splitmix64 mixer; used to derive child stream ids."""
    z = (z + 0x9E3779B97F4A7C15) & _U64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return (z ^ (z >> 31)) & _U64


class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Every draw instantiates a Philox generator at the current counter and
    then advances the counter by one, so the same (seed, stream_id,
    counter) triple always yields the same values, independent of any
    other stream. `split` derives a statistically independent child
    stream without consuming state from the parent.
    """

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & _U64
        self.stream_id = int(stream_id) & _U64
        self.counter = int(counter)

    def split(self, child: int) -> "RngStream":
        return RngStream(self.seed, splitmix64(self.stream_id ^ splitmix64(child)))

    def _next(self) -> np.random.Generator:
        bg = np.random.Philox(counter=[self.counter, 0, 0, 0], key=[self.seed, self.stream_id])
        self.counter += 1
        return np.random.Generator(bg)

    def normal(self, shape=(), scale: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self._next().standard_normal(shape) * scale).astype(dtype)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._next().uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._next().integers(low, high, size=shape, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def choice_no_replace(self, n: int, k: int) -> np.ndarray:
        return self._next().choice(n, size=k, replace=False)

    def rademacher(self, shape) -> np.ndarray:
        return self._next().integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def random_orthogonal(d: int, rng: RngStream) -> np.ndarray:
    """Seeded random orthogonal d x d matrix (Haar via QR, signs fixed)."""
    a = rng.normal((d, d))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


# ---------------------------------------------------------------------------
# tensors and the define-by-run graph


class Tensor:
    """Dense row-major array plus autodiff bookkeeping.

    A leaf tensor holds data (parameters, constants); a non-leaf was
    produced by an operation and carries the parents and a backward
    closure mapping the output gradient to per-parent gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 *, op: str = "leaf", parents: tuple = (), bwd: Callable | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = op
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar used mostly by tests and small fixtures
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, bwd, op) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, op=op, parents=tuple(parents), bwd=bwd if rg else None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Graph:
    """Topologically ordered view of the tensors reachable from a root."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @staticmethod
    def trace(root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return Graph(order)


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Reverse-mode accumulation from a scalar loss into every reachable leaf.

    Gradients sum across multiple uses of the same tensor; traversal order
    is fixed by the trace, so the accumulation is deterministic.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.data.shape}")
    g = graph if graph is not None else Graph.trace(loss)
    for t in g.nodes:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(g.nodes):
        if t._bwd is None or t.grad is None:
            continue
        for parent, pg in zip(t._parents, t._bwd(t.grad)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg)
            parent.grad = pg if parent.grad is None else parent.grad + pg
    return g


# ---------------------------------------------------------------------------
# forward operators


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * a.data.dtype.type(s)

    def bwd(g):
        return (g * a.data.dtype.type(s),)

    return _make(out, (a,), bwd, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands must share leading (batch) dims, or be 2D."""
    if a.data.ndim >= 3 and b.data.ndim >= 3 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ContractViolation("batched matmul requires identical leading dims")
    out = a.data @ b.data

    def bwd(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = g @ bt
        gb = at @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) with x of shape (..., k), w (k, n), b (n,)."""
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.data.shape[-1])
        gx = (g @ w.data.T).reshape(x.data.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, bwd, "linear")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _make(out, (a,), bwd, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(tuple(shape))

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), bwd, "reshape")


def mean(a: Tensor, axis: int) -> Tensor:
    out = a.data.mean(axis=axis)
    n = a.data.shape[axis]

    def bwd(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _make(out, (a,), bwd, "mean")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype),)

    return _make(out, (a,), bwd, "sum")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * du),)

    return _make(out.astype(x.dtype), (a,), bwd, "gelu")


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _make(y.astype(a.data.dtype), (a,), bwd, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine."""
    if gain.data.shape != x.data.shape[-1:] or bias.data.shape != x.data.shape[-1:]:
        raise ContractViolation("layer_norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.data.shape[-1]

    def bwd(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return gx.astype(x.data.dtype), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out.astype(x.data.dtype), (x, gain, bias), bwd, "layer_norm")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels; gradient is softmax - onehot.

    Accepts logits of shape (C,), (B, C) or (B, T, C) with labels shaped
    accordingly; loss is averaged over all rows.
    """
    lg = logits.data
    if lg.ndim == 1:
        lg2 = lg.reshape(1, -1)
    else:
        lg2 = lg.reshape(-1, lg.shape[-1])
    y = np.asarray(labels).reshape(-1)
    c = lg2.shape[-1]
    if y.shape[0] != lg2.shape[0]:
        raise ContractViolation("labels must match the leading extents of logits")
    if y.min() < 0 or y.max() >= c:
        raise ContractViolation(f"label out of range [0, {c})")
    z = lg2 - lg2.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(lg2.shape[0])
    losses = lse - z[rows, y]
    out = np.asarray(losses.mean(), dtype=lg.dtype)

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1.0
        p *= g / lg2.shape[0]
        return (p.reshape(lg.shape).astype(lg.dtype),)

    return _make(out, (logits,), bwd, "softmax_xent")


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; gradient scatter-adds."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), bwd, "embed")


def split_last(a: Tensor, parts: int) -> tuple:
    """Split the last axis into `parts` equal tensors."""
    n = a.data.shape[-1]
    if n % parts:
        raise ContractViolation(f"cannot split last axis of {n} into {parts} parts")
    w = n // parts
    outs = []
    for i in range(parts):
        sl = slice(i * w, (i + 1) * w)

        def bwd(g, sl=sl):
            gp = np.zeros_like(a.data)
            gp[..., sl] = g
            return (gp,)

        outs.append(_make(np.ascontiguousarray(a.data[..., sl]), (a,), bwd, "split"))
    return tuple(outs)


# ---------------------------------------------------------------------------
# finite-difference gradient checker


def grad_check(fn: Callable[[dict], Tensor], params: dict, h: float = 1e-5,
               rng: RngStream | None = None, max_coords: int | None = None) -> float:
    """Max deviation of reverse-mode gradients from central differences.

    `fn` maps {name: Tensor} to a scalar loss; `params` holds float arrays
    that are promoted to float64. When `max_coords` is set, a seeded
    random coordinate subset is checked per parameter. The returned error
    is max_i |g_ad - g_fd| scaled by the largest finite-difference
    component, so a tiny true gradient cannot inflate it.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tensors = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in work.items()}
    loss = fn(tensors)
    backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}

    diffs: list[float] = []
    fd_mags: list[float] = []
    for name, base in work.items():
        flat = base.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                raise ContractViolation("coordinate subsetting needs an RngStream")
            coords = rng.choice_no_replace(n, max_coords)
        else:
            coords = np.arange(n)
        a_flat = analytic[name].reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            fp = _eval(fn, work)
            flat[idx] = orig - h
            fm = _eval(fn, work)
            flat[idx] = orig
            fd = (fp - fm) / (2.0 * h)
            diffs.append(abs(a_flat[idx] - fd))
            fd_mags.append(abs(fd))
    denom = max(max(fd_mags), 1e-12)
    return max(diffs) / denom


def _eval(fn, work: dict) -> float:
    tensors = {k: Tensor(v.copy()) for k, v in work.items()}
    return fn(tensors).item()


def assert_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{what} contains non-finite values")

"""Dense rank-2 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When grad mode is on and any input
requires gradients, the result keeps references to its inputs and a closure
that maps the output gradient to input gradients; :func:`backward` walks that
record in reverse topological order exactly once per node.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise ShapeError(f"rank-{arr.ndim} data; tensors are at most rank 2")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on a {self.shape} tensor")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result; records the op when any parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Public hook for ops defined outside this module (e.g. manifold maps)."""
    return _make(np.asarray(data, dtype=np.float64), parents, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    out = grad
    for axis in (0, 1):
        if shape[axis] == 1 and out.shape[axis] != 1:
            out = out.sum(axis=axis, keepdims=True)
    return out


def _broadcast_shape(a: Tensor, b: Tensor) -> None:
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}")


# ------------------------------------------------------------------ elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return a
    if rate >= 1.0:
        return scale(a, 0.0)
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ------------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def spmm(matrix, x: Tensor) -> Tensor:
    """Constant (sparse or dense) matrix times a tensor; only ``x`` is differentiated."""
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm {matrix.shape} @ {x.shape}")
    out = np.asarray(matrix @ x.data)
    mt = matrix.T
    return _make(out, (x,), lambda g: (np.asarray(mt @ g),))


def edge_propagate(x: Tensor, coef: Tensor, src: np.ndarray, dst: np.ndarray) -> Tensor:
    """``out[u] = sum over edges e=(u, v) of coef[e] * x[v]``.

    ``src``/``dst`` list directed edges; ``coef`` has shape ``[E, 1]``.
    """
    n = x.shape[0]
    if coef.shape != (src.shape[0], 1):
        raise ShapeError(f"coef shape {coef.shape} for {src.shape[0]} edges")
    a = sp.csr_matrix((coef.data[:, 0], (src, dst)), shape=(n, n))
    out = np.asarray(a @ x.data)

    def backward(g):
        gx = np.asarray(a.T @ g)
        gc = np.einsum("ij,ij->i", g[src], x.data[dst])[:, None]
        return gx, gc

    return _make(out, (x, coef), backward)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("row index out of range")
    return _make(x.data[idx], (x,), backward)


def take_cols(x: Tensor, idx: Sequence[int] | np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out.T, idx, g.T)
        return (out,)

    return _make(x.data[:, idx], (x,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([0] + [p.shape[0] for p in parts])
    return _make(
        np.concatenate([p.data for p in parts], axis=0),
        parts,
        lambda g: [g[sizes[i] : sizes[i + 1]] for i in range(len(parts))],
    )


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([0] + [p.shape[1] for p in parts])
    return _make(
        np.concatenate([p.data for p in parts], axis=1),
        parts,
        lambda g: [g[:, sizes[i] : sizes[i + 1]] for i in range(len(parts))],
    )


# ------------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    return _make(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(a.shape, g[0, 0] / n),))


def sum_rows(a: Tensor) -> Tensor:
    """Sum along each row, giving ``[r, 1]``."""
    return _make(a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_pool(a: Tensor) -> Tensor:
    """Mean over rows, giving ``[1, c]``."""
    r = a.shape[0]
    return _make(
        a.data.mean(axis=0, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g / r, a.shape).copy(),),
    )


def row_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm (rows with norm < eps are left near zero)."""
    norm = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    safe = np.maximum(norm, eps)
    out = a.data / safe

    def backward(g):
        proj = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * proj * (norm >= eps)) / safe,)

    return _make(out, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (a,), backward)


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _make(out, (a,), backward)


# ------------------------------------------------------------------------ losses

def nt_xent_loss(z1: Tensor, z2: Tensor, tau: float = 0.2) -> Tensor:
    """Normalized-temperature cross-entropy over ``2B`` anchors.

    Rows are L2-normalized first, so similarities are cosines. Anchor ``i``
    in one view is positive with row ``i`` of the other view; the other
    ``2B - 2`` rows are negatives.
    """
    if z1.shape != z2.shape:
        raise ShapeError(f"view shapes differ: {z1.shape} vs {z2.shape}")
    b = z1.shape[0]
    if b < 2:
        raise ValueError("NT-Xent needs a batch of at least 2 (no negatives otherwise)")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = row_normalize(concat_rows([z1, z2]))
    logits = scale(matmul(z, transpose(z)), 1.0 / tau)
    self_mask = np.zeros((2 * b, 2 * b))
    np.fill_diagonal(self_mask, -1e30)
    logp = log_softmax_rows(add(logits, Tensor(self_mask)))
    pos = np.zeros((2 * b, 2 * b))
    idx = np.arange(b)
    pos[idx, idx + b] = 1.0
    pos[idx + b, idx] = 1.0
    return scale(sum_all(mul(logp, Tensor(pos))), -1.0 / (2 * b))


def cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    bsz, c = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"{labels.shape[0]} labels for {bsz} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside [0, {c})")
    onehot = np.zeros((bsz, c))
    onehot[np.arange(bsz), labels] = 1.0
    return scale(sum_all(mul(log_softmax_rows(logits), Tensor(onehot))), -1.0 / bsz)


# ---------------------------------------------------------------------- backward

def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse pass from a scalar; returns gradients for every reached leaf.

    Leaves in ``params`` that the loss does not depend on get an explicit
    zero gradient. The recorded graph is released afterwards, so a second
    call on the same loss raises.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("this loss has already been differentiated")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                leaves[node] = g
                node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._consumed = True
    if params is not None:
        for p in params:
            if p not in leaves:
                leaves[p] = np.zeros_like(p.data)
                p.grad = leaves[p]
    return leaves


# --------------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update with decoupled weight decay; returns new arrays and state."""
    b1, b2 = betas
    t = state.step + 1
    new_m, new_v, out = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out[name] = p - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
        new_m[name], new_v[name] = m, v
    return out, AdamState(t, new_m, new_v)


class Adam:
    """Stateful wrapper over :func:`adam_step` for a dict of leaf tensors."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        arrays = {k: t.data for k, t in self.params.items()}
        named = {k: grads[t] for k, t in self.params.items() if t in grads}
        new, self.state = adam_step(arrays, named, self.state, self.lr, self.weight_decay)
        for k, t in self.params.items():
            t.data = new[k]
            t.grad = None


# -------------------------------------------------------------------- checkpoints

MAGIC = b"RGFM1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    """Binary dump: magic, then per entry name length, name, rows, cols, float64 data."""
    chunks = [MAGIC]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise CheckpointError(f"{name!r}: only rank-2 arrays can be stored")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise CheckpointError(f"{path}: truncated name length at byte {pos}")
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + nlen + 8 > len(blob):
            raise CheckpointError(f"{path}: truncated entry header at byte {pos}")
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: entry {name!r} needs {nbytes} bytes, file ends early")
        out[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += nbytes
    return out

"""Small reverse-mode differentiation kernel over dense float64 arrays.

Operations are eager: each op computes its value immediately and, unless
recording is disabled with :func:`no_grad`, appends a node to the implicit
graph rooted at its output.  :func:`backward` walks that graph once and
accumulates gradients into every leaf that requires them.

The op set is deliberately fixed to what a GRU, a bidirectional GRU
encoder, embeddings and a logistic head need.
"""

from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "Tensor",
    "no_grad",
    "constant",
    "add",
    "sub",
    "mul",
    "matmul",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "log_sigmoid",
    "softmax",
    "log_softmax",
    "embedding",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "backward",
    "ParamStore",
    "sgd_step",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]

_RECORDING = True


class AutodiffError(RuntimeError):
    """Raised for shape mismatches, domain errors and graph misuse."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (sampling, scoring)."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``parents`` and ``backward_fn`` are set for op outputs; leaves created by
    the user have neither.  ``requires_grad`` leaves receive gradients.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op", "_consumed")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    # Operator sugar keeps model code close to the math.
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

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _check_finite(op: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise AutodiffError(f"{op}: produced non-finite values")
    return value


def _make(op: str, value: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(_check_finite(op, value))
    out.op = op
    if _RECORDING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum out leading axes and axes that were size 1 in the operand.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise AutodiffError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None
    # Only trailing-aligned bias broadcasting is needed by the models.
    if len(a.shape) != len(b.shape) and 0 not in (len(a.shape), len(b.shape)):
        short, long_ = sorted((a.shape, b.shape), key=len)
        if long_[len(long_) - len(short):] != short:
            raise AutodiffError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value

    def bw(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make("mul", av * bv, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        return g @ bv.T, av.T @ g

    return _make("matmul", av @ bv, (a, b), bw)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (x,), bw)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.value)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (x,), bw)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.value)

    def bw(g):
        return (g * out,)

    return _make("exp", out, (x,), bw)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.value <= 0):
        raise AutodiffError("log: argument must be strictly positive")
    v = x.value

    def bw(g):
        return (g / v,)

    return _make("log", np.log(v), (x,), bw)


def log_sigmoid(x) -> Tensor:
    """``log(sigmoid(x))`` without overflow; ``log(1 - sigmoid(x))`` is ``log_sigmoid(-x)``."""
    x = _as_tensor(x)
    v = x.value
    out = -np.logaddexp(0.0, -v)
    s = np.exp(out)  # sigmoid(v)

    def bw(g):
        return (g * (1.0 - s),)

    return _make("log_sigmoid", out, (x,), bw)


def softmax(x) -> Tensor:
    """Row softmax over the last axis, max-subtracted."""
    x = _as_tensor(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), bw)


def log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), bw)


def embedding(table, indices) -> Tensor:
    """Gather rows of a 2-D ``table`` by an integer index array."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.value.ndim != 2:
        raise AutodiffError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise AutodiffError(f"embedding: index out of range for table {table.shape}")

    def bw(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding", table.value[idx], (table,), bw)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise AutodiffError(f"concat: shape mismatch {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", out, ts, bw)


def reduce_sum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(x.value.sum(axis=axis)), (x,), bw)


def reduce_mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis=axis), 1.0 / n)


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf needing it.

    The recording is consumed: calling this again on the same output raises.
    """
    if output.value.size != 1:
        raise AutodiffError(f"backward: output must be scalar, got shape {output.shape}")
    if output._consumed:
        raise AutodiffError("backward: recording already consumed")
    if not output.requires_grad:
        output._consumed = True
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node.backward_fn = None
        node.parents = ()
        node._consumed = True
    output._consumed = True


class ParamStore:
    """Named parameter tensors with a stable flat view and optimizer state.

    The flat view concatenates parameters in lexicographic name order, each
    raveled in C order.
    """

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.steps = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    @property
    def size(self) -> int:
        return sum(t.value.size for t in self._params.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.value.ravel() for _, t in self.items()]) if self._params else np.zeros(0)

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"flat vector has length {flat.size}, expected {self.size}")
        out, i = {}, 0
        for name, t in self.items():
            n = t.value.size
            out[name] = flat[i:i + n].reshape(t.shape).copy()
            i += n
        return out

    def set_flat(self, flat: np.ndarray) -> None:
        for name, value in self.unflatten(flat).items():
            self._params[name].value = value

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([
            (t.grad if t.grad is not None else np.zeros_like(t.value)).ravel()
            for _, t in self.items()
        ])

    def set_flat_grad(self, flat: np.ndarray) -> None:
        for name, g in self.unflatten(flat).items():
            self._params[name].grad = g

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        other = ParamStore({n: t.value.copy() for n, t in self.items()})
        other.state = {n: {k: v.copy() for k, v in s.items()} for n, s in self.state.items()}
        other.steps = self.steps
        return other


def _checked_grads(params: ParamStore) -> list[tuple[str, Tensor, np.ndarray]]:
    out = []
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.value)
        if not np.all(np.isfinite(g)):
            raise AutodiffError(f"non-finite gradient in parameter {name!r}; step aborted")
        out.append((name, t, g))
    return out


def sgd_step(params: ParamStore, lr: float) -> None:
    if lr <= 0:
        raise ValueError("lr must be positive")
    for _, t, g in _checked_grads(params):
        t.value = t.value - lr * g
    params.steps += 1
    params.zero_grads()


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    if lr <= 0:
        raise ValueError("lr must be positive")
    checked = _checked_grads(params)
    params.steps += 1
    k = params.steps
    for name, t, g in checked:
        s = params.state.setdefault(name, {"m": np.zeros_like(t.value), "v": np.zeros_like(t.value)})
        s["m"] = beta1 * s["m"] + (1 - beta1) * g
        s["v"] = beta2 * s["v"] + (1 - beta2) * g * g
        m_hat = s["m"] / (1 - beta1 ** k)
        v_hat = s["v"] / (1 - beta2 ** k)
        t.value = t.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    params.zero_grads()


# Checkpoint layout (all integers little-endian):
#   b"MLGNCKPT"                      magic, 8 bytes
#   uint32 version                   currently 1
#   uint32 meta_len, meta_len bytes  UTF-8 JSON object (model metadata)
#   uint32 n_params
#   per parameter, in lexicographic name order:
#     uint32 name_len, name bytes (UTF-8)
#     uint32 ndim, ndim x uint64 dims
#     prod(dims) x float64 ('<f8'), C order
_MAGIC = b"MLGNCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParamStore, meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(params.names()))]
    for name, t in params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", t.value.ndim) + struct.pack(f"<{t.value.ndim}Q", *t.shape))
        chunks.append(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    version, meta_len = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        params.add(name, arr.astype(np.float64))
    return params, meta

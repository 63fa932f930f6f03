"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every operation appends a node to an implicit graph (micrograd style: each
Tensor remembers its parents and a backward closure). Kernels are plain
numpy, single-threaded, with a fixed reduction order, so identical inputs
always produce bit-identical outputs. Any NaN/Inf produced by a kernel
raises immediately instead of propagating silently.

float32 is the training dtype; float64 is used by gradient-check oracles.
Ops preserve the dtype of their inputs.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(RuntimeError):
    """A kernel produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes do not conform to a kernel's contract."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "op", "_parents", "_backward")

    def __init__(self, data, parents=(), op="leaf", _backward=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.op = op
        self._parents = parents
        self._backward = _backward
        _check_finite(arr, op)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar node.

        Gradients accumulate additively into ``.grad`` of every reachable
        tensor; leaves not reachable from the loss simply keep ``grad=None``
        (read as zero by the optimizer).
        """
        if self.data.shape != ():
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = _toposort(self)
        self._accum(np.ones((), dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS: graphs can be deep and recursion limits are unkind.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data + b.data, (a, b), "add")

    def _bw(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    out._backward = _bw
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data - b.data, (a, b), "sub")

    def _bw(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(-g, b.data.shape))

    out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, (a,), "neg")
    out._backward = lambda g: a._accum(-g)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data * b.data, (a, b), "mul")

    def _bw(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul requires rank >= 2 operands, got {a.shape} @ {b.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b), "matmul")

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        a._accum(_unbroadcast(ga, a.data.shape))
        b._accum(_unbroadcast(gb, b.data.shape))

    out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), (a,), "relu")
    out._backward = lambda g: a._accum(g * (a.data > 0))
    return out


# max-with-zero from the kernel set is exactly relu; the alias keeps call
# sites honest about intent (hinge losses vs activations).
max_with_zero = relu


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    c = np.asarray(0.7978845608028654, dtype=a.dtype)  # sqrt(2/pi)
    k = np.asarray(0.044715, dtype=a.dtype)
    x = a.data
    x2 = x * x
    inner = c * (x + k * x2 * x)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t), (a,), "gelu")

    def _bw(g):
        dinner = c * (1.0 + 3.0 * k * x2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        a._accum(g * da)

    out._backward = _bw
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data**2, (a,), "square")
    out._backward = lambda g: a._accum(g * 2.0 * a.data)
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)
    out = Tensor(data, (a,), "log")
    out._backward = lambda g: a._accum(g / a.data)
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), (a,), "exp")
    out._backward = lambda g: a._accum(g * out.data)
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed stably."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, (a,), "softmax")

    def _bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        a._accum(y * (g - dot))

    out._backward = _bw
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    Uses population variance, so normalized rows have mean 0 and variance 1
    before the affine map.
    """
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), "
            f"got {gain.shape} and {bias.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.dtype))
    xhat = (a.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data, (a, gain, bias), "layer_norm")

    def _bw(g):
        dixhat = g * gain.data
        term = dixhat - dixhat.mean(axis=-1, keepdims=True)
        term = term - xhat * (dixhat * xhat).mean(axis=-1, keepdims=True)
        a._accum(term * inv)
        reduce_axes = tuple(range(g.ndim - 1))
        gain._accum((g * xhat).sum(axis=reduce_axes))
        bias._accum(g.sum(axis=reduce_axes))

    out._backward = _bw
    return out


def mean(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.mean(axis=axis), (a,), "mean")
    n = a.data.size if axis is None else a.data.shape[axis]

    def _bw(g):
        if axis is None:
            a._accum(np.full_like(a.data, g / n))
        else:
            a._accum(np.expand_dims(g, axis) / n * np.ones_like(a.data))

    out._backward = _bw
    return out


def tsum(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis), (a,), "sum")

    def _bw(g):
        if axis is None:
            a._accum(np.full_like(a.data, g))
        else:
            a._accum(np.expand_dims(g, axis) * np.ones_like(a.data))

    out._backward = _bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,), "reshape")
    out._backward = lambda g: a._accum(g.reshape(a.data.shape))
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = Tensor(np.swapaxes(a.data, ax1, ax2), (a,), "swapaxes")
    out._backward = lambda g: a._accum(np.swapaxes(g, ax1, ax2))
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat requires at least one tensor")
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat"
    )
    sizes = [t.data.shape[axis] for t in tensors]

    def _bw(g):
        start = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + size)
            t._accum(g[tuple(idx)])
            start += size

    out._backward = _bw
    return out


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx], (a,), "getitem")

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    out._backward = _bw
    return out


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup into an embedding table (integer indices, not a Tensor)."""
    indices = np.asarray(indices)
    if indices.max(initial=0) >= table.data.shape[0]:
        raise ShapeError(
            f"embedding index {int(indices.max())} out of range "
            f"for table with {table.data.shape[0]} rows"
        )
    return getitem(table, indices)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer class labels.

    Fuses log-softmax and the label gather for numerical stability; the
    straight-line oracles in the test suite recompute it independently.
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ShapeError(f"label out of range for {c} classes")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(n), labels]
    loss = (lse - picked).mean()
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
    out = Tensor(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy")

    def _bw(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        logits._accum(g * grad / n)

    out._backward = _bw
    return out


def grads_of(loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
    """Backward pass returning gradients aligned with ``params``.

    Parameters unreachable from the loss get explicit zero gradients. Any
    gradient left over from an earlier backward pass is cleared first so
    repeated calls do not accumulate.
    """
    for p in params:
        p.grad = None
    loss.backward()
    return [
        p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

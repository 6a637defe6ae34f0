"""Dense float64 tensors with reverse-mode gradients.

Every value in the model is a :class:`Tensor`: a numpy ``float64`` array plus
enough bookkeeping to run a backward pass.  Leading dimensions are treated as
batch dimensions by :func:`matmul`, so a ``(B, N, d)`` tensor is a batch of
``N x d`` matrices.

Only the operations the model actually needs are provided.
"""
from __future__ import annotations

import contextlib
import io
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True
CHECK_FINITE = True


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check(data: np.ndarray, op: str) -> np.ndarray:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite value produced by {op}")
    return data


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward, op):
        out = cls(_check(data, op))
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    # -- backward ---------------------------------------------------------------
    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data) if seed is None else seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                        "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor._make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def _logistic(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _logistic(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    """x * logistic(x): the smooth ramp used inside feed-forward blocks."""
    x = a.data
    s = _logistic(x)
    return Tensor._make(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return Tensor._make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data
    return Tensor._make(np.where(take_a, a.data, b.data), (a, b),
                        lambda g: (_unbroadcast(g * take_a, a.shape),
                                   _unbroadcast(g * ~take_a, b.shape)), "minimum")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data >= b.data
    return Tensor._make(np.where(take_a, a.data, b.data), (a, b),
                        lambda g: (_unbroadcast(g * take_a, a.shape),
                                   _unbroadcast(g * ~take_a, b.shape)), "maximum")


# -- reductions and shape ops ---------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    """Transpose the two trailing axes."""
    return Tensor._make(np.swapaxes(a.data, -1, -2), (a,),
                        lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(a.data[idx], (a,), back, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                        lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack_mean(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors."""
    out = tensors[0]
    for t in tensors[1:]:
        out = out + t
    return out * (1.0 / len(tensors))


# -- linear algebra ---------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product over the two trailing axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), back, "matmul")


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    out = softmax_array(a.data, axis)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), back, "softmax")


# -- gradients ------------------------------------------------------------------------
def grad(f: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``f`` with respect to each of ``params``.

    Parameters that ``f`` does not depend on get an all-zero gradient.
    """
    if f.data.size != 1:
        raise ValueError(f"grad needs a scalar objective, got shape {f.shape}")
    for p in params:
        p.grad = None
    f.backward(np.ones_like(f.data))
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


# -- layers ----------------------------------------------------------------------------
class LinearLayer:
    """Affine map ``x @ W + b``.

    With ``axis="tokens"`` the map acts on the token axis (second to last)
    instead of the channel axis, which is how agents and token resamplers are
    built: an ``(N_in, N_out)`` weight takes ``(..., N_in, d)`` to ``(..., N_out, d)``.
    Token-axis biases are per output token and broadcast over channels.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 bias: bool = True, axis: str = "channels", weight=None, bias_value=None):
        if axis not in ("channels", "tokens"):
            raise ValueError(f"unknown axis {axis!r}")
        self.d_in, self.d_out, self.axis = d_in, d_out, axis
        bound = 1.0 / np.sqrt(d_in)
        if weight is None:
            if rng is None:
                raise ValueError("need rng or explicit weight")
            weight = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.weight = parameter(weight)
        if self.weight.shape != (d_in, d_out):
            raise ShapeError(f"weight shape {self.weight.shape} != {(d_in, d_out)}")
        self.bias = None
        if bias:
            if bias_value is None:
                bias_value = rng.uniform(-bound, bound, size=(d_out,)) if rng is not None else np.zeros(d_out)
            self.bias = parameter(bias_value)

    def __call__(self, x: Tensor) -> Tensor:
        if self.axis == "channels":
            out = matmul(x, self.weight)
            return out if self.bias is None else out + self.bias
        out = swap_last(matmul(swap_last(x), self.weight))
        if self.bias is None:
            return out
        return out + reshape(self.bias, (self.d_out, 1))

    def parameters(self) -> dict[str, Tensor]:
        ps = {"weight": self.weight}
        if self.bias is not None:
            ps["bias"] = self.bias
        return ps

    @classmethod
    def identity(cls, d: int, axis: str = "channels") -> "LinearLayer":
        return cls(d, d, bias=True, axis=axis, weight=np.eye(d), bias_value=np.zeros(d))


# -- checkpoint I/O ---------------------------------------------------------------
MAGIC = b"AFCK"
VERSION = 1


def dump_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Serialize ``name -> array`` (layout in docs/checkpoint_format.md)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def load_arrays(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * n
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return out


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_arrays(arrays))


def read_arrays(path: str | Path) -> dict[str, np.ndarray]:
    return load_arrays(Path(path).read_bytes())


def flatten_params(named: Iterable[tuple[str, Tensor]]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in named}

"""Deterministic reverse-mode tensor core.

A :class:`Tensor` wraps a float64 numpy array and records the operations
that produced it, so a scalar result can push gradients back to every
leaf that asked for them. All kernels are pure: they never mutate their
inputs, and identical inputs give bit-identical outputs. Feature maps use
NCHW layout (batch, channel, height, width).
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "add",
    "scale",
    "mean_pair",
    "relu",
    "reshape",
    "concat",
    "split",
    "concat_batch",
    "split_batch",
    "write_tensor",
    "read_tensor",
]


class ShapeError(ValueError):
    """Raised when an operation receives tensors of incompatible shape."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation.

    ``data`` is treated as immutable once the tensor exists. ``kink_margin``
    is set by non-smooth ops (relu, max pooling, hinges) to the distance
    from the probe to the nearest non-differentiable point; the gradient
    checker uses it to reject probes sitting on a kink.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "kink_margin", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple = (),
        backward_fn: Callable | None = None,
        kink_margin: float | None = None,
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn
        self.kink_margin = kink_margin
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar tensor to every requires_grad leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def graph_nodes(self) -> list["Tensor"]:
        """Every tensor reachable through the parent links, self included."""
        out: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            out.append(node)
            stack.extend(node._parents)
        return out

    def relu(self) -> "Tensor":
        return relu(self)

    def reshape(self, shape: tuple[int, ...]) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn, kink_margin=None) -> Tensor:
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, kink_margin=kink_margin)
    return Tensor(data, requires_grad=True, parents=tuple(parents),
                  backward_fn=backward_fn, kink_margin=kink_margin)


def require_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects an NCHW tensor, got rank {x.data.ndim}")


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of identical shape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    a = as_tensor(a)
    s = float(s)
    out_data = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _make(out_data, (a,), backward)


def mean_pair(a: Tensor, b: Tensor) -> Tensor:
    """(a + b) / 2, used for flip-averaged feature extraction."""
    return scale(add(a, b), 0.5)


def relu(x: Tensor) -> Tensor:
    """max(0, x). Gradient at exactly 0 is 0; the kink margin is min |x|."""
    x = as_tensor(x)
    mask = x.data > 0.0
    out_data = np.where(mask, x.data, 0.0)
    margin = float(np.min(np.abs(x.data))) if x.data.size else np.inf

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _make(out_data, (x,), backward, kink_margin=margin)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out_data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    in_shape = x.data.shape

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(in_shape))

    return _make(out_data, (x,), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate tensors along ``axis``; all other dims must agree."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty part list")
    ref = parts[0].data.shape
    for i, p in enumerate(parts):
        s = p.data.shape
        if len(s) != len(ref) or any(s[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ShapeError(f"concat: part {i} shape {s} incompatible with {ref} off axis {axis}")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, sz in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + sz)
                p._accumulate(g[tuple(idx)])
            offset += sz

    return _make(out_data, parts, backward)


def split(x: Tensor, n_parts: int, axis: int) -> list[Tensor]:
    """Split into ``n_parts`` equal slices along ``axis`` (inverse of concat)."""
    x = as_tensor(x)
    size = x.data.shape[axis]
    if n_parts < 1 or size % n_parts != 0:
        raise ShapeError(f"split: axis {axis} of size {size} not divisible by {n_parts}")
    step = size // n_parts
    outs = []
    for k in range(n_parts):
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(k * step, (k + 1) * step)
        idx = tuple(idx)
        # each slice scatters its gradient back into its own range
        def backward(g, idx=idx):
            if x.requires_grad:
                full = np.zeros_like(x.data)
                full[idx] = g
                x._accumulate(full)

        outs.append(_make(x.data[idx].copy(), (x,), backward))
    return outs


def concat_batch(parts: Sequence[Tensor]) -> Tensor:
    """Stack NCHW tensors along the batch axis, order preserved."""
    for p in parts:
        require_rank4(as_tensor(p), "concat_batch")
    return concat(parts, axis=0)


def split_batch(x: Tensor, n_s: int) -> list[Tensor]:
    """Split an NCHW tensor into ``n_s`` equal batch shards (inverse of concat_batch)."""
    require_rank4(as_tensor(x), "split_batch")
    return split(x, n_s, axis=0)


# ---------------------------------------------------------------------------
# serialization: 4-integer little-endian shape header + float64 payload
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4q")


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    """Write an array of rank <= 4 as a shape header plus little-endian floats."""
    a = np.ascontiguousarray(arr, dtype="<f8")
    if a.ndim > 4:
        raise ShapeError(f"write_tensor supports rank <= 4, got {a.ndim}")
    shape = (1,) * (4 - a.ndim) + a.shape
    f.write(_HEADER.pack(*shape))
    f.write(a.tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    """Read one tensor written by :func:`write_tensor` (always returned rank 4)."""
    raw = f.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise ValueError("truncated tensor header")
    shape = _HEADER.unpack(raw)
    if any(s < 0 for s in shape):
        raise ValueError(f"corrupt tensor header {shape}")
    count = int(np.prod(shape))
    payload = f.read(count * 8)
    if len(payload) != count * 8:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)

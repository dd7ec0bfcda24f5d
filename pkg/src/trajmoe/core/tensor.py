"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions over :class:`Tensor`. When a :class:`Tape` is
active and at least one input requires gradients, the operation appends a node
holding a vector-Jacobian closure; ``Tape.backward`` replays the nodes in
reverse. Outside a tape nothing is recorded, which keeps finite-difference
probes and evaluation cheap.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, and only the innermost one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, params: Mapping[str, Tensor] | None = None):
        """Gradients of scalar ``loss`` with respect to ``params``.

        Returns a dict keyed like ``params``. Parameters that did not take part
        in the forward pass get exact zeros. With ``params=None`` the result is
        keyed by ``id`` of every leaf that received a gradient.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
                leaves[key] = inp
        if params is None:
            return {k: v for k, v in grads.items() if k in leaves}
        return {
            name: grads[id(t)] if id(t) in grads else np.zeros_like(t.data)
            for name, t in params.items()
        }


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out_data`` and register ``vjp`` on the active tape if needed.

    ``vjp(g)`` must return one gradient (or None) per input, in order.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors as a single node."""
    terms = [as_tensor(t) for t in terms]
    out = terms[0].data.copy()
    for t in terms[1:]:
        out += t.data
    return record(out, terms, lambda g: tuple(unbroadcast(g, t.shape) for t in terms))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erfc."""
    flat = np.ascontiguousarray(x.data).reshape(-1)
    out, cdf = kernels.gelu_fwd(flat)
    return record(
        out.reshape(x.shape),
        (x,),
        lambda g: (kernels.gelu_bwd(flat, cdf, np.ascontiguousarray(g).reshape(-1)).reshape(x.shape),),
    )


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return record(x.data[index], (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return record(out, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return record(
        out,
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


# ------------------------------------------------------------------ linear


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}") from exc

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return record(out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` as one node; ``x`` is (..., din), ``w`` (din, dout)."""
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ShapeError(f"linear dimension mismatch: {x.shape} x {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record(out, inputs, vjp)


def take(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` for an integer array of any shape."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"lookup index out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    flat = idx.reshape(-1)

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat, g.reshape(flat.size, -1))
        return (gt,)

    return record(table.data[idx], (table,), vjp)


# --------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), vjp)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return record(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n),))


# ------------------------------------------------------ normalisation & prob


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0.

    ``mask`` is a boolean array broadcastable to ``x``.
    """
    if x.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    data = x.data if mask is None else np.where(mask, x.data, -np.inf)
    moved = np.moveaxis(data, ax, -1)
    rows = np.ascontiguousarray(moved).reshape(-1, x.shape[ax])
    y2 = kernels.softmax_fwd(rows)
    y = np.moveaxis(y2.reshape(moved.shape), -1, ax)

    def vjp(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, ax, -1)).reshape(y2.shape)
        gx = kernels.softmax_bwd(y2, g2).reshape(moved.shape)
        return (np.moveaxis(gx, -1, ax),)

    return record(y, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then scale and shift.

    ``gain``/``bias`` are (dim,) or stacked as (groups, dim) when ``x`` is
    (groups, ..., dim), giving each leading group its own affine parameters.
    """
    dim = x.shape[-1]
    if dim == 0:
        raise ShapeError("layer_norm over an empty last dimension")
    if gain.shape != bias.shape or gain.shape[-1] != dim or gain.ndim > 2:
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs input {x.shape}")
    groups = gain.shape[0] if gain.ndim == 2 else 1
    if groups != 1 and x.shape[0] != groups:
        raise ShapeError(f"layer_norm has {groups} parameter groups but input leads with {x.shape[0]}")
    x3 = np.ascontiguousarray(x.data).reshape(groups, -1, dim)
    g2 = np.ascontiguousarray(gain.data).reshape(groups, dim)
    b2 = np.ascontiguousarray(bias.data).reshape(groups, dim)
    y, xhat, rstd = kernels.layer_norm_fwd(x3, g2, b2, eps)

    def vjp(g):
        gx, gg, gb = kernels.layer_norm_bwd(
            np.ascontiguousarray(g).reshape(x3.shape), xhat, rstd, g2
        )
        return gx.reshape(x.shape), gg.reshape(gain.shape), gb.reshape(bias.shape)

    return record(y.reshape(x.shape), (x, gain, bias), vjp)


def cross_entropy(logits: Tensor, targets, valid) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``valid``.

    ``logits`` is (..., N); ``targets`` integer and ``valid`` boolean arrays of
    shape ``logits.shape[:-1]``.
    """
    targets = np.asarray(targets)
    valid = np.asarray(valid, dtype=bool)
    if targets.shape != logits.shape[:-1] or valid.shape != targets.shape:
        raise ShapeError(
            f"cross_entropy shapes: logits {logits.shape}, targets {targets.shape}, mask {valid.shape}"
        )
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: no valid target positions")
    n = logits.shape[-1]
    rows = logits.data.reshape(-1, n)[valid.reshape(-1)]
    tgt = targets.reshape(-1)[valid.reshape(-1)]
    if tgt.min() < 0 or tgt.max() >= n:
        raise IndexError(f"target id out of range [0, {n})")
    m = rows.max(axis=1, keepdims=True)
    shifted = rows - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(count), tgt]
    loss = nll.sum() / count

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(count), tgt] -= 1.0
        full = np.zeros((valid.size, n))
        full[valid.reshape(-1)] = p * (g / count)
        return (full.reshape(logits.shape),)

    return record(np.asarray(loss), (logits,), vjp)


def parameters(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap named arrays as gradient-tracking leaves."""
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def constants(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, name=k) for k, v in arrays.items()}


def count_elements(arrays: Iterable[np.ndarray]) -> int:
    return int(np.sum([a.size for a in arrays], dtype=np.int64))

"""Small dense-tensor engine with a reverse-mode tape.

Storage is float32 by default (``precision`` switches it, e.g. to float64
for finite-difference checks); matmuls, reductions and gradients
accumulate in float64. No broadcasting apart from tensor-with-scalar:
ops that mix shapes (``linear``, ``embedding_lookup``, ``masked_mean``)
say so in their names.
"""
from __future__ import annotations

import hashlib
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ArchiveFormatError, NonScalarLoss, ShapeMismatch

_DTYPE = [np.dtype(np.float32)]
_TAPES: list["Tape"] = []
DEBUG = bool(os.environ.get("TKG_DEBUG"))
F64 = np.float64


@contextmanager
def precision(dtype):
    _DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.pop()


def default_dtype() -> np.dtype:
    return _DTYPE[-1]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tracked", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_DTYPE[-1])
        self.grad = None
        self.requires_grad = requires_grad
        self.tracked = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _non_scalar(self)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _non_scalar(t):
    raise NonScalarLoss(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Records ops on tracked tensors while active (``with Tape() as tape:``)."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.kinks: list[np.ndarray] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def kink_signature(self) -> bytes:
        """Digest of every relu mask seen so far; equal signatures mean the same linear piece."""
        h = hashlib.sha1()
        for m in self.kinks:
            h.update(np.packbits(m.reshape(-1)).tobytes())
        return h.digest()


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _result(data, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=_DTYPE[-1])
    out.grad = None
    out.requires_grad = False
    out.name = None
    if DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    tape = _active()
    out.tracked = tape is not None and any(t.tracked for t in inputs)
    if out.tracked:
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return _result(a.data + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data.astype(F64) + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return _result(a.data - b, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data.astype(F64) - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data.astype(F64) * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return scale(a, b)
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data.astype(F64), b.data.astype(F64)
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    tape = _active()
    if tape is not None:
        tape.kinks.append(mask)
    return _result(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def max_with_zero(a: Tensor) -> Tensor:
    """max(a, 0) elementwise; the hinge clamp."""
    return relu(a)


def softmax(a: Tensor) -> Tensor:
    x = a.data.astype(F64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


# reductions and shape ops --------------------------------------------------

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = a.data.sum(axis=axis, dtype=F64)

    def back(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return _result(out, (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeMismatch(f"transpose needs rank >= 2, got shape {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ref))
                                           if i != ax):
            raise ShapeMismatch(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tensors, lambda g: tuple(np.split(g, sizes, axis=ax)))


def take_slice(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def back(g):
        full = np.zeros(a.shape, dtype=F64)
        full[index] = g
        return (full,)
    return _result(a.data[index], (a,), back)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if int(np.sum(sizes)) != a.shape[axis]:
        raise ShapeMismatch(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(take_slice(a, start, start + s, axis))
        start += s
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` gathered by an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatch(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"ids outside table of {table.shape[0]} rows")
    rows = table.shape

    def back(g):
        full = np.zeros(rows, dtype=F64)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, rows[1]))
        return (full,)
    return _result(table.data[ids], (table,), back)


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over axis -2 of ``x`` (..., n, d) restricted to ``mask`` (..., n).

    The divisor is max(1, count), so an all-masked slot yields zeros.
    """
    mask = np.asarray(mask, dtype=bool)
    if x.shape[:-1] != mask.shape:
        raise ShapeMismatch(f"masked_mean: value shape {x.shape} vs mask shape {mask.shape}")
    w = mask[..., None].astype(F64)
    denom = np.maximum(mask.sum(axis=-1), 1)[..., None].astype(F64)
    out = (x.data * w).sum(axis=-2, dtype=F64) / denom
    return _result(out, (x,), lambda g: ((g / denom)[..., None, :] * w,))


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n) with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data.astype(F64), b.data.astype(F64)
    return _result(ad @ bd, (a, b),
                   lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (..., k) @ weight (k, n) [+ bias (n,)], the weight shared over leading axes."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeMismatch(f"linear: bias {bias.shape} vs weight {weight.shape}")
    k, n = weight.shape
    xd, wd = x.data.astype(F64), weight.data.astype(F64)
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, n)
        grads = [g @ wd.T, xd.reshape(-1, k).T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeMismatch(f"layer_norm: input {x.shape} vs gain {gain.shape} bias {bias.shape}")
    xd = x.data.astype(F64)
    mu = xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(((xd - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (xd - mu) * inv
    gd = gain.data.astype(F64)

    def back(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, (g * xhat).reshape(-1, n).sum(0), g.reshape(-1, n).sum(0)
    return _result(xhat * gd + bias.data, (x, gain, bias), back)


# backward ------------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) down the active tape.

    Leaves with ``requires_grad`` get ``.grad`` accumulated (float64) and are
    returned in a mapping; other leaves get nothing.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    tape = _active()
    if tape is None or not loss.tracked:
        raise ValueError("loss is not on the active tape")
    grads = {id(loss): np.ones(loss.shape, dtype=F64)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if not inp.tracked or gi is None:
                continue
            gi = np.asarray(gi, dtype=F64)
            if gi.shape != inp.shape:
                gi = gi.reshape(inp.shape)
            if inp.requires_grad:
                leaves[id(inp)] = inp
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    return {t: t.grad for t in leaves.values()}


# optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
              state: AdamState) -> Mapping[str, Tensor]:
    """One bias-corrected Adam update in place. Parameters without a gradient are left alone."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise ShapeMismatch(f"adam: gradient {np.shape(g)} vs parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, dtype=F64)
            state.v[name] = np.zeros(p.shape, dtype=F64)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data.astype(F64) - update).astype(p.data.dtype)
    return params


# checkpoint archive --------------------------------------------------------

ARCHIVE_MAGIC = b"TKGT1\n"


def save_archive(path, arrays: Mapping[str, np.ndarray]) -> None:
    chunks = [ARCHIVE_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(ARCHIVE_MAGIC):
        raise ArchiveFormatError(f"{path}: not a tensor archive (bad magic)")
    try:
        pos = len(ARCHIVE_MAGIC)
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise ArchiveFormatError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(data, "<f4", size, pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise ArchiveFormatError(f"{path}: truncated archive ({exc})") from None
    if pos != len(data):
        raise ArchiveFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


# finite-difference oracle --------------------------------------------------

@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    skipped: int
    per_tensor: dict


def finite_difference_check(fn: Callable[[], Tensor], tensors: Iterable[Tensor],
                            h: float = 1e-3) -> GradCheck:
    """Compare tape gradients of ``fn()`` with central differences.

    Run under ``precision(np.float64)``. Entries whose +h or -h evaluation
    lands on a different relu piece than the base point are skipped, since
    the central difference is not a derivative estimate there. The error of
    a tensor is max|analytic - numeric| / max(max|analytic|, max|numeric|).
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
        t.requires_grad = t.tracked = True
    with Tape() as tape:
        loss = fn()
        base = tape.kink_signature()
        backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad for t in tensors]

    def evaluate():
        with Tape() as probe:
            value = fn().item()
        return value, probe.kink_signature()

    worst, checked, skipped, per = 0.0, 0, 0, {}
    for k, (t, a) in enumerate(zip(tensors, analytic)):
        numeric = np.zeros(t.shape)
        keep = np.zeros(t.shape, dtype=bool)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp, sp = evaluate()
            flat[i] = orig - h
            fm, sm = evaluate()
            flat[i] = orig
            if sp != base or sm != base:
                skipped += 1
                continue
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
            keep.reshape(-1)[i] = True
            checked += 1
        if keep.any():
            diff = np.abs(a - numeric)[keep].max()
            denom = max(np.abs(a[keep]).max(), np.abs(numeric[keep]).max())
            err = 0.0 if denom < 1e-12 else diff / denom
        else:
            err = 0.0
        per[t.name or f"tensor{k}"] = err
        worst = max(worst, err)
    return GradCheck(worst, checked, skipped, per)

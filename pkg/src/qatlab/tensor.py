"""Tape-based reverse-mode automatic differentiation over dense NumPy arrays.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape everything runs as plain
inference. Backward walks the recorded operations in exact reverse order.

Broadcasting is deliberately narrow: operands must have equal shapes, one of
them must be a scalar, or the smaller shape must be a trailing suffix of the
larger one (leading-batch broadcast).
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

_TAPES: list["Tape"] = []
_SCOPES: list[str] = []
_DEFAULT_DTYPE = [np.float32]
_CHECK_FINITE = [True]
# ops that only move or select existing values; their inputs were already checked
_UNCHECKED_OPS = frozenset({"reshape", "transpose", "slice", "concat", "embedding", "take_last", "neg"})
_op_counter = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, op_id: int, scope: str):
        self.op = op
        self.op_id = op_id
        self.scope = scope
        where = f" in {scope}" if scope else ""
        super().__init__(f"non-finite output from op '{op}' (id {op_id}){where}")


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are created with (float32 or float64)."""
    _DEFAULT_DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


def get_default_dtype():
    return _DEFAULT_DTYPE[-1]


def set_check_finite(flag: bool) -> None:
    _CHECK_FINITE[0] = bool(flag)


@contextlib.contextmanager
def scope(name: str):
    """Label ops created inside this block; the label shows up in NonFiniteError."""
    _SCOPES.append(name)
    try:
        yield
    finally:
        _SCOPES.pop()


def current_scope() -> str:
    return _SCOPES[-1] if _SCOPES else ""


def current_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "name", "_produced")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self._grad = None
        self.name = name
        self._produced = False

    # -- gradient buffer -------------------------------------------------
    @property
    def grad(self):
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    # -- array-ish surface -----------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _raise_scalar(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


class Node:
    __slots__ = ("op", "op_id", "inputs", "out", "backward")

    def __init__(self, op, op_id, inputs, out, backward):
        self.op = op
        self.op_id = op_id
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; :meth:`backward` consumes the record. Hooks
    registered with :meth:`watch` receive the final gradient of an
    intermediate tensor when backward reaches the op that produced it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._hooks: dict[int, tuple[Tensor, list[Callable]]] = {}

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def watch(self, tensor: Tensor, fn: Callable[[np.ndarray], None]) -> None:
        entry = self._hooks.setdefault(id(tensor), (tensor, []))
        entry[1].append(fn)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], bw: Callable) -> Tensor:
    op_id = next(_op_counter)
    if _CHECK_FINITE[0] and op not in _UNCHECKED_OPS and not np.isfinite(data).all():
        raise NonFiniteError(op, op_id, current_scope())
    out = Tensor.__new__(Tensor)
    out.data = data
    out._grad = None
    out.name = None
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out._produced = needs
    if needs:
        tape.nodes.append(Node(op, op_id, tuple(inputs), out, bw))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Fill ``.grad`` of every leaf reachable from ``loss`` on ``tape``."""
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise ValueError("backward called on an empty tape")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    hooks = tape._hooks
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        entry = hooks.get(id(node.out))
        if entry is not None:
            for fn in entry[1]:
                fn(g)
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._produced:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            elif inp._grad is None:
                inp._grad = np.array(gi, dtype=inp.dtype, copy=True)
            else:
                inp._grad += gi
    tape.nodes.clear()
    tape._hooks.clear()


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _check_broadcast(op, a: np.ndarray, b: np.ndarray):
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _binary_operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if b.dtype != a.dtype and b.ndim == 0:
        b = Tensor(b.data, dtype=a.dtype)
    return a, b


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    ad = a.data
    return _record("pow", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):  # reported by the finite check
        out = np.log(ad)
    return _record("log", out, (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    out = out.astype(a.dtype, copy=False)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = np.negative(x)
    np.exp(sig, out=sig)
    sig += 1.0
    np.divide(1.0, sig, out=sig)

    def bw(g):
        d = np.subtract(1.0, sig, dtype=sig.dtype)
        d *= x
        d += 1.0
        gx = g * sig
        gx *= d
        return (gx,)

    return _record("silu", x * sig, (a,), bw)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; mask broadcasts as a trailing suffix."""
    mask = np.asarray(mask, dtype=bool)
    _check_broadcast("masked_fill", a.data, mask)
    out = a.data.copy()
    np.copyto(out, a.dtype.type(value), where=mask)

    def bw(g):
        gx = g.copy()
        np.copyto(gx, 0, where=mask)
        return (gx,)

    return _record("masked_fill", out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).astype(a.dtype),)

    return _record("mean", out, (a,), bw)


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad permutation {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _record("transpose", out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(a: Tensor, index) -> Tensor:
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (slice, int, type(Ellipsis))):
            raise TypeError("getitem supports basic slicing only (ints, slices, Ellipsis)")
    out = np.ascontiguousarray(a.data[index])
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _record("slice", out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _record("concat", out, tensors, bw)


# ---------------------------------------------------------------------------
# linear algebra and neural-network primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., n, k] @ [k, m]`` (shared weight) or batched ``[..., n, k] @ [..., k, m]``."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if bd.ndim == 2:
        k, m = bd.shape
        lead = ad.shape[:-1]
        # one 2-D GEMM instead of numpy's stacked loop
        out = (ad.reshape(-1, k) @ bd).reshape(lead + (m,))

        def bw(g):
            g2 = g.reshape(-1, m)
            ga = (g2 @ bd.T).reshape(lead + (k,)) if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g2 if b.requires_grad else None
            return ga, gb

    elif ad.shape[:-2] == bd.shape[:-2]:
        out = ad @ bd

        def bw(g):
            ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
            gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
            return ga, gb

    else:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    return _record("matmul", out, (a, b), bw)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    Entries where ``mask`` (broadcast as a trailing suffix) is true get
    probability 0 and no gradient; every row needs one unmasked entry.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        _check_broadcast("softmax", x, mask)
        out = x.copy()
        np.copyto(out, -np.inf, where=mask)
        out -= out.max(axis=-1, keepdims=True)
    else:
        out = x - x.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def bw(g):
        gx = g * out
        s = gx.sum(axis=-1, keepdims=True)
        np.subtract(g, s, out=gx)
        gx *= out
        return (gx,)

    return _record("softmax", out, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (a,), bw)


def take_last(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a[..., index[...]]`` along the last axis (one entry per row)."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"take_last: index shape {index.shape} vs rows {a.shape[:-1]}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[-1]):
        raise IndexError("take_last: index out of range")
    out = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _record("take_last", out, (a,), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding: token id out of range [0, {V})")
    out = weight.data[ids]

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _record("embedding", out, (weight,), bw)


def rmsnorm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    """``x / sqrt(mean(x^2) + eps) * weight`` over the last axis (fused)."""
    if weight.ndim != 1 or weight.shape[0] != x.shape[-1]:
        raise ShapeError(f"rmsnorm: weight {weight.shape} vs input {x.shape}")
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    inv = inv.astype(x.dtype, copy=False)
    xhat = xd * inv
    d = xd.shape[-1]

    def bw(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * wd
            gx = inv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _record("rmsnorm", xhat * wd, (x, weight), bw)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent pairs ``(x[2i], x[2i+1])`` of the last axis.

    ``cos``/``sin`` have shape ``[seq, head_dim // 2]`` and broadcast over
    leading axes of ``x`` (``[..., seq, head_dim]``).
    """
    if x.shape[-1] % 2:
        raise ShapeError(f"rope: head_dim must be even, got {x.shape[-1]}")
    xd = x.data
    x1, x2 = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def bw(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        return (gx,)

    return _record("rope", out, (x,), bw)


def custom(op: str, data: np.ndarray, inputs: Sequence[Tensor], bw: Callable) -> Tensor:
    """Record an op defined outside this module (e.g. the fake quantizer)."""
    return _record(op, data, inputs, bw)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_difference_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    epsilon: float = 1e-4,
    samples: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(x)`` must return a scalar tensor. When ``x`` is a sequence, coordinates
    are sampled uniformly over all of its tensors. Error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.zero_grad()
        t.requires_grad = True
    with Tape() as tape:
        loss = f(x)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("finite_difference_check", -1, "f(x)")
    tape.backward(loss)
    analytic = [t.grad.copy() for t in xs]

    sizes = [t.size for t in xs]
    total = sum(sizes)
    if samples is None or samples >= total:
        coords = np.arange(total)
    else:
        coords = np.random.default_rng(seed).choice(total, size=samples, replace=False)
    offsets = np.cumsum([0] + sizes)

    def evaluate() -> float:
        val = float(f(x).data)
        if not np.isfinite(val):
            raise NonFiniteError("finite_difference_check", -1, "f(x)")
        return val

    worst = 0.0
    for flat in coords:
        ti = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[ti])
        buf = xs[ti].data.reshape(-1)
        orig = buf[j]
        buf[j] = orig + epsilon
        up = evaluate()
        buf[j] = orig - epsilon
        down = evaluate()
        buf[j] = orig
        numeric = (up - down) / (2 * epsilon)
        a = float(analytic[ti].reshape(-1)[j])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst

"""
tensor_autodiff.py
Dense tensors on top of numpy plus a reverse-mode gradient tape.

Every layer, loss and rendering step in meshmark is written with the ops in
this file. A Tape records ops while it is the active tape of the current
thread; `backward` walks the records in reverse and returns one gradient per
requested leaf.

Subgradient conventions: sign(0) = 0, relu'(0) = 0, clamp' = 0 at and beyond
the interval ends, max pooling routes the gradient to the first maximal index.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from errors import NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype: type = np.float32
_local = threading.local()

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def set_precision(name: str) -> None:
    """Switch the dtype new tensors are created with ("float32" or "float64")."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch precision, e.g. `with precision("float64"):` for gradient checks."""
    previous = "float64" if _dtype is np.float64 else "float32"
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """
    Immutable n-d array of reals, optionally recorded on a Tape.

    `node_id` is set only for tensors produced while a tape was active and at
    least one input was itself on that tape (or for leaves from `Tape.watch`).
    """

    __slots__ = ("_data", "node_id", "_tape")

    def __init__(self, data: object, dtype: Optional[type] = None) -> None:
        if isinstance(data, Tensor):
            data = data._data
        arr = np.array(data, dtype=dtype or _dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        self._data = arr
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        t._data = arr
        t.node_id = None
        t._tape = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return np.array(self._data, copy=True)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other: "ArrayLike") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: "ArrayLike") -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "ArrayLike") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: "ArrayLike") -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "ArrayLike") -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: "ArrayLike") -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: "ArrayLike") -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: "ArrayLike") -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: "ArrayLike") -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "ArrayLike") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: object) -> "Tensor":
        return getitem(self, key)

    def sum(self, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


ArrayLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=_dtype))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape), dtype=_dtype))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    op: str
    parents: tuple[Optional[int], ...]
    vjp: Optional[VJP]


class Tape:
    """
    Append-only record of ops. Use as a context manager to make it the active
    tape of the current thread; a tape must stay on the thread that made it.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._owner = threading.get_ident()
        self.live = True

    def __enter__(self) -> "Tape":
        if threading.get_ident() != self._owner:
            raise TapeError("a tape is confined to the thread that created it")
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, value: ArrayLike) -> Tensor:
        """Return a leaf tensor (sharing `value`'s data) whose gradient can be requested."""
        if not self.live:
            raise TapeError("tape already cleared")
        leaf = Tensor._wrap(as_tensor(value).data)
        self._record(leaf, "leaf", (), None)
        return leaf

    def _record(self, tensor: Tensor, op: str, parents: tuple[Optional[int], ...], vjp: Optional[VJP]) -> None:
        if threading.get_ident() != self._owner:
            raise TapeError("a tape is confined to the thread that created it")
        tensor.node_id = len(self._nodes)
        tensor._tape = self
        self._nodes.append(_Node(op, parents, vjp))

    def gradient(self, loss: Tensor, leaves: Sequence[Tensor], retain: bool = False) -> list[Tensor]:
        return backward(self, loss, leaves, retain=retain)

    def clear(self) -> None:
        self._nodes.clear()
        self.live = False


def _active_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _make(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    result = Tensor._wrap(out)
    tape = _active_tape()
    if tape is None:
        return result
    if np.ndim(out) == 0:
        inner = vjp
        vjp = lambda g: inner(g.reshape(()))  # noqa: E731
    parents: list[Optional[int]] = []
    tracked = False
    for t in inputs:
        if t._tape is tape and t.node_id is not None:
            parents.append(t.node_id)
            tracked = True
            continue
        if t._tape is not None and t._tape is not tape and t._tape.live:
            raise TapeError(f"{op}: input recorded on a different live tape")
        parents.append(None)
    if tracked:
        tape._record(result, op, tuple(parents), vjp)
    return result


def backward(tape: Tape, loss: Tensor, leaves: Sequence[Tensor], retain: bool = False) -> list[Tensor]:
    """
    Reverse sweep from a scalar loss.

    Args:
        tape: the tape `loss` was recorded on.
        loss: single-element tensor.
        leaves: tensors (usually from `tape.watch`) to return gradients for.
        retain: keep the records; by default the tape is cleared afterwards.

    Returns:
        One gradient tensor per leaf, shaped like the leaf. A loss that does not
        depend on anything recorded gives all-zero gradients.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    for leaf in leaves:
        if leaf._tape is not tape or leaf.node_id is None:
            raise TapeError("leaf is not recorded on this tape")
    if loss._tape is not None and loss._tape is not tape:
        raise TapeError("loss is recorded on a different tape")

    found: dict[int, np.ndarray] = {}
    if loss.node_id is not None:
        wanted = {leaf.node_id for leaf in leaves}
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.dtype)}
        for node_id in range(loss.node_id, -1, -1):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            if node_id in wanted:
                found[node_id] = g
            node = tape._nodes[node_id]
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                grads[parent] = grads[parent] + pg if parent in grads else pg

    result = []
    for leaf in leaves:
        g = found.get(leaf.node_id)  # type: ignore[arg-type]
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.dtype)
        result.append(Tensor._wrap(np.array(np.broadcast_to(g, leaf.shape), dtype=leaf.dtype)))
    if not retain:
        tape.clear()
    return result


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _make("div", out, (a, b), vjp)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def abs_(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a: ArrayLike, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return _make("clamp", out, (a,), lambda g: (g * inside,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _make("relu", np.where(positive, a.data, 0).astype(a.dtype), (a,), lambda g: (g * positive,))


def sign(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("sign", np.sign(a.data), (a,), lambda g: (None,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def power(a: ArrayLike, exponent: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, (int, float)):
        p = float(exponent)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.power(a.data, p)
        return _make("power", out, (a,), lambda g: (g * p * np.power(a.data, p - 1),))
    e = as_tensor(exponent)
    _broadcast_shape("power", a, e)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(a.data, e.data)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g * e.data * np.power(a.data, e.data - 1)
        ge = g * out * np.log(np.maximum(a.data, np.finfo(a.dtype).tiny))
        return _unbroadcast(ga, a.shape), _unbroadcast(ge, e.shape)

    return _make("power", out, (a, e), vjp)


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


_ELEMENTWISE: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "abs": abs_,
    "clamp": clamp,
    "relu": relu,
    "sign": sign,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "power": power,
    "sigmoid": sigmoid,
}


def elementwise(op_kind: str, a: ArrayLike, b: Optional[ArrayLike] = None, **kwargs: object) -> Tensor:
    """Dispatch by name: `elementwise("clamp", x, lo=0, hi=1)`, `elementwise("mul", x, y)`."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a, **kwargs) if b is None else fn(a, b, **kwargs)


# ---------------------------------------------------------------------------
# Shape and reduction ops
# ---------------------------------------------------------------------------


def sum_(a: ArrayLike, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None:
            g = g.reshape((1,) * a.ndim)
        return (np.broadcast_to(g, a.shape),)

    return _make("sum", np.asarray(out), (a,), vjp)


def mean(a: ArrayLike, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    order = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(order))
    return _make("transpose", a.data.transpose(order), (a,), lambda g: (g.transpose(inverse),))


def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {tuple(shape)}") from exc
    return _make("broadcast_to", np.array(out), (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make("concat", out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: incompatible shapes {[p.shape for p in parts]}") from exc
    n = len(parts)
    return _make("stack", out, parts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take(a: ArrayLike, indices: np.ndarray) -> Tensor:
    """Gather rows: `take(a, idx)[k] = a[idx[k]]`. The adjoint scatter-adds back."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take: index out of range for {a.shape[0]} rows")

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        z = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return (z,)

    return _make("take", a.data[idx], (a,), vjp)


def _is_basic_key(key: object) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def getitem(a: ArrayLike, key: object) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]  # type: ignore[index]
    basic = _is_basic_key(key)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        z = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            z[key] = g  # type: ignore[index]
        else:
            np.add.at(z, key, g)  # type: ignore[arg-type]
        return (z,)

    return _make("getitem", np.array(out), (a,), vjp)


def pad(a: ArrayLike, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad; `widths` is one (before, after) pair per axis."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    out = np.pad(a.data, widths)
    window = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make("pad", out, (a,), lambda g: (g[window],))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x: ArrayLike, kernels: ArrayLike, padding: str = "same", stride: int = 1) -> Tensor:
    """
    2-d convolution (cross-correlation) over [h, w, c_in] or [n, h, w, c_in].

    Args:
        x: input feature map(s).
        kernels: [kh, kw, c_in, c_out].
        padding: "valid" (no padding) or "same" (zero padding, output = ceil(h / stride)).
        stride: 1 or 2.

    Returns:
        Feature map(s) with c_out channels, batch axis kept iff the input had one.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects [h,w,c] or [n,h,w,c] input and 4-d kernels, got {x.shape}, {kernels.shape}")
    xd = x.data[None] if squeeze else x.data
    n, h, w, cin = xd.shape
    kh, kw, kcin, cout = kernels.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernels expect {kcin}")
    if padding == "valid":
        if h < kh or w < kw:
            raise ShapeError(f"conv2d: {h}x{w} input smaller than {kh}x{kw} kernel under valid padding")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        top = bottom = left = right = 0
    elif padding == "same":
        ho, top, bottom = _same_padding(h, kh, stride)
        wo, left, right = _same_padding(w, kw, stride)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(xd, ((0, 0), (top, bottom), (left, right), (0, 0)))
    k = kernels.data
    rows = stride * (ho - 1) + 1
    cols = stride * (wo - 1) + 1

    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(xd, k))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + rows : stride, j : j + cols : stride, :] @ k[i, j]

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g4 = g[None] if squeeze else g
        gk = np.zeros_like(k)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i : i + rows : stride, j : j + cols : stride, :]
                gk[i, j] = np.tensordot(patch, g4, axes=([0, 1, 2], [0, 1, 2]))
                gxp[:, i : i + rows : stride, j : j + cols : stride, :] += g4 @ k[i, j].T
        gx = gxp[:, top : top + h, left : left + w, :]
        return (gx[0] if squeeze else gx), gk

    return _make("conv2d", out[0] if squeeze else out, (x, kernels), vjp)


@dataclass
class RunningStats:
    """
    Batchnorm running mean/variance; mutated only by train-mode batchnorm.
    Kept in float32, the checkpoint storage type.
    """

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.var = np.asarray(self.var, dtype=np.float32)

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, momentum: float) -> None:
        self.mean = (momentum * self.mean + (1.0 - momentum) * batch_mean).astype(np.float32)
        self.var = (momentum * self.var + (1.0 - momentum) * batch_var).astype(np.float32)


def batchnorm(
    x: ArrayLike,
    gamma: ArrayLike,
    beta: ArrayLike,
    running: Optional[RunningStats],
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Normalize over every axis but the last (channel) one."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batchnorm: {channels} channels but gamma {gamma.shape}, beta {beta.shape}")
    count = x.size // channels if channels else 0
    if count == 0:
        raise ShapeError("batchnorm over a zero-size batch")
    axes = tuple(range(x.ndim - 1))
    xd = x.data
    if mode == "train":
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running is not None:
            running.update(mu, var, momentum)
    elif mode == "eval":
        if running is None:
            raise ValueError("eval-mode batchnorm needs running statistics")
        mu = running.mean.astype(xd.dtype)
        var = running.var.astype(xd.dtype)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data
    train = mode == "train"

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        if train:
            gx = gamma.data * inv / count * (count * g - g_beta - xhat * g_gamma)
        else:
            gx = g * gamma.data * inv
        return gx, g_gamma, g_beta

    return _make("batchnorm", out, (x, gamma, beta), vjp)


def _global_axes(ndim: int) -> tuple[int, ...]:
    if ndim == 1:
        return (0,)
    if ndim == 2:
        return (0,)
    if ndim == 3:
        return (0, 1)
    if ndim == 4:
        return (1, 2)
    raise ShapeError(f"global pooling supports 1-4 dims, got {ndim}")


def pool(
    x: ArrayLike,
    kind: str,
    window: tuple[int, int] = (2, 2),
    stride: Optional[int] = None,
) -> Tensor:
    """
    max_window: windowed max over the two spatial axes of [h,w], [h,w,c] or [n,h,w,c].
    global_mean / global_max: reduce every spatial position to one
    ([s] -> [1], [s,c] -> [c], [h,w,c] -> [c], [n,h,w,c] -> [n,c]).
    """
    x = as_tensor(x)
    if x.size == 0 or any(s == 0 for s in x.shape):
        raise ShapeError(f"pool over empty input {x.shape}")
    if kind == "global_mean":
        return mean(x, axis=_global_axes(x.ndim))
    if kind == "global_max":
        return _global_max(x)
    if kind == "max_window":
        return _max_window(x, window, stride or window[0])
    raise ValueError(f"unknown pool kind {kind!r}")


def _global_max(x: Tensor) -> Tensor:
    if x.ndim > 4:
        raise ShapeError(f"global pooling supports 1-4 dims, got {x.ndim}")
    xd = x.data
    if x.ndim == 4:
        flat = xd.reshape(xd.shape[0], -1, xd.shape[-1])
    elif x.ndim == 1:
        flat = xd.reshape(-1, 1)
    else:
        flat = xd.reshape(-1, xd.shape[-1])
    arg = np.argmax(flat, axis=-2)  # first index on ties
    out = np.take_along_axis(flat, np.expand_dims(arg, -2), axis=-2).squeeze(-2)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        z = np.zeros_like(flat)
        np.put_along_axis(z, np.expand_dims(arg, -2), np.expand_dims(g, -2), axis=-2)
        return (z.reshape(xd.shape),)

    return _make("global_max", out.reshape(-1) if x.ndim == 1 else out, (x,), vjp)


def _max_window(x: Tensor, window: tuple[int, int], stride: int) -> Tensor:
    xd = x.data
    shape_in = xd.shape
    if x.ndim == 2:
        xd = xd[None, :, :, None]
    elif x.ndim == 3:
        xd = xd[None]
    elif x.ndim != 4:
        raise ShapeError(f"max_window expects 2-4 dims, got {x.shape}")
    n, h, w, c = xd.shape
    wh, ww = window
    if h < wh or w < ww:
        raise ShapeError(f"max_window {window} larger than input {h}x{w}")
    ho, wo = (h - wh) // stride + 1, (w - ww) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xd, (wh, ww), axis=(1, 2))
    windows = windows[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    flat = windows.reshape(n, ho, wo, c, wh * ww)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        g4 = g.reshape(n, ho, wo, c)
        z = np.zeros((n, h, w, c), dtype=g.dtype)
        ni, oy, ox, ci = np.indices((n, ho, wo, c))
        rows = oy * stride + arg // ww
        cols = ox * stride + arg % ww
        np.add.at(z, (ni, rows, cols, ci), g4)
        return (z.reshape(shape_in),)

    if x.ndim == 2:
        out = out[0, :, :, 0]
    elif x.ndim == 3:
        out = out[0]
    return _make("max_window", out, (x,), vjp)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: ArrayLike,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare tape gradients of a scalar function against central differences.

    Args:
        f: tensor function returning a single-element tensor.
        x: point to check at; must be float64.
        eps: finite-difference step.
        max_coords: perturb only this many coordinates (seeded subset) on large inputs.
        seed: seed for the coordinate subset.

    Returns:
        Largest per-coordinate relative error, with max(|a|, |b|, 1e-8) as denominator.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    if _dtype is not np.float64:
        raise NumericError("grad_check needs float64 precision; wrap the call in precision('float64')")

    with Tape() as tape:
        leaf = tape.watch(Tensor(base))
        value = f(leaf)
    (analytic,) = backward(tape, value, [leaf])
    analytic_flat = analytic.data.reshape(-1)

    coords: Sequence[int] = range(base.size)
    if max_coords is not None and max_coords < base.size:
        coords = np.sort(np.random.default_rng(seed).choice(base.size, size=max_coords, replace=False))

    worst = 0.0
    for k in coords:
        shifted = base.copy()
        shifted.reshape(-1)[k] += eps
        f_plus = f(Tensor(shifted)).item()
        shifted.reshape(-1)[k] -= 2 * eps
        f_minus = f(Tensor(shifted)).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"grad_check: f is not finite near coordinate {k}")
        numeric = (f_plus - f_minus) / (2 * eps)
        a = float(analytic_flat[k])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    logger.debug("grad_check over %d coordinates: max rel err %.3e", len(coords), worst)
    return worst

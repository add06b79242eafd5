"""Dense float64 tensors with a dynamic reverse-mode tape.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients.  Calling
:func:`backward` on a scalar walks that graph once in reverse topological
order, deposits gradients on the leaves and then frees the graph.

Broadcasting is limited to equal shapes and size-1 (scalar) operands.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

SAFE_DIV_FLOOR = 1e-4


class TapeError(RuntimeError):
    """Raised for backward passes over a freed graph or a non-scalar output."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self._consumed = False
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], grad_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._grad_fn = grad_fn if out.requires_grad else None
        out._consumed = False
        out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)


def create(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a row-major value list.

    ``shape=[]`` yields a 0-d scalar.  Raises ``ValueError`` if the number of
    values does not match ``prod(shape)``.
    """
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"dimension sizes must be positive, got {shape}")
    vals = np.asarray(list(values), dtype=np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if vals.size != expected:
        raise ValueError(f"shape {shape} needs {expected} values, got {vals.size}")
    return Tensor(vals.reshape(shape), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``output``.

    Gradients accumulate into existing leaf grads.  The graph is freed
    afterwards, so a second call on the same output raises :class:`TapeError`.
    """
    if output.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output._consumed:
        raise TapeError("graph already consumed by a previous backward pass")
    if not output.requires_grad:
        output._consumed = True
        return

    order = _toposort(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if not node.is_leaf:
            node._grad_fn = None
            node._parents = ()
            node._consumed = True


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}: only equal shapes or scalars broadcast")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _broadcast_data(a: Tensor, b: Tensor) -> tuple[np.ndarray, np.ndarray]:
    if a.shape == b.shape:
        return a.data, b.data
    # size-1 operand collapses to a 0-d array so the result keeps the other's shape
    if a.size == 1:
        return a.data.reshape(()), b.data
    return a.data, b.data.reshape(())


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = _broadcast_data(a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(ad + bd, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = _broadcast_data(a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(ad - bd, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = _broadcast_data(a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    """Raw quotient; an exact zero anywhere in the denominator raises."""
    a, b = _binary_operands(a, b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("division by exact zero (use safe_div for clamped denominators)")
    ad, bd = _broadcast_data(a, b)
    out = ad / bd

    def grad_fn(g):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), grad_fn, "div")


def safe_div(a, b, floor: float = SAFE_DIV_FLOOR) -> Tensor:
    """``a / max(b, floor)``; no gradient flows to clamped denominator entries."""
    a, b = _binary_operands(a, b)
    ad, bd = _broadcast_data(a, b)
    active = bd >= floor
    den = np.where(active, bd, floor)
    out = ad / den

    def grad_fn(g):
        ga = _unbroadcast(g / den, a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(active, -g * out / den, 0.0), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), grad_fn, "safe_div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), grad_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (x,), grad_fn, "sigmoid")


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def grad_fn(g):
        return (g * sign,)

    return Tensor._from_op(np.abs(x.data), (x,), grad_fn, "abs")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    d = x.data
    out = np.clip(d, -np.inf if lo is None else lo, np.inf if hi is None else hi)
    inside = out == d

    def grad_fn(g):
        return (g * inside,)

    return Tensor._from_op(out, (x,), grad_fn, "clamp")


def square(x: Tensor) -> Tensor:
    return mul(x, x)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "safe_div": safe_div,
    "relu": relu,
    "sigmoid": sigmoid,
    "abs": absolute,
    "clamp": clamp,
}


def elementwise(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by name: ``elementwise("relu", x)``, ``elementwise("clamp", x, lo=0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(axes)
    if not axes:
        raise ValueError("empty reduction set")
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for ndim {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(norm))


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_n = _norm_axes(axes, x.ndim)
    out = x.data.sum(axis=axes_n, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes_n)
        return (np.broadcast_to(g, x.shape),)

    return Tensor._from_op(out, (x,), grad_fn, "sum")


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_n = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes_n])) if axes_n else 1
    out = x.data.sum(axis=axes_n, keepdims=keepdims) / count

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes_n)
        return (np.broadcast_to(g / count, x.shape),)

    return Tensor._from_op(out, (x,), grad_fn, "mean")


def reduce(op: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if op == "sum":
        return reduce_sum(x, axes, keepdims)
    if op == "mean":
        return reduce_mean(x, axes, keepdims)
    raise ValueError(f"unknown reduction {op!r}")


def reduce_max(x: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Max along one axis; ties route the gradient to the first maximum."""
    axis = _norm_axes(axis, x.ndim)[0]
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        return (full,)

    return Tensor._from_op(out, (x,), grad_fn, "max")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, (x,), grad_fn, "reshape")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g) if _has_array_index(index) else full.__setitem__(index, g)
        return (full,)

    return Tensor._from_op(np.array(out), (x,), grad_fn, "getitem")


def _has_array_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return Tensor._from_op(out, tensors, grad_fn, "concat")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Repeat each pixel of an NCHW tensor into a 2x2 block."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def grad_fn(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), grad_fn, "upsample2x")


def avg_pool2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x needs even spatial dims, got {(h, w)}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return Tensor._from_op(out, (x,), grad_fn, "avgpool2x")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), grad_fn, "matmul")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIHW kernel, zero padded.

    Output spatial size is ``(H + 2*padding - kH) // stride + 1``.  ``bias``,
    if given, has shape ``(O,)`` and is added per output channel.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ck}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} != ({o},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    # channels-last im2col: columns ordered (kH, kW, C) so a single GEMM does the work
    xl = xp.transpose(0, 2, 3, 1)

    def window(i, j):
        return (slice(None), slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))

    taps = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.concatenate([xl[window(i, j)] for i, j in taps], axis=-1).reshape(-1, kh * kw * c)
    wmat = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    acc = cols @ wmat
    if bias is not None:
        acc += bias.data
    out = acc.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gx = gk = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh * kw, c)
            gxl = np.zeros((n, hp, wp, c))
            for t, (i, j) in enumerate(taps):
                gxl[window(i, j)] += gcols[:, :, :, t, :]
            gxp = gxl.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(np.ascontiguousarray(out), parents, grad_fn, "conv2d")


# ---------------------------------------------------------------------------
# parameter containers


class ParameterVector:
    """Ordered, uniquely named tensor segments with a flat-vector view."""

    def __init__(self, segments: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]] = ()):
        items = segments.items() if isinstance(segments, Mapping) else segments
        self._segments: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in items:
            if name in self._segments:
                raise ValueError(f"duplicate segment name {name!r}")
            self._segments[name] = as_tensor(t)

    def __getitem__(self, name: str) -> Tensor:
        return self._segments[name]

    def __contains__(self, name: str) -> bool:
        return name in self._segments

    def __iter__(self):
        return iter(self._segments)

    def __len__(self) -> int:
        return len(self._segments)

    def items(self):
        return self._segments.items()

    def names(self) -> list[str]:
        return list(self._segments)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self._segments.items()}

    @property
    def total_len(self) -> int:
        return sum(t.size for t in self._segments.values())

    def flatten(self) -> np.ndarray:
        if not self._segments:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._segments.values()])

    def unflatten(self, vec: np.ndarray, requires_grad: bool = False) -> "ParameterVector":
        """New vector of the same layout holding ``vec``'s values."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.total_len,):
            raise ValueError(f"expected flat vector of length {self.total_len}, got {vec.shape}")
        out, pos = [], 0
        for name, t in self._segments.items():
            out.append((name, Tensor(vec[pos:pos + t.size].reshape(t.shape), requires_grad)))
            pos += t.size
        return ParameterVector(out)

    def grad_vector(self) -> np.ndarray:
        parts = [np.zeros(t.size) if t.grad is None else t.grad.reshape(-1) for t in self._segments.values()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def requiring_grad(self) -> "ParameterVector":
        return self.unflatten(self.flatten(), requires_grad=True)

    def copy(self) -> "ParameterVector":
        return self.unflatten(self.flatten())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(t.data) for k, t in self._segments.items()}

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{list(t.shape)}" for k, t in self._segments.items())
        return f"ParameterVector({inner})"


def gradients(loss: Tensor, params: ParameterVector) -> dict[str, np.ndarray]:
    """Run backward on ``loss`` and return the gradient of every segment."""
    backward(loss)
    return {name: np.zeros(t.shape) if t.grad is None else t.grad for name, t in params.items()}


def grad_check(f: Callable[[ParameterVector], Tensor], point: ParameterVector, h: float = 1e-5) -> float:
    """Max per-coordinate relative gap between reverse-mode and central differences.

    The relative gap for coordinate i is ``|ad - fd| / (|ad| + |fd| + 1e-12)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = point.flatten()
    leaves = point.unflatten(base, requires_grad=True)
    backward(f(leaves))
    ad = leaves.grad_vector()

    fd = np.empty_like(base)
    for i in range(base.size):
        e = np.zeros_like(base)
        e[i] = h
        fp = f(point.unflatten(base + e)).item()
        fm = f(point.unflatten(base - e)).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"f is non-finite at perturbed coordinate {i}")
        fd[i] = (fp - fm) / (2 * h)
    return float(np.max(np.abs(ad - fd) / (np.abs(ad) + np.abs(fd) + 1e-12))) if base.size else 0.0

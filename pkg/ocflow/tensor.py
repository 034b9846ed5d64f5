"""
Minimal dense-tensor engine with reverse-mode differentiation.
Arrays live in numpy; every primitive is a Function with a forward and a backward rule.
Data is float32 by default, reductions and convolutions accumulate in float64.
"""
from __future__ import annotations

import contextlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger(__name__)

_state = threading.local()


def _dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Run a block with a different storage dtype (float64 for gradient checks)."""
    previous = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextlib.contextmanager
def record_kinks() -> Iterator[list[bytes]]:
    """
    Collect, for every piecewise-linear primitive evaluated in the block, which side of its
    kinks each element falls on. Two evaluations with equal logs share one linear piece.
    """
    previous = getattr(_state, "kinks", None)
    _state.kinks = log = []
    try:
        yield log
    finally:
        _state.kinks = previous


def _note_kinks(*patterns: np.ndarray) -> None:
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(b"".join(np.ascontiguousarray(p).tobytes() for p in patterns))


# ── Tensor ───────────────────────────────────────────────────────────────

class Tensor:
    """Dense array plus the Function that produced it (None for leaves)."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False, _ctx: "Function | None" = None):
        self.data = np.asarray(data, dtype=_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx = _ctx

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _raise_not_scalar(self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic
    def __add__(self, other): return Add.apply(self, other)
    def __radd__(self, other): return Add.apply(other, self)
    def __sub__(self, other): return Sub.apply(self, other)
    def __rsub__(self, other): return Sub.apply(other, self)
    def __mul__(self, other): return Mul.apply(self, other)
    def __rmul__(self, other): return Mul.apply(other, self)
    def __truediv__(self, other): return Div.apply(self, other)
    def __rtruediv__(self, other): return Div.apply(other, self)
    def __neg__(self): return Neg.apply(self)
    def __getitem__(self, index): return GetItem.apply(self, index=index)

    def abs(self): return Abs.apply(self)
    def log(self): return Log.apply(self)
    def exp(self): return Exp.apply(self)
    def sigmoid(self): return Sigmoid.apply(self)
    def relu(self): return Relu.apply(self)
    def tanh(self): return Tanh.apply(self)
    def square(self): return Square.apply(self)
    def sqrt(self): return Sqrt.apply(self)
    def clip(self, low: float, high: float): return Clip.apply(self, low=low, high=high)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def flip(self, axes):
        return Flip.apply(self, axes=axes)

    def rot90(self, k: int, axes=(-2, -1)):
        return Rot90.apply(self, k=k, axes=axes)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor; populates .grad on every reachable requires_grad tensor."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                _raise_not_scalar(self.shape)
            grad = np.ones_like(self.data)
        graph = Graph.from_output(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(graph.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            fn = node._ctx
            if fn is None:
                continue
            parent_grads = fn.backward(g)
            if not isinstance(parent_grads, tuple):
                parent_grads = (parent_grads,)
            for parent, pg in zip(fn.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{type(fn).__name__}.backward returned grad of shape {pg.shape} "
                        f"for input of shape {parent.shape}"
                    )
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _raise_not_scalar(shape):
    raise ValueError(f"expected a scalar tensor, got shape {shape}")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Graph:
    """Recorded primitives reachable from an output, in topological order (parents first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)


# ── Function base ────────────────────────────────────────────────────────

class Function:
    """
    Base class for differentiable primitives.
    Subclasses implement forward (numpy in, numpy out) and backward (grad of output in,
    one grad per parent out, None for parents without a gradient).
    """

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        parents = tuple(as_tensor(x) for x in inputs)
        fn = cls(*parents)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = fn.forward(*(p.data for p in parents), **kwargs)
        requires = grad_enabled() and any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=requires, _ctx=fn if requires else None)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ── Elementwise primitives ───────────────────────────────────────────────

class _Binary(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.a, self.b = a, b
        return self.compute(a, b)

    def compute(self, a, b):
        raise NotImplementedError


class Add(_Binary):
    def compute(self, a, b):
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.a.shape), unbroadcast(grad, self.b.shape)


class Sub(_Binary):
    def compute(self, a, b):
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.a.shape), unbroadcast(-grad, self.b.shape)


class Mul(_Binary):
    def compute(self, a, b):
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Div(_Binary):
    def compute(self, a, b):
        return a / b

    def backward(self, grad):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ga = grad / self.b
            gb = -grad * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class _Unary(Function):
    def forward(self, x, **kwargs):
        self.x = x
        self.out = self.compute(x, **kwargs)
        return self.out

    def compute(self, x, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return grad * self.derivative()

    def derivative(self):
        raise NotImplementedError


class Neg(_Unary):
    def compute(self, x):
        return -x

    def derivative(self):
        return -np.ones_like(self.x)


class Abs(_Unary):
    def compute(self, x):
        _note_kinks(np.sign(x).astype(np.int8))
        return np.abs(x)

    def derivative(self):
        return np.sign(self.x)


class Log(_Unary):
    def compute(self, x):
        return np.log(x)

    def derivative(self):
        return 1.0 / self.x


class Exp(_Unary):
    def compute(self, x):
        return np.exp(x)

    def derivative(self):
        return self.out


class Sigmoid(_Unary):
    def compute(self, x):
        return expit(x)

    def derivative(self):
        return self.out * (1.0 - self.out)


class Relu(_Unary):
    def compute(self, x):
        _note_kinks(x > 0)
        return np.maximum(x, 0)

    def derivative(self):
        return (self.x > 0).astype(self.x.dtype)


class Tanh(_Unary):
    def compute(self, x):
        return np.tanh(x)

    def derivative(self):
        return 1.0 - self.out * self.out


class Square(_Unary):
    def compute(self, x):
        return x * x

    def derivative(self):
        return 2.0 * self.x


class Sqrt(_Unary):
    def compute(self, x):
        return np.sqrt(x)

    def derivative(self):
        return 0.5 / self.out


class Clip(_Unary):
    def compute(self, x, low, high):
        self.low, self.high = low, high
        _note_kinks(x >= low, x > high)
        return np.clip(x, low, high)

    def derivative(self):
        return ((self.x >= self.low) & (self.x <= self.high)).astype(self.x.dtype)


_ELEMENTWISE: dict[str, type[Function]] = {
    "add": Add, "sub": Sub, "mul": Mul, "div": Div,
    "abs": Abs, "log": Log, "exp": Exp, "sigmoid": Sigmoid, "relu": Relu, "square": Square,
    "tanh": Tanh, "sqrt": Sqrt, "neg": Neg,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name; binary kinds need b (tensor or scalar)."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    if issubclass(fn, _Binary):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn.apply(a, b)
    return fn.apply(a)


# ── Reductions and shape primitives ──────────────────────────────────────

class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = tuple(a % len(self.shape) for a in np.atleast_1d(self.axis))
            grad = np.expand_dims(grad, axes)
        return np.broadcast_to(grad, self.shape).copy()


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return grad.reshape(self.shape)


class GetItem(Function):
    def forward(self, x, index):
        self.shape = x.shape
        self.index = index
        return np.array(x[index])

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.index, grad)
        return full


class Flip(Function):
    def forward(self, x, axes):
        self.axes = axes
        return np.flip(x, axis=axes).copy()

    def backward(self, grad):
        return np.flip(grad, axis=self.axes).copy()


class Rot90(Function):
    def forward(self, x, k, axes):
        self.k, self.axes = k, axes
        return np.rot90(x, k=k, axes=axes).copy()

    def backward(self, grad):
        return np.rot90(grad, k=-self.k, axes=self.axes).copy()


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(t.reshape(tuple(shape)))
    return concat(expanded, axis=axis)


# ── Convolution and sampling ─────────────────────────────────────────────

class Conv2d(Function):
    """Cross-correlation of NCHW input with OIKK kernel, zero padding."""

    def forward(self, x, w, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ValueError(f"conv2d expects NCHW input and OIKK kernel, got {x.shape} and {w.shape}")
        n, c, h, wd = x.shape
        o, ci, kh, kw = w.shape
        if ci != c:
            raise ValueError(f"kernel in-channels {ci} != input channels {c} (input {x.shape}, kernel {w.shape})")
        if stride < 1 or padding < 0:
            raise ValueError(f"stride must be >= 1 and padding >= 0, got stride={stride} padding={padding}")
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        if ho <= 0 or wo <= 0:
            raise ValueError(f"non-positive output extent {ho}x{wo} for input {x.shape} and kernel {w.shape}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        self.windows = windows.astype(np.float64)
        self.w = w.astype(np.float64)
        self.x_shape, self.stride, self.padding, self.pad_shape = x.shape, stride, padding, xp.shape
        out = np.tensordot(self.windows, self.w, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2)

    def backward(self, grad):
        g = grad.astype(np.float64)
        _, _, ho, wo = g.shape
        s, p = self.stride, self.padding
        dw = np.tensordot(g, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        dxp = np.zeros(self.pad_shape, dtype=np.float64)
        kh, kw = self.w.shape[2:]
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, self.w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib
        h, wd = self.x_shape[2:]
        return dxp[:, :, p:p + h, p:p + wd], dw


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, kernel, stride=stride, padding=padding)


class BilinearSample(Function):
    """
    Sample NCHW input at continuous pixel coordinates (N2HW: channel 0 = x, channel 1 = y).
    Coordinates are clamped to the image border; the coordinate gradient is zero where clamped.
    """

    def forward(self, img, coords):
        if img.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2 or coords.shape[0] != img.shape[0]:
            raise ValueError(f"bilinear_sample expects NCHW input and N2HW coords, got {img.shape} and {coords.shape}")
        n, c, h, w = img.shape
        x = coords[:, 0].astype(np.float64)
        y = coords[:, 1].astype(np.float64)
        self.inside_x = ((x >= 0) & (x <= w - 1)).astype(np.float64)
        self.inside_y = ((y >= 0) & (y <= h - 1)).astype(np.float64)
        x = np.clip(x, 0, w - 1)
        y = np.clip(y, 0, h - 1)
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        _note_kinks(x0, y0, self.inside_x > 0, self.inside_y > 0)
        wx = (x - x0)[..., None]
        wy = (y - y0)[..., None]
        b = np.broadcast_to(np.arange(n)[:, None, None], x0.shape)
        it = img.transpose(0, 2, 3, 1).astype(np.float64)
        ia, ib, ic, id_ = it[b, y0, x0], it[b, y0, x1], it[b, y1, x0], it[b, y1, x1]
        self.cache = (b, x0, x1, y0, y1, wx, wy, ia, ib, ic, id_)
        self.img_shape = img.shape
        out = (1 - wx) * (1 - wy) * ia + wx * (1 - wy) * ib + (1 - wx) * wy * ic + wx * wy * id_
        return out.transpose(0, 3, 1, 2)

    def backward(self, grad):
        b, x0, x1, y0, y1, wx, wy, ia, ib, ic, id_ = self.cache
        g = grad.astype(np.float64).transpose(0, 2, 3, 1)
        n, c, h, w = self.img_shape
        dimg = np.zeros((n, h, w, c), dtype=np.float64)
        np.add.at(dimg, (b, y0, x0), g * (1 - wx) * (1 - wy))
        np.add.at(dimg, (b, y0, x1), g * wx * (1 - wy))
        np.add.at(dimg, (b, y1, x0), g * (1 - wx) * wy)
        np.add.at(dimg, (b, y1, x1), g * wx * wy)
        dx = np.sum(g * ((1 - wy) * (ib - ia) + wy * (id_ - ic)), axis=-1) * self.inside_x
        dy = np.sum(g * ((1 - wx) * (ic - ia) + wx * (id_ - ib)), axis=-1) * self.inside_y
        return dimg.transpose(0, 3, 1, 2), np.stack([dx, dy], axis=1)


def bilinear_sample(img: Tensor, coords: Tensor) -> Tensor:
    return BilinearSample.apply(img, coords)


# ── Gradient check ───────────────────────────────────────────────────────

@dataclass
class GradCheckReport:
    """Per-input max relative error between analytic and central-difference gradients."""

    errors: list[float]
    tol: float
    failure: str | None = None
    checked: int = 0
    skipped: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else float("nan")

    @property
    def passed(self) -> bool:
        return self.failure is None and all(e < self.tol for e in self.errors)


def _value(f: Callable[..., Tensor], inputs: Sequence[Tensor], track: bool) -> tuple[float, list[bytes] | None]:
    with no_grad(), (record_kinks() if track else contextlib.nullcontext()) as kinks:
        return f(*inputs).item(), kinks


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    max_checks: int | None = None,
    seed: int = 0,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """
    Compare backward() against central differences of f(*inputs), evaluated in float64.
    Relative error per input: max|a - n| / max(max|a|, max|n|, 1e-8) over the checked entries.
    With skip_kinks, an entry whose +h or -h evaluation lands on another side of a relu, abs,
    clip or bilinear-cell boundary than the base point is left out and counted as skipped.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValueError(f"step h={h} outside [1e-4, 1e-2]")
    rng = np.random.default_rng(seed)
    saved = [(t.data, t.requires_grad, t.grad) for t in inputs]
    errors: list[float] = []
    checked = skipped = 0
    try:
        for t in inputs:
            t.data = np.array(t.data, dtype=np.float64, order="C")
            t.requires_grad = True
            t.grad = None
        with default_dtype(np.float64):
            with record_kinks() as base_kinks:
                out = f(*inputs)
            if out.size != 1:
                raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
            if not np.isfinite(out.data).all():
                return GradCheckReport(errors, tol, "non-finite function value at the base point")
            out.backward()
            for i, t in enumerate(inputs):
                analytic = np.zeros_like(t.data) if t.grad is None else t.grad.reshape(t.shape)
                bad = np.flatnonzero(~np.isfinite(analytic))
                if bad.size:
                    return GradCheckReport(errors, tol, f"non-finite analytic grad at input {i}, element {int(bad[0])}")
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_checks is not None and flat.size > max_checks:
                    idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
                numeric = np.empty(idx.size)
                keep = np.ones(idx.size, dtype=bool)
                for j, k in enumerate(idx):
                    orig = flat[k]
                    flat[k] = orig + h
                    fp, kinks_p = _value(f, inputs, skip_kinks)
                    flat[k] = orig - h
                    fm, kinks_m = _value(f, inputs, skip_kinks)
                    flat[k] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        return GradCheckReport(errors, tol, f"non-finite function value perturbing input {i}, element {int(k)}")
                    numeric[j] = (fp - fm) / (2 * h)
                    if skip_kinks and (kinks_p != base_kinks or kinks_m != base_kinks):
                        keep[j] = False
                a = analytic.reshape(-1)[idx][keep]
                n = numeric[keep]
                checked += idx.size
                skipped += int(idx.size - keep.sum())
                scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), 1e-8)
                errors.append(float(np.max(np.abs(a - n), initial=0.0) / scale))
                logger.debug(
                    "grad_check input %d: %d entries (%d skipped), rel err %.3e",
                    i, idx.size, idx.size - keep.sum(), errors[-1],
                )
    finally:
        for t, (data, requires, grad) in zip(inputs, saved):
            t.data, t.requires_grad, t.grad = data, requires, grad
    return GradCheckReport(errors, tol, checked=checked, skipped=skipped)

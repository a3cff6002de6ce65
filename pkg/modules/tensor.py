import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import config
from modules.errors import AutogradError, NonFiniteError, TensorError

logger = logging.getLogger("kavi.tensor")

_grad_enabled = True
_strict = config.STRICT_NUMERICS


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def strict_numerics(enabled: bool = True):
    '''Validate every primitive input for NaN/Inf while active.'''
    global _strict
    prev = _strict
    _strict = enabled
    try:
        yield
    finally:
        _strict = prev


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    '''Dense float64 array that records primitive applications for backward().'''

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _frozen(np.array(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: "Node | None" = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _frozen(np.ascontiguousarray(arr, dtype=np.float64))
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        return t

    # --- introspection ---
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
    def T(self) -> "Tensor":
        return self.transpose()

    def item(self) -> float:
        if self.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def validate(self) -> "Tensor":
        if not np.isfinite(self.data).all():
            bad = int((~np.isfinite(self.data)).sum())
            raise NonFiniteError(f"{bad} non-finite value(s) in tensor of shape {self.shape}")
        return self

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        label = f"{self.name}: " if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({label}shape={self.shape}{grad})"

    # --- arithmetic ---
    def __add__(self, other): return Add.apply(self, other)
    def __radd__(self, other): return Add.apply(other, self)
    def __sub__(self, other): return Sub.apply(self, other)
    def __rsub__(self, other): return Sub.apply(other, self)
    def __mul__(self, other): return Mul.apply(self, other)
    def __rmul__(self, other): return Mul.apply(other, self)
    def __truediv__(self, other): return Div.apply(self, other)
    def __rtruediv__(self, other): return Div.apply(other, self)
    def __neg__(self): return Neg.apply(self)
    def __pow__(self, exponent: float): return Pow.apply(self, exponent=float(exponent))
    def __matmul__(self, other): return MatMul.apply(self, other)
    def __getitem__(self, index): return GetItem.apply(self, index=index)

    def exp(self): return Exp.apply(self)
    def log(self): return Log.apply(self)
    def sqrt(self): return Sqrt.apply(self)
    def relu(self): return ReLU.apply(self)
    def sum(self, axis=None, keepdims: bool = False): return Sum.apply(self, axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims: bool = False): return Mean.apply(self, axis=axis, keepdims=keepdims)
    def reshape(self, *shape): return Reshape.apply(self, shape=_shape_arg(shape))
    def transpose(self, *axes): return Transpose.apply(self, axes=_shape_arg(axes) or None)
    def softmax(self, axis: int = -1): return Softmax.apply(self, axis=axis)
    def log_softmax(self, axis: int = -1): return LogSoftmax.apply(self, axis=axis)

    def backward(self):
        backward(self)


def _shape_arg(shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        return tuple(shape[0])
    return tuple(shape)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.array(value, dtype=np.float64))


class Context:
    def __init__(self):
        self.saved = ()

    def save_for_backward(self, *arrays):
        self.saved = arrays


@dataclass
class Node:
    fn: type
    inputs: list[Tensor]
    ctx: Context
    consumed: bool = False


class Function:
    '''A primitive: forward on raw arrays, backward returns one gradient per input.'''

    @staticmethod
    def forward(ctx: Context, *arrays, **attrs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        tensors = [as_tensor(x) for x in inputs]
        if _strict:
            for t in tensors:
                t.validate()
        ctx = Context()
        try:
            out = cls.forward(ctx, *[t.data for t in tensors], **attrs)
        except ValueError as e:
            shapes = [t.shape for t in tensors]
            raise TensorError(f"{cls.__name__} rejected inputs {shapes}: {e}") from e
        result = Tensor._wrap(out)
        if _grad_enabled and any(t.requires_grad for t in tensors):
            result.requires_grad = True
            result._node = Node(cls, tensors, ctx)
        return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise ---
class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save_for_backward(a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx.saved
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save_for_backward(a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx.saved
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save_for_backward(a, b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save_for_backward(a, b)
        return a / b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return _unbroadcast(grad / b, a.shape), _unbroadcast(-grad * a / (b * b), b.shape)


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return (-grad,)


class Pow(Function):
    @staticmethod
    def forward(ctx, a, exponent: float):
        ctx.save_for_backward(a, exponent)
        return a ** exponent

    @staticmethod
    def backward(ctx, grad):
        a, exponent = ctx.saved
        return (grad * exponent * a ** (exponent - 1),)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, = ctx.saved
        return (grad * out,)


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save_for_backward(a)
        return np.log(a)

    @staticmethod
    def backward(ctx, grad):
        a, = ctx.saved
        return (grad / a,)


class Sqrt(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.sqrt(a)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, = ctx.saved
        return (grad / (2.0 * out),)


class ReLU(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save_for_backward(a > 0)
        return np.where(a > 0, a, 0.0)

    @staticmethod
    def backward(ctx, grad):
        mask, = ctx.saved
        return (grad * mask,)


# --- linear algebra and shape ---
class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul expects two 2-D operands")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"inner dimensions differ: {a.shape[1]} vs {b.shape[0]}")
        ctx.save_for_backward(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return grad @ b.T, a.T @ grad


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx.save_for_backward(a.shape)
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        shape, = ctx.saved
        return (grad.reshape(shape),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes=None):
        ctx.save_for_backward(axes)
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, grad):
        axes, = ctx.saved
        if axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(axes)),)


class GetItem(Function):
    @staticmethod
    def forward(ctx, a, index):
        ctx.save_for_backward(a.shape, index)
        return np.array(a[index])

    @staticmethod
    def backward(ctx, grad):
        shape, index = ctx.saved
        out = np.zeros(shape)
        np.add.at(out, index, grad)
        return (out,)


def _expand_reduced(grad, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(grad, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            grad = np.expand_dims(grad, ax)
    return np.broadcast_to(grad, shape)


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save_for_backward(a.shape, axis, keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, grad):
        shape, axis, keepdims = ctx.saved
        return (np.array(_expand_reduced(grad, shape, axis, keepdims)),)


class Mean(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
        ctx.save_for_backward(a.shape, axis, keepdims, count)
        return np.mean(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, grad):
        shape, axis, keepdims, count = ctx.saved
        return (np.array(_expand_reduced(grad, shape, axis, keepdims)) / count,)


class Softmax(Function):
    @staticmethod
    def forward(ctx, a, axis=-1):
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
        ctx.save_for_backward(out, axis)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, axis = ctx.saved
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)


class LogSoftmax(Function):
    @staticmethod
    def forward(ctx, a, axis=-1):
        shifted = a - a.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        ctx.save_for_backward(out, axis)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, axis = ctx.saved
        return (grad - np.exp(out) * grad.sum(axis=axis, keepdims=True),)


class SqDist(Function):
    '''Pairwise squared Euclidean distances between the rows of a (m, d) and b (n, d).'''

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
            raise ValueError(f"row spaces differ: {a.shape} vs {b.shape}")
        ctx.save_for_backward(a, b)
        # explicit differences: identical rows give exactly 0 and (i, j) == (j, i)
        diff = a[:, None, :] - b[None, :, :]
        return np.einsum('ijk,ijk->ij', diff, diff)

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        grad_a = 2.0 * (a * grad.sum(axis=1)[:, None] - grad @ b)
        grad_b = 2.0 * (b * grad.sum(axis=0)[:, None] - grad.T @ a)
        return grad_a, grad_b


# --- convolutional ---
class Conv1d(Function):
    '''x (N, C_in, L), w (C_out, C_in, K) -> (N, C_out, L_out); bias is added separately.'''

    @staticmethod
    def forward(ctx, x, w, stride=1, padding=0):
        if stride < 1 or padding < 0:
            raise ValueError(f"invalid stride={stride} padding={padding}")
        if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
            raise ValueError(f"conv1d channels differ: {x.shape} vs {w.shape}")
        k = w.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
        if xp.shape[2] < k:
            raise ValueError("kernel longer than padded input")
        cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
        ctx.save_for_backward(cols, w, x.shape, stride, padding)
        return np.einsum('nclk,ock->nol', cols, w, optimize=True)

    @staticmethod
    def backward(ctx, grad):
        cols, w, x_shape, stride, padding = ctx.saved
        k = w.shape[2]
        l_out = grad.shape[2]
        grad_w = np.einsum('nol,nclk->ock', grad, cols, optimize=True)
        grad_cols = np.einsum('nol,ock->nclk', grad, w, optimize=True)
        grad_xp = np.zeros((x_shape[0], x_shape[1], x_shape[2] + 2 * padding))
        for j in range(k):
            grad_xp[:, :, j:j + stride * (l_out - 1) + 1:stride] += grad_cols[..., j]
        return grad_xp[:, :, padding:padding + x_shape[2]], grad_w


class MaxPool1d(Function):
    @staticmethod
    def forward(ctx, x, kernel=2, stride=2):
        if kernel < 1 or stride < 1:
            raise ValueError(f"invalid kernel={kernel} stride={stride}")
        windows = sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]
        # np.argmax returns the first maximum: lowest index wins ties
        idx = windows.argmax(axis=-1)
        ctx.save_for_backward(x.shape, idx, kernel, stride)
        return np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, grad):
        shape, idx, kernel, stride = ctx.saved
        out = np.zeros(shape)
        positions = np.arange(idx.shape[2])[None, None, :] * stride + idx
        n, c = np.indices(idx.shape[:2])
        np.add.at(out, (n[..., None], c[..., None], positions), grad)
        return (out,)


class GlobalAvgPool1d(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x.shape)
        return x.mean(axis=2)

    @staticmethod
    def backward(ctx, grad):
        shape, = ctx.saved
        return (np.broadcast_to(grad[..., None], shape) / shape[2],)


PRIMITIVES: dict[str, type[Function]] = {
    'add': Add,
    'sub': Sub,
    'mul': Mul,
    'div': Div,
    'neg': Neg,
    'pow': Pow,
    'exp': Exp,
    'log': Log,
    'sqrt': Sqrt,
    'relu': ReLU,
    'matmul': MatMul,
    'reshape': Reshape,
    'transpose': Transpose,
    'gather': GetItem,
    'sum': Sum,
    'mean': Mean,
    'softmax': Softmax,
    'log_softmax': LogSoftmax,
    'sqdist': SqDist,
    'conv1d': Conv1d,
    'max_pool1d': MaxPool1d,
    'global_avg_pool1d': GlobalAvgPool1d,
}


def apply_primitive(op: str, inputs, attrs: dict | None = None) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise TensorError(f"unknown primitive {op!r}") from None
    if not isinstance(inputs, (list, tuple)):
        inputs = [inputs]
    return fn.apply(*inputs, **(attrs or {}))


class ComputationTape:
    '''Recorded nodes reachable from a root, in topological order (inputs first).'''

    def __init__(self, root: Tensor):
        self.order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                self.order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for parent in reversed(tensor._node.inputs):
                    if id(parent) not in visited:
                        stack.append((parent, False))

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.order)

    def __len__(self) -> int:
        return len(self.order)

    @property
    def nodes(self) -> list[Node]:
        return [t._node for t in self.order if t._node is not None]


def backward(root: Tensor):
    '''Populate .grad of every requires_grad leaf reachable from a scalar root.'''
    if root.size != 1:
        raise AutogradError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise AutogradError("root does not require grad")
    tape = ComputationTape(root)
    if any(node.consumed for node in tape.nodes):
        raise AutogradError("tape already consumed; run a new forward pass before backward()")

    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for tensor in reversed(tape.order):
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue
        node = tensor._node
        if node is None:
            if tensor.requires_grad:
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        input_grads = node.fn.backward(node.ctx, grad)
        node.consumed = True
        node.ctx = None
        for parent, parent_grad in zip(node.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = _unbroadcast(np.asarray(parent_grad), parent.shape)
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    excluded: list[tuple] = field(default_factory=list)
    max_excluded: float = 0.05

    @property
    def excluded_fraction(self) -> float:
        total = self.checked + len(self.excluded)
        return len(self.excluded) / total if total else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol and self.excluded_fraction <= self.max_excluded


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, tol: float = 1e-4,
               kink_tol: float = 1e-3, floor: float = 1e-3, max_excluded: float = 0.05) -> GradCheckReport:
    '''Compare backward() against central differences.

    The error of one coordinate is |analytic - numeric| / max(|analytic|, |numeric|, floor),
    a relative error for every gradient larger than `floor`.

    A coordinate is a kink (ties of max/argmax, ReLU at zero) when its one-sided slopes
    disagree by more than kink_tol and the gap does not shrink when the step is halved.
    Smooth curvature halves the gap, so curved coordinates are still checked. Kinks are
    reported in `excluded`; the check fails when they exceed `max_excluded` of all coordinates.
    '''
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(x.data, dtype=np.float64)
    if not np.isfinite(base).all():
        raise NonFiniteError("grad_check needs a finite point")

    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise AutogradError(f"grad_check needs a scalar function, got shape {out.shape}")
    analytic = np.zeros_like(base)
    if out.requires_grad:
        backward(out)
        if leaf.grad is not None:
            analytic = leaf.grad

    def evaluate(arr):
        with no_grad():
            return f(Tensor(arr)).item()

    def slopes(index, step):
        shifted = base.copy()
        shifted[index] += step
        f_plus = evaluate(shifted)
        shifted[index] -= 2 * step
        f_minus = evaluate(shifted)
        return (f_plus - f0) / step, (f0 - f_minus) / step

    f0 = out.item()
    worst = 0.0
    excluded = []
    for index in np.ndindex(base.shape):
        forward_slope, backward_slope = slopes(index, eps)
        gap = abs(forward_slope - backward_slope)
        if gap > kink_tol * max(1.0, abs(forward_slope), abs(backward_slope)):
            forward_slope, backward_slope = slopes(index, eps / 2)
            if abs(forward_slope - backward_slope) > 0.75 * gap:
                excluded.append(index)
                continue
        numeric = (forward_slope + backward_slope) / 2
        a = analytic[index]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    report = GradCheckReport(max_rel_error=worst, tol=tol, checked=base.size - len(excluded),
                             excluded=excluded, max_excluded=max_excluded)
    if excluded:
        sample = [list(map(int, i)) for i in excluded[:10]]
        logger.info("grad_check excluded %d of %d coordinate(s) as non-differentiable",
                    len(excluded), base.size, extra={'extra_data': {'excluded': sample}})
    return report

"""Dense float64 tensors with reverse-mode automatic differentiation.

The compute graph is implicit: every tensor produced by an operation keeps
references to its parents together with a closure that maps the output
gradient to parent gradients.  ``Tensor.backward`` topologically sorts that
DAG and visits each node exactly once.  All arithmetic is float64 and all
operations are plain deterministic numpy, so replaying a forward pass on
identical inputs reproduces identical bits.

Broadcasting is deliberately restricted: binary operations accept operands
of identical shape, or one operand that is a Python number / single-element
tensor.  Anything else is a :class:`ShapeError`, never silent expansion.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

Number = Union[int, float]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GradError(RuntimeError):
    """Backward invoked on a tensor that cannot seed a backward pass."""


class Tensor:
    """A dense n-dimensional float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping ------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep seeding d(self)/d(self) = 1.

        ``self`` must hold a single element (a scalar loss).  Gradients
        accumulate into ``.grad`` of every tensor with ``requires_grad``.
        """
        if self.data.size != 1:
            raise GradError(f"backward() needs a scalar loss, got shape {self.shape}")

        order = _toposort(self)
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._grad_fn is None:
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None:
                    continue
                acc = flowing.get(id(parent))
                if acc is None:
                    flowing[id(parent)] = pg.copy() if pg.base is not None else pg
                else:
                    acc += pg

    # -- operator sugar --------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: Number):
        return power(self, exponent)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order of the DAG rooted at ``root`` (iterative)."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    """Wrap an op result; parents/grad_fn are kept only if a grad can flow."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_elementwise(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ and neither is scalar")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo scalar broadcasting: collapse ``g`` onto a size-1 ``shape``."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "div")
    return _make(a.data / b.data, (a, b),
                 lambda g: (_reduce_to(g / b.data, a.shape),
                            _reduce_to(-g * a.data / (b.data * b.data), b.shape)))


def power(a, exponent: Number) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sqrt(a) -> Tensor:
    """Elementwise square root.

    The derivative at 0 is taken as 0 (true one-sided derivative is
    unbounded); callers hit this only where a downstream hinge is inactive
    anyway, and it keeps gradients finite for identical feature pairs.
    """
    a = as_tensor(a)
    y = np.sqrt(a.data)

    def grad_fn(g):
        out = np.zeros_like(y)
        np.divide(g, 2.0 * y, out=out, where=y > 0.0)
        return (out,)

    return _make(y, (a,), grad_fn)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; the mask is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "where")
    m = np.asarray(mask, dtype=bool)
    return _make(np.where(m, a.data, b.data), (a, b),
                 lambda g: (_reduce_to(g * m, a.shape), _reduce_to(g * ~m, b.shape)))


# -- reductions and reshaping --------------------------------------------------


def tsum(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        return _make(np.sum(a.data).reshape(()), (a,),
                     lambda g: (np.broadcast_to(g, a.shape).copy(),))
    ax = int(axis)
    return _make(np.sum(a.data, axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = float(a.size)
    return _make(np.mean(a.data).reshape(()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} (size {a.size}) to {shape}")
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of an m*k and a k*n matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def softmax_rows(m) -> Tensor:
    """Row-wise softmax of a matrix, stabilised by per-row max subtraction."""
    m = as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {m.shape}")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (m,), grad_fn)


# -- convolution and pooling ------------------------------------------------------


def _im2col(padded: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    c, ho, wo = windows.shape[0], windows.shape[1], windows.shape[2]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a C_in*H*W input with C_out*C_in*k*k kernels.

    Output spatial size follows floor((H + 2*padding - k) / stride) + 1.
    No kernel flip: this is the usual deep-learning convention.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(
            f"conv2d expects C*H*W input and Co*Ci*k*k kernels, got {x.shape} and {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw:
        raise ShapeError(f"conv2d supports square kernels only, got {kernels.shape}")
    k = kh
    cx, h, w = x.shape
    if cx != c_in:
        raise ShapeError(f"conv2d: input has {cx} channels but kernels expect {c_in}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ShapeError(
            f"conv2d: kernel {k}x{k} larger than padded input {hp}x{wp}")

    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(padded, k, stride)
    w_mat = kernels.data.reshape(c_out, c_in * k * k)
    out = w_mat @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(c_out, ho, wo)

    def grad_fn(g):
        g_mat = g.reshape(c_out, ho * wo)
        g_kernels = (g_mat @ cols.T).reshape(kernels.shape)
        g_cols = (w_mat.T @ g_mat).reshape(c_in, k, k, ho, wo)
        g_padded = np.zeros((c_in, hp, wp))
        for i in range(k):
            for j in range(k):
                g_padded[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += g_cols[:, i, j]
        g_x = g_padded[:, padding:padding + h, padding:padding + w]
        if bias is None:
            return (np.ascontiguousarray(g_x), g_kernels)
        return (np.ascontiguousarray(g_x), g_kernels, g_mat.sum(axis=1))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out, parents, grad_fn)


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; ties route gradient to the first max."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2 expects a C*H*W tensor, got shape {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    v = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = v.argmax(axis=3)
    y = np.take_along_axis(v, idx[..., None], axis=3)[..., 0]

    def grad_fn(g):
        gv = np.zeros_like(v)
        np.put_along_axis(gv, idx[..., None], g[..., None], axis=3)
        gx = gv.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        return (gx,)

    return _make(y, (x,), grad_fn)


# -- independent gradient oracle ----------------------------------------------------


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time.

    This is the independent oracle against which analytic backward passes
    are checked; it never touches the grad machinery.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    grad = np.zeros_like(x.data)
    for i in range(x.data.size):
        orig = x.data.flat[i]
        x.data.flat[i] = orig + step
        f_plus = f(x)
        x.data.flat[i] = orig - step
        f_minus = f(x)
        x.data.flat[i] = orig
        if not isinstance(f_plus, Tensor) or f_plus.size != 1 or f_minus.size != 1:
            raise GradError("finite_difference_grad needs f to return a scalar tensor")
        grad.flat[i] = (f_plus.item() - f_minus.item()) / (2.0 * step)
    return grad

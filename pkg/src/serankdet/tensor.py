"""Dense tensors and reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array (float32 by default, float64 for gradient
checks).  Operations execute eagerly; while a `Tape` is active, every op
whose result needs a gradient records a node with a backward rule.  The
tape's node list is in creation order, which is already topological, so
`Tape.backward` is a single reverse sweep.

Kernels are pure functions of their inputs.  A tape and the tensors
recorded on it belong to one thread for the duration of a forward +
backward pass; independent tapes may run concurrently.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .counting import add_ops

DEFAULT_DTYPE = np.float32

# When enabled, every forward kernel asserts its output is finite.
_check_finite = False


def set_debug_checks(enabled: bool):
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    """N-dimensional dense array with optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_tape_stack: list["Tape"] = []


class Tape:
    """Recorded forward operations, replayed in reverse for gradients."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

        Leaves that were recorded but do not influence the loss receive a
        zero gradient.  Gradients add up across calls, as they do across
        multiple uses of a tensor inside one graph.
        """
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss tensor was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = ig if acc is None else acc + ig
        for lid, leaf in self._leaves.items():
            g = grads.get(lid)
            if g is None:
                g = np.zeros_like(leaf.data)
            else:
                g = np.ascontiguousarray(g)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(tape: Tape, loss: Tensor):
    tape.backward(loss)


@contextmanager
def no_tape():
    """Suspend recording for the duration of the block (inference paths)."""
    global _tape_stack
    saved, _tape_stack = _tape_stack, []
    try:
        yield
    finally:
        _tape_stack = saved


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


def make_result(data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap a kernel result, recording it on the active tape when needed.

    `backward_fn(g)` must return one gradient array (or None) per input,
    in order.  Exposed so higher-level modules can define fused ops.
    """
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in op output")
    out = Tensor(data, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(out, tuple(inputs), backward_fn))
        tape._produced.add(id(out))
        for inp in inputs:
            if inp.requires_grad and id(inp) not in tape._produced:
                tape._leaves.setdefault(id(inp), inp)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data + b.data
    add_ops(out.size)
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data - b.data
    add_ops(out.size)
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data * b.data
    add_ops(out.size)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), bw)


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data / b.data
    add_ops(out.size)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return make_result(out, (a, b), bw)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * np.asarray(s, dtype=a.dtype)
    add_ops(out.size)
    return make_result(out, (a,), lambda g: (g * np.asarray(s, dtype=a.dtype),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    add_ops(out.size)
    return make_result(out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    add_ops(3 * out.size)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    add_ops(out.size)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=a.dtype).reshape(())
    add_ops(a.size)
    return make_result(out, (a,), lambda g: (np.full(a.shape, g.reshape(()), dtype=a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = (a.data.sum(dtype=a.dtype) / n).reshape(())
    add_ops(a.size)
    return make_result(out, (a,), lambda g: (np.full(a.shape, g.reshape(()) / n, dtype=a.dtype),))


def std_all(a: Tensor) -> Tensor:
    """Population standard deviation over all elements (fused).

    Subgradient 0 is used at sigma == 0, where std is not differentiable.
    """
    mu = a.data.mean(dtype=a.dtype)
    centered = a.data - mu
    sigma = np.sqrt(np.mean(centered * centered, dtype=a.dtype))
    add_ops(3 * a.size)

    def bw(g):
        if sigma == 0:
            return (np.zeros_like(a.data),)
        return (g.reshape(()) * centered / (a.size * sigma),)

    return make_result(np.asarray(sigma, dtype=a.dtype).reshape(()), (a,), bw)


def sum_axes(a: Tensor, axes, keepdims: bool = False) -> Tensor:
    axes = tuple(axes) if isinstance(axes, (tuple, list)) else (axes,)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=a.dtype)
    add_ops(a.size)

    def bw(g):
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, offsets, axis=axis))

    return make_result(out, tuple(tensors), bw)


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return make_result(np.ascontiguousarray(out), (a,), bw)


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the two trailing spatial axes by `pad` on each side."""
    if pad == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, width)
    sl = (Ellipsis, slice(pad, a.shape[-2] + pad), slice(pad, a.shape[-1] + pad))
    return make_result(out, (a,), lambda g: (np.ascontiguousarray(g[sl]),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    add_ops(2 * a.shape[0] * a.shape[1] * b.shape[1])

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return make_result(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return make_result(np.ascontiguousarray(a.data.T), (a,), lambda g: (np.ascontiguousarray(g.T),))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, stabilized by row-max subtraction."""
    if a.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    add_ops(5 * out.size)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return make_result(out, (a,), bw)


def standardize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """(a - mean) / (std + eps), statistics over all elements of `a`."""
    if a.size < 2:
        raise ValueError("standardize needs at least 2 elements")
    mu = mean_all(a)
    sigma = std_all(a)
    return div(sub(a, mu), add(sigma, as_tensor(eps, like=a)))


# ---------------------------------------------------------------------------
# finite-difference oracle


def fd_gradient(f, x: Tensor, h: float = 1e-5, elements=None) -> Tensor:
    """Central-difference gradient of scalar `f` with respect to `x`.

    Perturbs `x.data` in place (restoring it afterwards) so `f` can simply
    close over `x`.  With `elements`, only those flat indices are probed;
    the rest of the result stays zero.  Meant for float64 tensors.
    """
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    indices = range(flat.size) if elements is None else elements

    def feval():
        out = f(x)
        return out.item() if isinstance(out, Tensor) else float(out)

    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = feval()
        flat[i] = orig - h
        fm = feval()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.shape))

"""A small reverse-mode autodiff engine over numpy arrays.

Each op returns a fresh :class:`Tensor` holding its parents and a closure that
maps the output gradient to parent gradients. ``backward`` walks the graph in
reverse topological order. Graph recording is skipped inside :func:`no_grad`
and for results whose inputs do not require gradients.
"""
import contextlib
import math

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __truediv__(self, o):
        if isinstance(o, (int, float)):
            return scale(self, 1.0 / o)
        return mul(self, reciprocal(o))

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)
    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents, backward):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c):
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def reciprocal(a):
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x):
    # stable for large |x|, including +-inf
    with np.errstate(over="ignore"):
        e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),))


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh approximation of GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def back(g):
        dinner = c * (1 + 3 * k * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _make(out, (a,), back)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axes, keepdims), 1.0 / n)


def max_(a, axis):
    """Max along one axis; the gradient goes to the lowest-index maximiser."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _make(out, (a,), back)


# ------------------------------------------------------------------- shapes

def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def concatenate(tensors, axis=0):
    tensors = list(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise ShapeError(f"concatenate: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def gather_rows(table, index):
    """``table[index]`` for an integer index array of any shape."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def back(g):
        flat_idx = index.reshape(-1)
        flat_g = g.reshape(flat_idx.size, -1)
        if shape[0] <= 512:
            onehot = np.zeros((flat_idx.size, shape[0]), dtype=g.dtype)
            onehot[np.arange(flat_idx.size), flat_idx] = 1
            return ((onehot.T @ flat_g).reshape(shape),)
        full = np.zeros((shape[0], flat_g.shape[1]), dtype=g.dtype)
        np.add.at(full, flat_idx, flat_g)
        return (full.reshape(shape),)

    return _make(table.data[index], (table,), back)


def take(a, index, axis):
    """``np.take`` along ``axis`` with an integer index array."""
    index = np.asarray(index)
    axis = axis % a.ndim
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (full,)

    return _make(np.take(a.data, index, axis=axis), (a,), back)


def slice_axis(a, start, stop, axis):
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    axis = axis % a.ndim
    sl = (slice(None),) * axis + (slice(start, stop),)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return _make(a.data[sl], (a,), back)


def stop_gradient(a):
    return Tensor(a.data)


# ---------------------------------------------------------------- linear alg

def matmul(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), back)


def linear(x, w, b=None):
    """``x @ w + b`` with the leading dims of ``x`` flattened for one GEMM."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[-1],))


# -------------------------------------------------------------- normalisers

def _softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    out = _softmax(a.data, axis)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


def _log_softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(a, axis=-1):
    out = _log_softmax(a.data, axis)

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), back)


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), back)


def l2_normalize(a, axis=-1, eps=1e-12):
    xd = a.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, xd.dtype.type(eps))
    out = xd / norm

    def back(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (a,), back)


def attention(q, k, v):
    """Scaled dot-product attention over the last two axes (composed from primitives)."""
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


# -------------------------------------------------------------------- losses

def softmax_cross_entropy(logits, targets, axis=-1):
    """Mean cross-entropy; ``targets`` are class indices or a probability array."""
    x = logits.data
    logp = _log_softmax(x, axis)
    t = np.asarray(targets)
    if t.dtype.kind in "iu":
        onehot = np.zeros_like(x)
        np.put_along_axis(onehot, np.expand_dims(t, axis), 1.0, axis=axis)
        t = onehot
    else:
        t = t.astype(x.dtype, copy=False)
        if t.shape != x.shape:
            raise ShapeError(f"softmax_cross_entropy: logits {x.shape} vs targets {t.shape}")
    n = x.size // x.shape[axis]
    loss = -(t * logp).sum() / n

    def back(g):
        return (g * (np.exp(logp) * t.sum(axis=axis, keepdims=True) - t) / n,)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), back)


def softplus_np(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def bce_with_logits(logits, targets, reduce="mean"):
    """Binary cross-entropy on logits via the softplus form."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeError(f"bce_with_logits: logits {x.shape} vs targets {t.shape}")
    elem = softplus_np(x) - t * x
    if reduce == "none":
        return _make(elem, (logits,), lambda g: (g * (_sigmoid(x) - t),))
    n = x.size
    return _make(np.asarray(elem.sum() / n, dtype=x.dtype), (logits,),
                 lambda g: (g * (_sigmoid(x) - t) / n,))

"""Central finite-difference certification of analytic gradients."""
import numpy as np

from .tensor import Tensor


def relative_error(analytic, numeric, floor=1e-4):
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# central stencils: (offsets, coefficients) with derivative = sum(c * f(x + o*h)) / h
STENCILS = {2: ((1, -1), (0.5, -0.5)),
            4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12))}


def numeric_grad(fn, arrays, index, h=1e-5, weights=None, order=2):
    """d/d arrays[index] of sum(weights * fn(*arrays)) by central differences.

    ``order=4`` uses the five-point stencil, whose O(h^4) truncation error lets
    a larger step keep roundoff down on steeply curved losses.
    """
    offsets, coefs = STENCILS[order]
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    x = base[index]
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        acc = 0.0
        for o, c in zip(offsets, coefs):
            flat[i] = old + o * h
            acc += c * _scalarize(fn(*[Tensor(b) for b in base]), weights)
        flat[i] = old
        gflat[i] = acc / h
    return out


def _scalarize(t, weights):
    d = t.data if isinstance(t, Tensor) else np.asarray(t)
    if weights is None:
        return float(np.sum(d))
    return float(np.sum(d * weights))


def check_gradients(fn, arrays, h=1e-5, rng=None, wrt=None, order=2):
    """Worst relative error between backprop and finite differences.

    ``fn`` maps Tensors to a Tensor; a fixed random cotangent turns non-scalar
    outputs into a scalar so every output element is exercised.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = [np.asarray(a, np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    weights = rng.standard_normal(out.shape) if out.data.size > 1 else None
    seed_grad = weights if weights is not None else np.ones_like(out.data)
    out.backward(np.asarray(seed_grad, np.float64).reshape(out.shape))
    worst = 0.0
    for i in wrt:
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i])
        numeric = numeric_grad(fn, arrays, i, h, weights, order)
        worst = max(worst, relative_error(analytic, numeric))
    return worst

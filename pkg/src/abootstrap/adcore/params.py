"""Named parameter storage, AdamW, and the EMA shadow."""
import math

import numpy as np

from .tensor import Tensor

TAU_START = 0.004


class NonFiniteGradient(FloatingPointError):
    pass


class ParamStore:
    """Ordered name -> array mapping; iteration order is insertion order."""

    def __init__(self, arrays=None):
        self._arrays = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name, array):
        if name in self._arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._arrays[name] = np.array(array, copy=True)

    def __getitem__(self, name):
        return self._arrays[name]

    def __setitem__(self, name, array):
        if name not in self._arrays:
            raise KeyError(name)
        self._arrays[name] = array

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def copy(self):
        return ParamStore({k: v for k, v in self._arrays.items()})

    def astype(self, dtype):
        return ParamStore({k: v.astype(dtype) for k, v in self._arrays.items()})

    def tensors(self, requires_grad=True):
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self._arrays.items()}

    def size(self):
        return int(sum(v.size for v in self._arrays.values()))


def truncated_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) truncated at two standard deviations."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * std).astype(dtype)


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


class AdamW:
    """Adam with decoupled weight decay and optional global-norm clipping."""

    def __init__(self, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, weight_decay=0.0,
                 clip_norm=None, decay_filter=None):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        # names for which weight decay applies; None means all
        self.decay_filter = decay_filter
        self.state = {"step": 0, "m": {}, "v": {}}

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        if self.clip_norm is not None:
            norm = global_norm(grads)
            if norm > self.clip_norm:
                factor = self.clip_norm / (norm + 1e-12)
                grads = {k: g * g.dtype.type(factor) for k, g in grads.items()}
        st = self.state
        st["step"] += 1
        t = st["step"]
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for name in params.names():
            p = params[name]
            g = grads.get(name)
            if g is None:
                # untouched by this loss: no moment update and no decay
                continue
            m = st["m"].get(name)
            v = st["v"].get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            st["m"][name], st["v"][name] = m.astype(p.dtype), v.astype(p.dtype)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            wd = self.weight_decay if (self.decay_filter is None or self.decay_filter(name)) else 0.0
            params[name] = (p - lr * update - lr * wd * p).astype(p.dtype)
        return params


def adamw_step(params, grads, state, lr, wd, b1, b2, eps=1e-8, clip_norm=None):
    """Functional wrapper: one AdamW step using ``state`` (created if None)."""
    opt = AdamW(lr=lr, b1=b1, b2=b2, eps=eps, weight_decay=wd, clip_norm=clip_norm)
    if state is not None:
        opt.state = state
    opt.step(params, grads)
    return params, opt.state


def tau_schedule(kind, step, total, start=TAU_START):
    if kind == "cosine":
        if not 0 <= step <= total:
            raise ValueError(f"step {step} outside [0, {total}]")
        return start * 0.5 * (1.0 + math.cos(math.pi * step / total))
    if kind == "constant":
        return start
    if kind == "zero":
        return 0.0
    raise ValueError(f"unknown tau schedule {kind!r}")


class EmaState:
    def __init__(self, online, schedule="constant"):
        self.shadow = online.copy()
        self.schedule = schedule

    def update(self, online, tau):
        ema_update(self.shadow, online, tau)


def ema_update(shadow, online, tau):
    """shadow <- (1 - tau) * shadow + tau * online, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if shadow.names() != online.names():
        raise ValueError("EMA shadow and online stores have different parameters")
    for name in shadow.names():
        s, o = shadow[name], online[name]
        if s.shape != o.shape:
            raise ValueError(f"EMA shape mismatch for {name!r}: {s.shape} vs {o.shape}")
        if tau == 1.0:
            shadow[name] = o.copy()
        elif tau != 0.0:
            shadow[name] = ((1.0 - tau) * s + tau * o).astype(s.dtype)
    return shadow

"""Hot loops, each with a numba kernel and a pure-numpy twin.

The public functions dispatch on :data:`abootstrap._accel.HAVE_NUMBA`. The
``*_numpy`` and ``*_jit`` variants stay importable so tests and the benchmark can
run both paths side by side.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit


# ---------------------------------------------------------------- resampling

def _source_coords(lo, hi, size, out):
    # output pixel centres mapped back to source pixel-centre coordinates
    t = (np.arange(out, dtype=np.float64) + 0.5) / out
    c = (lo + t * (hi - lo)) * size - 0.5
    return np.clip(c, 0.0, size - 1.0)


def resample_numpy(canvas, boxes, out_size):
    """Bilinear crops of ``canvas`` (H, W, C) at ``boxes`` (n, 4) -> (n, R, R, C)."""
    canvas = np.asarray(canvas, dtype=np.float32)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    h, w, _ = canvas.shape
    views = np.empty((boxes.shape[0], out_size, out_size, canvas.shape[2]), np.float32)
    for n, (y0, x0, y1, x1) in enumerate(boxes):
        ys = _source_coords(y0, y1, h, out_size)
        xs = _source_coords(x0, x1, w, out_size)
        iy = np.minimum(np.floor(ys).astype(np.int64), h - 2) if h > 1 else np.zeros_like(ys, np.int64)
        ix = np.minimum(np.floor(xs).astype(np.int64), w - 2) if w > 1 else np.zeros_like(xs, np.int64)
        fy = (ys - iy)[:, None, None]
        fx = (xs - ix)[None, :, None]
        iy1 = np.minimum(iy + 1, h - 1)
        ix1 = np.minimum(ix + 1, w - 1)
        top = canvas[iy][:, ix] * (1 - fx) + canvas[iy][:, ix1] * fx
        bot = canvas[iy1][:, ix] * (1 - fx) + canvas[iy1][:, ix1] * fx
        views[n] = top * (1 - fy) + bot * fy
    return views


@njit
def resample_jit(canvas, boxes, out_size):
    h, w, ch = canvas.shape
    n = boxes.shape[0]
    views = np.empty((n, out_size, out_size, ch), np.float32)
    for k in range(n):
        y0, x0, y1, x1 = boxes[k, 0], boxes[k, 1], boxes[k, 2], boxes[k, 3]
        for u in range(out_size):
            sy = (y0 + (u + 0.5) / out_size * (y1 - y0)) * h - 0.5
            sy = min(max(sy, 0.0), h - 1.0)
            iy = min(int(np.floor(sy)), h - 2) if h > 1 else 0
            fy = sy - iy
            iy1 = min(iy + 1, h - 1)
            for v in range(out_size):
                sx = (x0 + (v + 0.5) / out_size * (x1 - x0)) * w - 0.5
                sx = min(max(sx, 0.0), w - 1.0)
                ix = min(int(np.floor(sx)), w - 2) if w > 1 else 0
                fx = sx - ix
                ix1 = min(ix + 1, w - 1)
                for c in range(ch):
                    top = canvas[iy, ix, c] * (1 - fx) + canvas[iy, ix1, c] * fx
                    bot = canvas[iy1, ix, c] * (1 - fx) + canvas[iy1, ix1, c] * fx
                    views[k, u, v, c] = top * (1 - fy) + bot * fy
    return views


def resample(canvas, boxes, out_size):
    if HAVE_NUMBA:
        return resample_jit(np.ascontiguousarray(canvas, dtype=np.float32),
                            np.ascontiguousarray(np.asarray(boxes, np.float64).reshape(-1, 4)),
                            int(out_size))
    return resample_numpy(canvas, boxes, out_size)


# ------------------------------------------------------------ Bellman sweep

def bellman_numpy(next_state, rewards, q, gamma):
    """Q'[s,a,l] = r[s',l] + gamma * max_a' Q[s',a',l] with s' = next_state[s,a]."""
    best = q.max(axis=1)
    return rewards[next_state] + gamma * best[next_state]


@njit
def bellman_jit(next_state, rewards, q, gamma):
    n_s, n_a = next_state.shape
    n_l = rewards.shape[1]
    best = np.empty((n_s, n_l))
    for s in range(n_s):
        for l in range(n_l):
            m = q[s, 0, l]
            for a in range(1, n_a):
                if q[s, a, l] > m:
                    m = q[s, a, l]
            best[s, l] = m
    out = np.empty_like(q)
    for s in range(n_s):
        for a in range(n_a):
            t = next_state[s, a]
            for l in range(n_l):
                out[s, a, l] = rewards[t, l] + gamma * best[t, l]
    return out


def bellman(next_state, rewards, q, gamma):
    if HAVE_NUMBA:
        return bellman_jit(np.ascontiguousarray(next_state, np.int64),
                           np.ascontiguousarray(rewards, np.float64),
                           np.ascontiguousarray(q, np.float64), float(gamma))
    return bellman_numpy(next_state, rewards, q, gamma)


# -------------------------------------------------------------- tabular TD

@njit
def td_jit(next_state, rewards, q, gamma, s_idx, a_idx, lrs, sync_every):
    q = q.copy()
    target = q.copy()
    n_l = rewards.shape[1]
    n_a = q.shape[1]
    for t in range(s_idx.shape[0]):
        if t % sync_every == 0:
            target[:] = q
        s = s_idx[t]
        a = a_idx[t]
        nxt = next_state[s, a]
        lr = lrs[t]
        for l in range(n_l):
            m = target[nxt, 0, l]
            for b in range(1, n_a):
                if target[nxt, b, l] > m:
                    m = target[nxt, b, l]
            y = rewards[nxt, l] + gamma * m
            q[s, a, l] += lr * (y - q[s, a, l])
    return q


def td_numpy(next_state, rewards, q, gamma, s_idx, a_idx, lrs, sync_every):
    """Same updates as :func:`td_jit`, vectorised per target-sync period.

    Between syncs the target table is frozen and transitions are deterministic,
    so k updates of one entry collapse to ``y + (q - y) * prod(1 - lr)``.
    """
    q = np.array(q, dtype=np.float64, copy=True)
    n_s, n_a = next_state.shape
    for start in range(0, len(s_idx), sync_every):
        stop = min(start + sync_every, len(s_idx))
        y = bellman_numpy(next_state, rewards, q, gamma)
        keep = np.ones((n_s, n_a))
        np.multiply.at(keep, (s_idx[start:stop], a_idx[start:stop]), 1.0 - lrs[start:stop])
        q = y + (q - y) * keep[:, :, None]
    return q


def td(next_state, rewards, q, gamma, s_idx, a_idx, lrs, sync_every):
    args = (np.ascontiguousarray(next_state, np.int64), np.ascontiguousarray(rewards, np.float64),
            np.ascontiguousarray(q, np.float64), float(gamma),
            np.ascontiguousarray(s_idx, np.int64), np.ascontiguousarray(a_idx, np.int64),
            np.ascontiguousarray(lrs, np.float64), int(sync_every))
    if HAVE_NUMBA:
        return td_jit(*args)
    return td_numpy(*args)

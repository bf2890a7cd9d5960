"""Probes and diagnostics on frozen models."""
import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .adcore import no_grad
from .bootstrap import compute_targets
from .geometry import apply_action, iou, sample_crops
from .models import backbone_names, encode_view, value_logits
from .synthdata import annotation_dists, generate_scenes, render_views

DEFAULT_BUCKETS = ((0.0, 0.1), (0.1, 0.3), (0.3, 0.6), (0.6, 1.0))
TOP_LEFT = (0.0, 0.0, 0.5, 0.5)


class ProbeError(ValueError):
    pass


@dataclass
class ProbeReport:
    task: str
    accuracy: float
    n_samples: int
    config_hash: str
    iterations: int = 0
    diagnostic: str = None

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------ linear probe

def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_logistic(x, y, n_classes, l2=1e-3, max_iter=5000, tol=1e-6):
    """Multinomial logistic regression by full-batch accelerated gradient descent.

    Minimises mean cross-entropy + l2/2 * ||W||^2 (bias unpenalised) and stops once
    the gradient norm drops to ``tol`` or after ``max_iter`` iterations.
    Returns ``(W, b, iterations)``.
    """
    n, d = x.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    # smoothness bound of the objective gives a safe step
    lip = 0.5 * (np.linalg.norm(x, 2) ** 2 / n + 1.0) + l2
    step = 1.0 / lip
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    vw, vb = w.copy(), b.copy()
    t = 1.0
    for it in range(1, max_iter + 1):
        g = (_softmax(x @ vw + vb) - onehot) / n
        gw = x.T @ g + l2 * vw
        gb = g.sum(axis=0)
        w_new, b_new = vw - step * gw, vb - step * gb
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_new
        vw = w_new + mom * (w_new - w)
        vb = b_new + mom * (b_new - b)
        w, b, t = w_new, b_new, t_new
        if it % 25 == 0 or it == max_iter:
            g = (_softmax(x @ w + b) - onehot) / n
            norm = math.sqrt(float(np.sum((x.T @ g + l2 * w) ** 2) + np.sum(g.sum(axis=0) ** 2)))
            if norm <= tol:
                return w, b, it
    return w, b, max_iter


def standardize(train, test):
    mu = train.mean(axis=0)
    sd = train.std(axis=0) + 1e-8
    return (train - mu) / sd, (test - mu) / sd


def linear_probe(features, labels, splits=0.5, task="probe", l2=1e-3, max_iter=5000, tol=1e-6, seed=0):
    """Held-out accuracy of a logistic-regression probe on frozen features.

    ``splits`` is a train fraction or a ``(train_idx, test_idx)`` pair.
    """
    x = np.asarray(features, np.float64)
    y = np.asarray(labels, np.int64)
    if isinstance(splits, float):
        order = np.random.default_rng(seed).permutation(len(y))
        cut = int(round(splits * len(y)))
        tr, te = order[:cut], order[cut:]
    else:
        tr, te = (np.asarray(s) for s in splits)
    classes = np.unique(y[tr])
    if len(classes) < 2:
        raise ProbeError(f"probe {task!r}: train split has a single class")
    # relabel to a dense range; test labels unseen in training can never be right
    lut = {c: i for i, c in enumerate(classes)}
    ytr = np.array([lut[v] for v in y[tr]])
    yte = np.array([lut.get(v, -1) for v in y[te]])
    xtr, xte = standardize(x[tr], x[te])
    w, b, iters = fit_logistic(xtr, ytr, len(classes), l2, max_iter, tol)
    acc = float(np.mean(np.argmax(xte @ w + b, axis=1) == yte)) if len(te) else float("nan")
    h = hashlib.sha1(json.dumps({"task": task, "l2": l2, "max_iter": max_iter, "tol": tol,
                                 "n_train": len(tr), "n_test": len(te), "d": x.shape[1]}).encode()).hexdigest()[:12]
    return ProbeReport(task, acc, int(len(te)), h, iters)


# ---------------------------------------------------------- probe datasets

@dataclass
class ProbeSet:
    views: np.ndarray
    boxes: np.ndarray
    dominant: np.ndarray      # argmax annotation of the whole view
    offset: np.ndarray        # argmax annotation of the view's top-left quadrant


def probe_set(scene_config, n_scenes, views_per_scene, resolution, seed, scale_range=(0.2, 0.6)):
    """Held-out views with labels for the dominant-glyph and glyph-at-offset tasks."""
    scenes = generate_scenes(10_000 + seed, n_scenes, scene_config)
    rng = np.random.default_rng([seed, 7])
    views, boxes, dom, off = [], [], [], []
    for sc in scenes:
        bx = sample_crops(rng, views_per_scene, scale_range)
        views.append(render_views(sc, bx, resolution))
        boxes.append(bx)
        dom.append(np.argmax(annotation_dists(sc, bx), axis=1))
        off.append(np.argmax(annotation_dists(sc, apply_action(bx, TOP_LEFT)), axis=1))
    return ProbeSet(np.concatenate(views), np.concatenate(boxes), np.concatenate(dom), np.concatenate(off))


def probe_features(cfg, P, views, batch=256):
    """Mean-pooled backbone tokens of each view."""
    out = []
    with no_grad():
        for i in range(0, len(views), batch):
            out.append(encode_view(cfg, P, views[i:i + batch]).pooled.data)
    return np.concatenate(out).astype(np.float64)


def probe_reports(cfg, P, pset, seed=0):
    """Both probe tasks; a degenerate probe set yields accuracy None and a diagnostic."""
    feats = probe_features(cfg, P, pset.views)
    out = {}
    for task, labels in (("dominant_glyph", pset.dominant), ("glyph_at_offset", pset.offset)):
        try:
            out[task] = linear_probe(feats, labels, 0.5, task, seed=seed)
        except ProbeError as exc:
            out[task] = ProbeReport(task, None, len(labels), "", 0, str(exc))
    return out


# ----------------------------------------------- bucketed bootstrap accuracy

def bucketed_bootstrap_accuracy(cfg, P_online, P_target, batches, annotations, gamma,
                                buckets=DEFAULT_BUCKETS, mask_actions=False):
    """Agreement between argmax online value logits for (view i, action i->j) and the
    argmax target of view j, grouped by IoU(box i, box j). Empty buckets give None.
    """
    edges = list(buckets)
    hits = np.zeros(len(edges))
    counts = np.zeros(len(edges), np.int64)
    for tb in batches:
        targets = compute_targets(cfg, P_target, tb, annotations, gamma, mask_actions)
        with no_grad():
            q = value_logits(cfg, P_online, tb.views, tb.actions, annotations, mask_actions).data
        b, n, m = tb.successor.shape
        for bi in range(b):
            for i in range(n):
                for k in range(m):
                    j = tb.successor[bi, i, k]
                    if j < 0:
                        continue
                    ov = iou(tb.boxes[bi, i], tb.boxes[bi, j])
                    slot = _bucket_of(ov, edges)
                    counts[slot] += 1
                    hits[slot] += np.argmax(q[bi, i, k]) == np.argmax(targets[bi, j])
    return [{"bucket": list(e), "count": int(c), "accuracy": (float(h / c) if c else None)}
            for e, h, c in zip(edges, hits, counts)]


def _bucket_of(value, edges):
    for i, (lo, hi) in enumerate(edges):
        last = i == len(edges) - 1
        if lo <= value < hi or (last and value == hi):
            return i
    raise ValueError(f"IoU {value} outside the buckets")


# -------------------------------------------------------------- grad cosine

@dataclass
class GradCosine:
    value: float
    diagnostic: str = ""


def grad_cosine(store, loss_a, loss_b, names=None):
    """Cosine between the gradients of two losses over ``names`` (default: the backbone).

    ``loss_a`` and ``loss_b`` map a parameter-tensor dict to a scalar Tensor.
    """
    names = backbone_names(store) if names is None else list(names)
    flat = []
    for fn in (loss_a, loss_b):
        P = store.tensors(True)
        fn(P).backward()
        flat.append(np.concatenate([(P[n].grad if P[n].grad is not None else np.zeros_like(P[n].data))
                                    .ravel().astype(np.float64) for n in names]))
    na, nb = np.linalg.norm(flat[0]), np.linalg.norm(flat[1])
    if na == 0 or nb == 0:
        which = "first" if na == 0 else "second"
        return GradCosine(None, f"{which} loss has a zero gradient over {len(names)} tensors")
    return GradCosine(float(np.clip(flat[0] @ flat[1] / (na * nb), -1.0, 1.0)))


# --------------------------------------------------------------- oracle gap

def oracle_value_gap(cfg, P, mdp, obs_q, observations, chunk=64):
    """Max and mean |sigmoid(value logits) - Q-bar| over observations, actions and annotations.

    ``observations`` is the (S, R, R, 3) array of rendered lattice states; each
    observation is evaluated once, at its first state.
    """
    if observations.shape[0] != mdp.n_states:
        raise ValueError(f"{observations.shape[0]} rendered states for an MDP with {mdp.n_states}")
    if cfg.vocab_size != mdp.n_annotations:
        raise ValueError(f"model vocabulary {cfg.vocab_size} differs from the MDP's {mdp.n_annotations} annotations")
    tokens = mdp.lattice.action_tokens
    ann = np.arange(mdp.n_annotations)
    errs = []
    with no_grad():
        for i in range(0, len(obs_q.representative), chunk):
            reps = obs_q.representative[i:i + chunk]
            acts = np.broadcast_to(tokens, (1, len(reps)) + tokens.shape)
            logits = value_logits(cfg, P, observations[reps][None], acts, ann).data[0]
            pred = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
            errs.append(np.abs(pred - obs_q.table[i:i + chunk]))
    err = np.concatenate(errs)
    return {"max": float(err.max()), "mean": float(err.mean())}

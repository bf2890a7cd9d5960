"""Value targets, the bootstrapping loss and the combined training step.

A transition batch holds, per image, N rendered views and for every view a set
of M candidate actions together with the view each action leads to. In the
default crop mode M = N and action k of view j moves view j onto view k, so the
loss covers all N * N pairs. In lattice mode only the first view of an image is
a loss source and its actions are the oracle's move set; the other views are
its successors and only serve the target computation.
"""
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .adcore import AdamW, no_grad, ops, tau_schedule
from .adcore.params import ema_update
from .geometry import IDENTITY_TOKENS, discretize_action, pairwise_relative, sample_crops
from .models import (ViewEncoding, annotation_embeddings, encode_view, reward_logits_from,
                     value_features, value_logits, value_logits_from)
from .rewards import (DinoState, clip_reward_loss, dino_reward_loss, info_nce, normalize_prototypes,
                      softmax_np)
from .synthdata import render_views

ABLATIONS = ("no_action_tokens", "no_propagation", "no_target_network", "no_annotation_loss")


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.5
    n_views: int = 4
    batch_images: int = 16
    reward_batch: int = 64
    steps: int = 2000
    lr: float = 1e-3
    lr_schedule: str = "cosine"     # cosine | constant
    warmup: int = 100
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    ema_schedule: str = None        # default: constant for clip, cosine otherwise
    tau_start: float = 0.004
    transition_scale: tuple = (0.05, 0.5)
    reward_scale: tuple = (0.05, 0.5)
    value_annotations: str = "vocab"  # clip only: vocab | batch
    mode: str = "crops"             # crops | lattice
    no_action_tokens: bool = False
    no_propagation: bool = False
    no_target_network: bool = False
    no_annotation_loss: bool = False
    seed: int = 0

    def validate(self, variant="clip"):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must satisfy 0 <= gamma < 1, got {self.gamma}")
        if self.n_views < 2:
            raise ValueError("n_views must be >= 2")
        if self.batch_images < 1 or self.reward_batch < 2:
            raise ValueError("batch_images must be >= 1 and reward_batch >= 2")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.mode not in ("crops", "lattice"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.value_annotations not in ("vocab", "batch"):
            raise ValueError(f"unknown value_annotations {self.value_annotations!r}")
        if self.mode == "lattice" and variant != "clip":
            raise ValueError("lattice mode needs the clip variant (annotations must be the vocabulary)")
        tau_schedule(self.ema_kind(variant), 0, self.steps)
        return self

    def ema_kind(self, variant):
        if self.ema_schedule is not None:
            return self.ema_schedule
        return "constant" if variant == "clip" else "cosine"

    def effective_gamma(self):
        return 0.0 if self.no_propagation else self.gamma

    def learning_rate(self, step):
        warm = min(1.0, (step + 1) / self.warmup) if self.warmup > 0 else 1.0
        if self.lr_schedule == "constant":
            return self.lr * warm
        return self.lr * warm * 0.5 * (1.0 + math.cos(math.pi * min(step, self.steps) / self.steps))

    def to_dict(self):
        d = asdict(self)
        d["transition_scale"] = list(self.transition_scale)
        d["reward_scale"] = list(self.reward_scale)
        return d


# ----------------------------------------------------------- transitions

@dataclass
class TransitionBatch:
    views: np.ndarray       # (B, N, R, R, 3)
    boxes: np.ndarray       # (B, N, 4)
    actions: np.ndarray     # (B, N, M, 4) tokens
    successor: np.ndarray   # (B, N, M) view index reached by each action, -1 = not a loss term
    scene_ids: np.ndarray = None

    def __post_init__(self):
        b, n = self.views.shape[:2]
        if self.actions.shape[:2] != (b, n) or self.successor.shape != self.actions.shape[:3]:
            raise ValueError(f"inconsistent transition batch: views {self.views.shape}, "
                             f"actions {self.actions.shape}, successor {self.successor.shape}")

    @property
    def source_rows(self):
        """Flat (b * N + j) indices of views that carry at least one loss term."""
        return np.flatnonzero((self.successor >= 0).any(axis=-1))


def build_transitions(rng, scenes, n_views, resolution, scale_range=(0.05, 0.5),
                      ratio_range=(3 / 4, 4 / 3), box_sampler=None):
    """N random crops per scene and all N * N relative actions between them."""
    if n_views < 2:
        raise ValueError("a transition batch needs at least 2 views per image")
    views, boxes = [], []
    for sc in scenes:
        bx = (sample_crops(rng, n_views, scale_range, ratio_range) if box_sampler is None
              else box_sampler(rng, n_views))
        boxes.append(bx)
        views.append(render_views(sc, bx, resolution))
    boxes = np.stack(boxes)
    actions = discretize_action(pairwise_relative(boxes))
    # the diagonal is exactly (0, 0, 1, 1) but pin it against rounding anyway
    idx = np.arange(n_views)
    actions[:, idx, idx] = IDENTITY_TOKENS
    succ = np.broadcast_to(idx, actions.shape[:3]).copy()
    return TransitionBatch(np.stack(views), boxes, actions, succ,
                           np.array([sc.scene_id for sc in scenes]))


def build_lattice_transitions(rng, mdp, batch, observations):
    """Sample ``batch`` source states of a lattice MDP; each image carries the source
    and its distinct successors under every lattice action.

    ``observations`` is the (S, R, R, 3) array of rendered lattice states.
    """
    n_act = mdp.n_actions
    tokens = mdp.lattice.action_tokens
    states = rng.integers(0, mdp.n_states, size=batch)
    n = n_act
    views = np.empty((batch, n) + observations.shape[1:], observations.dtype)
    succ = np.full((batch, n, n_act), -1, np.int64)
    ids = np.empty((batch, n), np.int64)
    for b, s in enumerate(states):
        order = [s]
        for a in range(n_act):
            t = mdp.next_state[s, a]
            if t not in order:
                order.append(t)
            succ[b, 0, a] = order.index(t)
        order += [s] * (n - len(order))
        ids[b] = order
        views[b] = observations[order]
    boxes = mdp.lattice.windows[ids % mdp.lattice.n_windows]
    actions = np.broadcast_to(tokens, (batch, n, n_act, 4)).copy()
    return TransitionBatch(views, boxes, actions, succ, ids[:, 0])


# ----------------------------------------------------------------- targets

def _sigmoid64(x):
    x = np.asarray(x, np.float64)
    with np.errstate(over="ignore"):
        e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bootstrap_targets(reward_probs, q_logits, gamma, candidate_mask=None):
    """(1 - gamma) * p + gamma * sigmoid(max over candidate actions of the Q logits).

    ``reward_probs`` is (..., L) and ``q_logits`` (..., M, L); masked-out
    candidates never win the max. Returns float64 values in [0, 1].
    """
    q = np.asarray(q_logits, np.float64)
    if candidate_mask is not None:
        q = np.where(np.asarray(candidate_mask, bool)[..., None], q, -np.inf)
    best = np.max(q, axis=-2)
    return (1.0 - gamma) * np.asarray(reward_probs, np.float64) + gamma * _sigmoid64(best)


def compute_targets(cfg, P_target, batch, annotations, gamma, mask_actions=False):
    """(B, N, L) targets from the target network, entirely under stop-gradient."""
    b, n = batch.views.shape[:2]
    m = batch.actions.shape[2]
    with no_grad():
        enc = encode_view(cfg, P_target, batch.views.reshape((b * n,) + batch.views.shape[2:]))
        probs = softmax_np(reward_logits_from(
            P_target, enc.embedding, annotation_embeddings(cfg, P_target, annotations, "reward")).data)
        if gamma == 0.0:
            return probs.reshape(b, n, -1)
        feats = value_features(cfg, P_target, enc.tokens, batch.actions.reshape(b * n, m, 4), mask_actions)
        q = value_logits_from(P_target, feats, annotation_embeddings(cfg, P_target, annotations, "value")).data
    return bootstrap_targets(probs, q, gamma).reshape(b, n, -1)


def value_loss(q_logits, targets, successor=None):
    """Mean BCE between Q logits (B, N, M, L) and the target of the view each action reaches.

    Without ``successor`` action k of view j reaches view k (the full N x N grid).
    Entries whose successor is -1 do not count.
    """
    bsz, n, m, l = q_logits.shape
    targets = np.asarray(targets)
    if targets.ndim != 3 or targets.shape[0] != bsz or targets.shape[2] != l:
        raise ValueError(f"targets shape {targets.shape} does not match logits {q_logits.shape}")
    if successor is None:
        if m != n:
            raise ValueError("without a successor map the action count must equal the view count")
        successor = np.broadcast_to(np.arange(n), (bsz, n, m))
    successor = np.asarray(successor)
    valid = successor >= 0
    gathered = targets[np.arange(bsz)[:, None, None], np.where(valid, successor, 0)]
    gathered = gathered.astype(q_logits.data.dtype)
    if valid.all():
        return ops.bce_with_logits(q_logits, gathered)
    weights = (valid[..., None] * np.ones(l)).astype(q_logits.data.dtype)
    elem = ops.bce_with_logits(q_logits, gathered, reduce="none")
    return ops.scale(ops.sum_(ops.mul(elem, weights)), 1.0 / weights.sum())


# ------------------------------------------------------------- train step

@dataclass
class RewardBatch:
    views: np.ndarray                 # (B_a, R, R, 3)
    ids: np.ndarray = None            # clip annotation ids
    views_b: np.ndarray = None        # second crop (simclr, dino)


@dataclass
class TrainState:
    params: object
    ema: object
    opt: AdamW
    step: int = 0
    dino: DinoState = None
    extra: dict = field(default_factory=dict)


def _decays(name):
    return not (name.endswith((".b", ".g")) or name in ("log_t", "log_t_ab", "b_ab", "pos"))


def init_train_state(cfg, tcfg, params):
    opt = AdamW(lr=tcfg.lr, weight_decay=tcfg.weight_decay, clip_norm=tcfg.clip_norm,
                decay_filter=_decays)
    dino = DinoState(cfg.n_prototypes) if cfg.variant == "dino" else None
    if dino is not None:
        normalize_prototypes(params)
    return TrainState(params, params.copy(), opt, 0, dino)


def _value_annotation_sets(cfg, tcfg, P, P_target, reward_batch, online_enc):
    """Annotation references for the online value head and for the targets."""
    if cfg.variant == "clip":
        ids = np.arange(cfg.vocab_size) if tcfg.value_annotations == "vocab" else reward_batch.ids
        return ids, ids
    if cfg.variant == "simclr":
        a = len(reward_batch.views)
        online = ViewEncoding(None, ops.slice_axis(online_enc.pooled, 0, a, 0),
                              ops.slice_axis(online_enc.embedding, 0, a, 0))
        with no_grad():
            target = encode_view(cfg, P_target, reward_batch.views)
        return online, target
    return None, None


def _reward_loss(cfg, state, P, reward_batch):
    """Returns (loss, online encoding of the reward views or None)."""
    if cfg.variant == "clip":
        return clip_reward_loss(cfg, P, reward_batch.views, reward_batch.ids), None
    if cfg.variant == "simclr":
        a = len(reward_batch.views)
        enc = encode_view(cfg, P, np.concatenate([reward_batch.views, reward_batch.views_b]))
        loss = info_nce(ops.slice_axis(enc.embedding, 0, a, 0), ops.slice_axis(enc.embedding, a, 2 * a, 0),
                        ops.exp(P["log_t"]))
        return loss, enc
    teacher = state.ema.tensors(False)
    return dino_reward_loss(cfg, P, teacher, state.dino, reward_batch.views, reward_batch.views_b), None


def train_step(cfg, tcfg, state, reward_batch, transitions):
    """One optimisation step on reward loss + value loss; mutates ``state``, returns metrics."""
    t0 = time.perf_counter()
    P = state.params.tensors(True)
    P_target = state.params.tensors(False) if tcfg.no_target_network else state.ema.tensors(False)
    gamma = tcfg.effective_gamma()
    mask = tcfg.no_action_tokens

    r_loss, r_enc = _reward_loss(cfg, state, P, reward_batch)
    ann_online, ann_target = _value_annotation_sets(cfg, tcfg, P, P_target, reward_batch, r_enc)
    targets = compute_targets(cfg, P_target, transitions, ann_target, gamma, mask)

    rows = transitions.source_rows
    b, n = transitions.views.shape[:2]
    flat = lambda x: x.reshape((b * n,) + x.shape[2:])[rows][None]
    q = value_logits(cfg, P, flat(transitions.views), flat(transitions.actions), ann_online, mask)
    succ = flat(transitions.successor)[0]
    image_of_row = rows // n
    tgt_flat = targets.reshape(b * n, -1)
    # successor indices are per image; turn them into flat view indices
    succ_flat = np.where(succ >= 0, image_of_row[:, None] * n + succ, -1)
    v_loss = value_loss(q, tgt_flat[None], succ_flat[None])

    total = v_loss if tcfg.no_annotation_loss else ops.add(r_loss, v_loss)
    rl, vl = float(r_loss.data), float(v_loss.data)
    if not (np.isfinite(rl) and np.isfinite(vl)):
        raise NumericError(f"non-finite loss at step {state.step}: reward_loss={rl}, value_loss={vl}, "
                           f"max|value logit|={float(np.max(np.abs(q.data)))}")
    total.backward()
    grads = {name: t.grad for name, t in P.items() if t.grad is not None}
    lr = tcfg.learning_rate(state.step)
    state.opt.step(state.params, grads, lr)
    if state.dino is not None:
        normalize_prototypes(state.params)
    tau = tau_schedule(tcfg.ema_kind(cfg.variant), state.step, tcfg.steps, tcfg.tau_start)
    ema_update(state.ema, state.params, tau)
    state.step += 1
    per = per_sample_value_loss(q.data[0], tgt_flat, succ_flat)
    return {"step": state.step, "reward_loss": rl, "value_loss": vl, "tau": tau, "gamma": gamma,
            "lr": lr, "value_loss_p50": float(np.median(per)), "value_loss_p90": float(np.quantile(per, 0.9)),
            "wall_ms": (time.perf_counter() - t0) * 1e3}


def per_sample_value_loss(q_logits, targets, successor):
    """BCE per (view, action) pair, averaged over annotations; pairs with successor -1 are dropped."""
    x = np.asarray(q_logits, np.float64)
    valid = successor >= 0
    y = targets[np.where(valid, successor, 0)]
    elem = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return elem.mean(axis=-1)[valid]


def value_target_batch(targets, successor):
    """Targets gathered per (view, action): the value each Q logit regresses onto."""
    b = targets.shape[0]
    return targets[np.arange(b)[:, None, None], np.maximum(successor, 0)]


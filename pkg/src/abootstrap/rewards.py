"""Base ("reward") objectives and the reward probability map p(l | x).

Three flavours share the reward-logit head: CLIP-style contrastive matching of
views against discrete annotation ids, SimCLR-style InfoNCE between two crops of
one image, and DINO-style self-distillation onto a prototype set.
"""
from dataclasses import dataclass, field

import numpy as np

from .adcore import Tensor, no_grad, ops
from .models import annotation_embeddings, encode_view, reward_logits, reward_logits_from

MASK_LOGIT = -1e9


class RewardBatchError(ValueError):
    pass


def _need_pairs(n, what):
    if n < 2:
        raise RewardBatchError(f"{what} needs a batch of at least 2, got {n}")


# -------------------------------------------------------------------- CLIP

def symmetric_ce(logits, targets=None):
    """CE over rows plus CE over columns of a (B, B) logit matrix, diagonal pairing.

    ``targets`` optionally gives, per row, the column of its positive; columns
    whose annotation is shared by several rows get a uniform target over them.
    """
    if not isinstance(logits, Tensor):
        logits = Tensor(np.asarray(logits, dtype=np.float64))
    b, u = logits.shape
    rows = np.arange(b) if targets is None else np.asarray(targets, np.int64)
    col_t = np.zeros((u, b), dtype=logits.data.dtype)
    col_t[rows, np.arange(b)] = 1.0
    counts = col_t.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise RewardBatchError("every annotation column needs at least one paired image")
    col_t /= counts
    return ops.add(ops.softmax_cross_entropy(logits, rows, axis=1),
                   ops.softmax_cross_entropy(ops.transpose(logits), col_t, axis=1))


def clip_reward_loss(cfg, P, views, annotation_ids):
    """Symmetric contrastive loss between views and their annotation ids.

    Repeated ids in the batch are merged into one column: the image-to-text
    direction is a CE over the distinct ids, the text-to-image direction puts
    uniform mass on every image carrying that id. With distinct ids this is the
    usual diagonal form.
    """
    ids = np.asarray(annotation_ids, np.int64)
    _need_pairs(len(ids), "clip reward loss")
    uniq, inverse = np.unique(ids, return_inverse=True)
    logits = reward_logits(cfg, P, views, uniq)
    return symmetric_ce(logits, inverse)


def retrieval_accuracy(cfg, P, views, annotation_ids, vocab=None):
    """Fraction of views whose highest-scoring annotation (over ``vocab``) is their own."""
    ids = np.asarray(annotation_ids, np.int64)
    vocab = np.arange(cfg.vocab_size) if vocab is None else np.asarray(vocab)
    with no_grad():
        s = reward_logits(cfg, P, views, vocab).data
    return float(np.mean(vocab[np.argmax(s, axis=1)] == ids))


def sample_annotation_ids(rng, probs):
    """Draw one annotation per row of a (n, L) probability array."""
    probs = np.asarray(probs, np.float64)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((len(probs), 1)) * cdf[:, -1:]
    return np.minimum((u > cdf).sum(axis=1), probs.shape[1] - 1)


# ------------------------------------------------------------------ SimCLR

def info_nce(z_a, z_b, temperature_scale):
    """Symmetric InfoNCE over 2B unit embeddings; each anchor's positive is its partner.

    ``temperature_scale`` multiplies the cosine similarities (it is 1 / temperature).
    """
    b = z_a.shape[0]
    _need_pairs(b, "InfoNCE")
    z = ops.concatenate([z_a, z_b], axis=0)
    sims = ops.matmul(z, ops.transpose(z))
    sims = ops.mul(sims, temperature_scale)
    mask = np.where(np.eye(2 * b, dtype=bool), MASK_LOGIT, 0.0).astype(sims.data.dtype)
    partner = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    return ops.softmax_cross_entropy(ops.add(sims, mask), partner, axis=1)


def simclr_reward_loss(cfg, P, views_a, views_b):
    """InfoNCE between two crops of each image, all other in-batch views negative."""
    _need_pairs(len(views_a), "simclr reward loss")
    enc = encode_view(cfg, P, np.concatenate([views_a, views_b]))
    b = len(views_a)
    z_a = ops.slice_axis(enc.embedding, 0, b, 0)
    z_b = ops.slice_axis(enc.embedding, b, 2 * b, 0)
    return info_nce(z_a, z_b, ops.exp(P["log_t"]))


# -------------------------------------------------------------------- DINO

@dataclass
class DinoState:
    n_prototypes: int
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    momentum: float = 0.9
    center: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.n_prototypes < 2:
            raise RewardBatchError(f"DINO needs at least 2 prototypes, got {self.n_prototypes}")
        if self.center is None:
            self.center = np.zeros(self.n_prototypes)

    def teacher_probs(self, teacher_logits):
        z = (np.asarray(teacher_logits, np.float64) - self.center) / self.tau_teacher
        z -= z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def update_center(self, teacher_logits):
        batch_mean = np.mean(np.concatenate([np.asarray(t, np.float64) for t in teacher_logits]), axis=0)
        self.center = self.momentum * self.center + (1.0 - self.momentum) * batch_mean

    def to_dict(self):
        return {"n_prototypes": self.n_prototypes, "tau_student": self.tau_student,
                "tau_teacher": self.tau_teacher, "momentum": self.momentum}


def dino_loss_from_logits(state, student_logits, teacher_logits, update_center=True):
    """Cross-view distillation loss.

    ``student_logits`` and ``teacher_logits`` are per-view lists of (B, K) prototype
    similarities. The student on view v is matched to the teacher on every other
    view; the loss is averaged over those pairs. The center moves afterwards, from
    teacher outputs only.
    """
    if len(student_logits) != len(teacher_logits) or len(student_logits) < 2:
        raise RewardBatchError("DINO needs matching student and teacher outputs for >= 2 views")
    targets = [state.teacher_probs(t) for t in teacher_logits]
    total, pairs = None, 0
    for v, s in enumerate(student_logits):
        logp = ops.log_softmax(ops.scale(s, 1.0 / state.tau_student), axis=-1)
        for w, t in enumerate(targets):
            if w != v:
                term = ops.mean(ops.sum_(ops.mul(logp, t.astype(logp.data.dtype)), axis=-1))
                total = term if total is None else ops.add(total, term)
                pairs += 1
    loss = ops.scale(total, -1.0 / pairs)
    if update_center:
        state.update_center(teacher_logits)
    return loss


def prototype_similarities(cfg, P, views):
    enc = encode_view(cfg, P, views)
    protos = annotation_embeddings(cfg, P, None, "reward")
    return ops.matmul(enc.embedding, ops.transpose(protos))


def dino_reward_loss(cfg, P, P_teacher, state, views_a, views_b, update_center=True):
    """Self-distillation between two global crops; the teacher is the EMA model."""
    _need_pairs(len(views_a), "dino reward loss")
    if cfg.n_prototypes != state.n_prototypes:
        raise RewardBatchError("DinoState prototype count differs from the model")
    b = len(views_a)
    both = np.concatenate([views_a, views_b])
    sims = prototype_similarities(cfg, P, both)
    with no_grad():
        t = prototype_similarities(cfg, P_teacher, both).data
    student = [ops.slice_axis(sims, 0, b, 0), ops.slice_axis(sims, b, 2 * b, 0)]
    return dino_loss_from_logits(state, student, [t[:b], t[b:]], update_center)


def normalize_prototypes(store):
    w = store["ann.prototypes"]
    store["ann.prototypes"] = (w / np.maximum(np.linalg.norm(w, axis=1, keepdims=True), 1e-12)).astype(w.dtype)


# -------------------------------------------------------------------- p(l|x)

def softmax_np(x, axis=-1):
    x = np.asarray(x, np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def reward_probs(cfg, P, views, annotations):
    """Row softmax of the reward logits over the annotation set, as a numpy array."""
    with no_grad():
        if hasattr(views, "embedding"):
            logits = reward_logits_from(P, views.embedding, annotation_embeddings(cfg, P, annotations, "reward"))
        else:
            logits = reward_logits(cfg, P, views, annotations)
    return softmax_np(logits.data)

"""Toy-scale networks: ViT view encoder, annotation embedders, reward and value heads.

Forward functions are pure: they take a :class:`ModelConfig` and a mapping of
parameter name -> :class:`~abootstrap.adcore.Tensor`, so the online model and the
EMA shadow run through the same code.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from .adcore import ParamStore, Tensor, ops, truncated_normal
from .geometry import N_BINS

VARIANTS = ("clip", "simclr", "dino")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "clip"
    resolution: int = 32
    patch: int = 8
    width: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    embed_dim: int = 64
    decoder_depth: int = 2
    vocab_size: int = 9          # clip: number of discrete annotations
    n_prototypes: int = 32       # dino
    init_log_t: float = math.log(10.0)
    init_log_t_ab: float = math.log(10.0)

    @property
    def n_tokens(self):
        return (self.resolution // self.patch) ** 2

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.resolution % self.patch:
            raise ValueError(f"resolution {self.resolution} not divisible by patch {self.patch}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        for k in ("depth", "decoder_depth", "width", "embed_dim", "heads"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.variant == "clip" and self.vocab_size < 1:
            raise ValueError("clip variant needs vocab_size >= 1")
        if self.variant == "dino" and self.n_prototypes < 2:
            raise ValueError("dino variant needs at least 2 prototypes")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class ViewEncoding:
    tokens: Tensor      # (n, T, d), after the final layer norm
    pooled: Tensor      # (n, d) mean of tokens
    embedding: Tensor   # (n, e) projected and L2-normalised


# ------------------------------------------------------------------ params

def _block_params(store, rng, prefix, d, hidden, cross=False):
    tn = lambda *s: truncated_normal(rng, s)
    store.add(f"{prefix}.ln1.g", np.ones(d, np.float32))
    store.add(f"{prefix}.ln1.b", np.zeros(d, np.float32))
    store.add(f"{prefix}.attn.qkv.w", tn(d, 3 * d))
    store.add(f"{prefix}.attn.qkv.b", np.zeros(3 * d, np.float32))
    store.add(f"{prefix}.attn.out.w", tn(d, d))
    store.add(f"{prefix}.attn.out.b", np.zeros(d, np.float32))
    if cross:
        store.add(f"{prefix}.lnc.g", np.ones(d, np.float32))
        store.add(f"{prefix}.lnc.b", np.zeros(d, np.float32))
        store.add(f"{prefix}.cross.q.w", tn(d, d))
        store.add(f"{prefix}.cross.q.b", np.zeros(d, np.float32))
        store.add(f"{prefix}.cross.kv.w", tn(d, 2 * d))
        store.add(f"{prefix}.cross.kv.b", np.zeros(2 * d, np.float32))
        store.add(f"{prefix}.cross.out.w", tn(d, d))
        store.add(f"{prefix}.cross.out.b", np.zeros(d, np.float32))
    store.add(f"{prefix}.ln2.g", np.ones(d, np.float32))
    store.add(f"{prefix}.ln2.b", np.zeros(d, np.float32))
    store.add(f"{prefix}.mlp.fc1.w", tn(d, hidden))
    store.add(f"{prefix}.mlp.fc1.b", np.zeros(hidden, np.float32))
    store.add(f"{prefix}.mlp.fc2.w", tn(hidden, d))
    store.add(f"{prefix}.mlp.fc2.b", np.zeros(d, np.float32))


def init_params(cfg, seed):
    """Truncated-normal(0.02) weights, zero biases, unit layer-norm gains."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    tn = lambda *s: truncated_normal(rng, s)
    d, e, p = cfg.width, cfg.embed_dim, cfg.patch
    hidden = d * cfg.mlp_ratio
    s = ParamStore()
    s.add("patch.w", tn(p * p * 3, d))
    s.add("patch.b", np.zeros(d, np.float32))
    s.add("pos", tn(cfg.n_tokens, d))
    for i in range(cfg.depth):
        _block_params(s, rng, f"enc.{i}", d, hidden)
    s.add("enc.ln.g", np.ones(d, np.float32))
    s.add("enc.ln.b", np.zeros(d, np.float32))
    s.add("proj.w", tn(d, e))
    s.add("log_t", np.array(cfg.init_log_t, np.float32))

    if cfg.variant == "clip":
        s.add("ann.table", tn(cfg.vocab_size, d))
        s.add("ann.reward.w", tn(d, e))
        s.add("ann.value.w", tn(d, e))
    elif cfg.variant == "simclr":
        s.add("ann.value.w", tn(d, e))
    else:
        s.add("ann.prototypes", tn(cfg.n_prototypes, e))
        s.add("ann.value.w", tn(e, e))

    for c in range(4):
        s.add(f"act.embed.{c}", tn(N_BINS, d))
    s.add("act.mask", tn(1, d))
    for i in range(cfg.decoder_depth):
        _block_params(s, rng, f"dec.{i}", d, hidden, cross=True)
    s.add("dec.ln.g", np.ones(d, np.float32))
    s.add("dec.ln.b", np.zeros(d, np.float32))
    s.add("value.w", tn(d, e))
    s.add("log_t_ab", np.array(cfg.init_log_t_ab, np.float32))
    s.add("b_ab", np.zeros((), np.float32))
    return s


def backbone_names(store):
    return [n for n in store.names() if n.startswith(("patch.", "pos", "enc."))]


# ------------------------------------------------------------------ layers

def _split_heads(x, heads):
    b, t, d = x.shape
    return ops.transpose(ops.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, t, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _self_attention(P, prefix, x, heads):
    d = x.shape[-1]
    qkv = ops.linear(x, P[f"{prefix}.qkv.w"], P[f"{prefix}.qkv.b"])
    q = _split_heads(ops.slice_axis(qkv, 0, d, 2), heads)
    k = _split_heads(ops.slice_axis(qkv, d, 2 * d, 2), heads)
    v = _split_heads(ops.slice_axis(qkv, 2 * d, 3 * d, 2), heads)
    out = _merge_heads(ops.attention(q, k, v))
    return ops.linear(out, P[f"{prefix}.out.w"], P[f"{prefix}.out.b"])


def _cross_attention(P, prefix, x, memory, heads):
    d = x.shape[-1]
    q = _split_heads(ops.linear(x, P[f"{prefix}.q.w"], P[f"{prefix}.q.b"]), heads)
    kv = ops.linear(memory, P[f"{prefix}.kv.w"], P[f"{prefix}.kv.b"])
    k = _split_heads(ops.slice_axis(kv, 0, d, 2), heads)
    v = _split_heads(ops.slice_axis(kv, d, 2 * d, 2), heads)
    out = _merge_heads(ops.attention(q, k, v))
    return ops.linear(out, P[f"{prefix}.out.w"], P[f"{prefix}.out.b"])


def _mlp(P, prefix, x):
    h = ops.gelu(ops.linear(x, P[f"{prefix}.fc1.w"], P[f"{prefix}.fc1.b"]))
    return ops.linear(h, P[f"{prefix}.fc2.w"], P[f"{prefix}.fc2.b"])


def _ln(P, prefix, x):
    return ops.layer_norm(x, P[f"{prefix}.g"], P[f"{prefix}.b"])


# ----------------------------------------------------------------- encoder

def patchify(views, patch):
    v = np.asarray(views, dtype=np.float32)
    n, r, _, c = v.shape
    g = r // patch
    v = v.reshape(n, g, patch, g, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return v.reshape(n, g * g, patch * patch * c)


def encode_view(cfg, P, views):
    """views (n, R, R, 3) -> ViewEncoding."""
    views = np.asarray(views)
    if views.ndim != 4 or views.shape[1:3] != (cfg.resolution, cfg.resolution):
        raise ValueError(f"expected views of shape (n, {cfg.resolution}, {cfg.resolution}, 3), "
                         f"got {views.shape}")
    x = ops.linear(Tensor(patchify(views, cfg.patch)), P["patch.w"], P["patch.b"])
    x = ops.add(x, P["pos"])
    for i in range(cfg.depth):
        x = ops.add(x, _self_attention(P, f"enc.{i}.attn", _ln(P, f"enc.{i}.ln1", x), cfg.heads))
        x = ops.add(x, _mlp(P, f"enc.{i}.mlp", _ln(P, f"enc.{i}.ln2", x)))
    tokens = _ln(P, "enc.ln", x)
    pooled = ops.mean(tokens, axis=1)
    emb = ops.l2_normalize(ops.matmul(pooled, P["proj.w"]))
    return ViewEncoding(tokens, pooled, emb)


# ------------------------------------------------------------- annotations

def annotation_embeddings(cfg, P, annotations, head="reward"):
    """Unit-norm annotation embeddings (L, e) for the reward or value head.

    ``annotations`` is an id array (clip), a (L, R, R, 3) view array or a
    :class:`ViewEncoding` (simclr), or prototype indices (dino, default all).
    """
    if cfg.variant == "clip":
        ids = np.asarray(annotations, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("empty annotation batch")
        base = ops.gather_rows(P["ann.table"], ids)
        w = P["ann.reward.w"] if head == "reward" else P["ann.value.w"]
        return ops.l2_normalize(ops.matmul(base, w))
    if cfg.variant == "simclr":
        enc = annotations if isinstance(annotations, ViewEncoding) else encode_view(cfg, P, annotations)
        if enc.pooled.shape[0] == 0:
            raise ValueError("empty annotation batch")
        if head == "reward":
            return enc.embedding
        return ops.l2_normalize(ops.matmul(enc.pooled, P["ann.value.w"]))
    idx = np.arange(cfg.n_prototypes) if annotations is None else np.asarray(annotations, np.int64)
    if idx.size == 0:
        raise ValueError("empty annotation batch")
    protos = ops.gather_rows(P["ann.prototypes"], idx)
    if head == "reward":
        return ops.l2_normalize(protos)
    return ops.l2_normalize(ops.matmul(protos, P["ann.value.w"]))


def reward_logits_from(P, view_emb, ann_emb):
    """t * phi(x)^T psi(l) with t = exp(log_t); (n, e) x (L, e) -> (n, L)."""
    sims = ops.matmul(view_emb, ops.transpose(ann_emb))
    return ops.mul(sims, ops.exp(P["log_t"]))


def reward_logits(cfg, P, views, annotations):
    enc = views if isinstance(views, ViewEncoding) else encode_view(cfg, P, views)
    return reward_logits_from(P, enc.embedding, annotation_embeddings(cfg, P, annotations, "reward"))


# ------------------------------------------------------------ value decoder

def embed_actions(P, tokens, mask_actions=False):
    """Action tokens (n, M, 4) -> embeddings (n, M, 4, d)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= N_BINS):
        raise IndexError(f"action token outside vocabulary [0, {N_BINS})")
    if mask_actions:
        return ops.gather_rows(P["act.mask"], np.zeros(tokens.shape, np.int64))
    parts = [ops.reshape(ops.gather_rows(P[f"act.embed.{c}"], tokens[..., c]), tokens.shape[:2] + (1, -1))
             for c in range(4)]
    return ops.concatenate(parts, axis=2)


def value_features(cfg, P, tokens, actions, mask_actions=False):
    """phi_AB(x, a): (n, T, d) backbone tokens, (n, M, 4) actions -> (n, M, e) unit vectors.

    Backbone tokens are shared by the M actions of a view: the 4*M action tokens
    of one view are packed into a single cross-attention query sequence.
    """
    n, m = actions.shape[:2]
    d = cfg.width
    h = ops.reshape(embed_actions(P, actions, mask_actions), (n * m, 4, d))
    for i in range(cfg.decoder_depth):
        pre = f"dec.{i}"
        h = ops.add(h, _self_attention(P, f"{pre}.attn", _ln(P, f"{pre}.ln1", h), cfg.heads))
        packed = ops.reshape(_ln(P, f"{pre}.lnc", h), (n, m * 4, d))
        cross = _cross_attention(P, f"{pre}.cross", packed, tokens, cfg.heads)
        h = ops.add(h, ops.reshape(cross, (n * m, 4, d)))
        h = ops.add(h, _mlp(P, f"{pre}.mlp", _ln(P, f"{pre}.ln2", h)))
    pooled = _ln(P, "dec.ln", ops.mean(h, axis=1))
    feats = ops.l2_normalize(ops.matmul(pooled, P["value.w"]))
    return ops.reshape(feats, (n, m, -1))


def value_logits_from(P, feats, ann_value_emb):
    """t_AB * phi_AB^T psi_AB + b_AB: (n, M, e) x (L, e) -> (n, M, L)."""
    sims = ops.matmul(feats, ops.transpose(ann_value_emb))
    return ops.add(ops.mul(sims, ops.exp(P["log_t_ab"])), P["b_ab"])


def value_logits(cfg, P, views, actions, annotations, mask_actions=False):
    """Q logits of shape (B, N, M, L) for views (B, N, R, R, 3) and actions (B, N, M, 4)."""
    views = np.asarray(views)
    actions = np.asarray(actions)
    b, n = views.shape[:2]
    enc = encode_view(cfg, P, views.reshape((b * n,) + views.shape[2:]))
    feats = value_features(cfg, P, enc.tokens, actions.reshape((b * n,) + actions.shape[2:]), mask_actions)
    logits = value_logits_from(P, feats, annotation_embeddings(cfg, P, annotations, "value"))
    return ops.reshape(logits, (b, n, actions.shape[2], -1))


class QModel:
    """Config plus parameters; a thin convenience wrapper over the pure functions."""

    def __init__(self, cfg, params=None, seed=0):
        self.cfg = cfg.validate()
        self.params = init_params(cfg, seed) if params is None else params

    def tensors(self, requires_grad=False):
        return self.params.tensors(requires_grad)

    def encode(self, views, P=None):
        return encode_view(self.cfg, P or self.tensors(), views)

    def reward_logits(self, views, annotations, P=None):
        return reward_logits(self.cfg, P or self.tensors(), views, annotations)

    def value_logits(self, views, actions, annotations, mask_actions=False, P=None):
        return value_logits(self.cfg, P or self.tensors(), views, actions, annotations, mask_actions)

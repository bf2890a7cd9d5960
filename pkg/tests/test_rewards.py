import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abootstrap import models, rewards
from abootstrap.adcore import Tensor, ops
from abootstrap.models import ModelConfig

TINY = dict(resolution=16, patch=8, width=16, depth=1, heads=2, embed_dim=8, decoder_depth=1, vocab_size=6)


def _t(x):
    return Tensor(np.asarray(x, np.float64))


def _hand_symmetric(logits):
    """CE over rows plus CE over columns, written out with scalar loops."""
    n = len(logits)
    rows = cols = 0.0
    for i in range(n):
        rows += -logits[i][i] + math.log(sum(math.exp(v) for v in logits[i]))
        cols += -logits[i][i] + math.log(sum(math.exp(logits[r][i]) for r in range(n)))
    return rows / n + cols / n


def test_uniform_logits_two():
    assert float(rewards.symmetric_ce(np.zeros((2, 2))).data) == pytest.approx(2 * math.log(2), abs=1e-12)


@pytest.mark.parametrize("b", [2, 5, 16])
def test_uniform_logits_each_direction(b):
    logits = _t(np.full((b, b), 0.3))
    row = float(ops.softmax_cross_entropy(logits, np.arange(b), axis=1).data)
    assert abs(row - math.log(b)) <= 1e-9
    assert abs(float(rewards.symmetric_ce(logits).data) - 2 * math.log(b)) <= 1e-9


def test_three_by_three_hand_case():
    logits = [[2.0, 0.5, -1.0], [0.1, 1.5, 0.3], [-0.4, 0.8, 0.9]]
    assert float(rewards.symmetric_ce(logits).data) == pytest.approx(_hand_symmetric(logits), abs=1e-12)


def test_matched_pairs_large_temperature():
    assert float(rewards.symmetric_ce(60.0 * np.eye(4)).data) < 1e-12


def test_repeated_ids_share_a_column():
    # rows 0 and 1 carry annotation 0, row 2 carries annotation 1
    logits = np.array([[1.0, -0.5], [0.2, 0.4], [-1.0, 2.0]])
    got = float(rewards.symmetric_ce(logits, [0, 0, 1]).data)
    lse_row = [math.log(sum(math.exp(v) for v in r)) for r in logits]
    rows = np.mean([lse_row[0] - 1.0, lse_row[1] - 0.2, lse_row[2] - 2.0])
    lse_c0 = math.log(sum(math.exp(logits[r, 0]) for r in range(3)))
    lse_c1 = math.log(sum(math.exp(logits[r, 1]) for r in range(3)))
    col0 = 0.5 * (lse_c0 - 1.0) + 0.5 * (lse_c0 - 0.2)
    col1 = lse_c1 - 2.0
    assert got == pytest.approx(rows + (col0 + col1) / 2, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-5, 5))
def test_symmetric_ce_permutation_and_shift(seed, c):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(5, 5))
    perm = rng.permutation(5)
    base = float(rewards.symmetric_ce(logits).data)
    assert float(rewards.symmetric_ce(logits[perm][:, perm]).data) == pytest.approx(base, abs=1e-10)
    # adding the same constant everywhere shifts every softmax row and column alike
    assert float(rewards.symmetric_ce(logits + c).data) == pytest.approx(base, abs=1e-10)


def test_clip_loss_identical_embeddings():
    cfg = ModelConfig(**TINY)
    p = models.init_params(cfg, 0)
    p["ann.table"] = np.tile(p["ann.table"][:1], (6, 1))
    views = np.full((2, 16, 16, 3), 0.5, np.float32)
    loss = rewards.clip_reward_loss(cfg, p.tensors(False), views, [0, 3])
    assert float(loss.data) == pytest.approx(2 * math.log(2), abs=1e-5)


def test_clip_needs_two():
    cfg = ModelConfig(**TINY)
    with pytest.raises(rewards.RewardBatchError):
        rewards.clip_reward_loss(cfg, models.init_params(cfg, 0).tensors(False), np.zeros((1, 16, 16, 3)), [0])


# ------------------------------------------------------------------ simclr

def _unit(rng, n, d=6):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


@pytest.mark.parametrize("b", [2, 3, 8])
def test_info_nce_identical_embeddings(b):
    z = np.tile(_unit(np.random.default_rng(0), 1), (b, 1))
    loss = float(rewards.info_nce(_t(z), _t(z), 10.0).data)
    assert loss == pytest.approx(math.log(2 * b - 1), abs=1e-9)


def test_info_nce_two_pair_hand_case():
    rng = np.random.default_rng(1)
    za, zb = _unit(rng, 2), _unit(rng, 2)
    t = 3.0
    z = np.concatenate([za, zb])
    partner = [2, 3, 0, 1]
    total = 0.0
    for i in range(4):
        others = [j for j in range(4) if j != i]
        denom = sum(math.exp(t * z[i] @ z[j]) for j in others)
        total += -(t * z[i] @ z[partner[i]]) + math.log(denom)
    assert float(rewards.info_nce(_t(za), _t(zb), t).data) == pytest.approx(total / 4, abs=1e-9)


def test_info_nce_aligned_orthogonal_limit():
    z = np.eye(4)
    assert float(rewards.info_nce(_t(z), _t(z), 80.0).data) < 1e-20


def test_simclr_loss_runs_and_needs_two():
    cfg = ModelConfig(**{**TINY, "variant": "simclr"})
    P = models.init_params(cfg, 0).tensors(True)
    rng = np.random.default_rng(2)
    v = rng.random((3, 16, 16, 3)).astype(np.float32)
    loss = rewards.simclr_reward_loss(cfg, P, v, v[::-1].copy())
    loss.backward()
    assert np.isfinite(float(loss.data)) and np.any(P["patch.w"].grad != 0)
    with pytest.raises(rewards.RewardBatchError):
        rewards.simclr_reward_loss(cfg, P, v[:1], v[:1])


# -------------------------------------------------------------------- dino

def test_dino_uniform_teacher_uniform_student():
    state = rewards.DinoState(4)
    s = [_t(np.zeros((3, 4))), _t(np.zeros((3, 4)))]
    loss = rewards.dino_loss_from_logits(state, s, [np.zeros((3, 4))] * 2)
    assert float(loss.data) == pytest.approx(math.log(4), abs=1e-12)


def test_dino_two_prototype_hand_case():
    state = rewards.DinoState(2, tau_student=0.5, tau_teacher=0.25)
    state.center = np.array([0.1, -0.1])
    s_a, s_b = np.array([[0.3, -0.2]]), np.array([[-0.6, 0.4]])
    t_a, t_b = np.array([[0.5, 0.1]]), np.array([[0.0, 0.2]])

    def tprob(t):
        z = (t[0] - state.center) / 0.25
        e = np.exp(z - z.max())
        return e / e.sum()

    def logp(s):
        z = s[0] / 0.5
        return z - math.log(np.exp(z).sum())

    want = 0.5 * (-(tprob(t_b) @ logp(s_a)) - (tprob(t_a) @ logp(s_b)))
    got = rewards.dino_loss_from_logits(state, [_t(s_a), _t(s_b)], [t_a, t_b])
    assert float(got.data) == pytest.approx(want, abs=1e-12)
    np.testing.assert_allclose(state.center, 0.9 * np.array([0.1, -0.1]) + 0.1 * np.array([0.25, 0.15]))


def test_dino_sharp_teacher_is_one_hot():
    state = rewards.DinoState(3, tau_teacher=1e-4)
    p = state.teacher_probs(np.array([[0.2, 0.5, 0.1]]))
    np.testing.assert_allclose(p, [[0, 1, 0]], atol=1e-12)


def test_dino_center_converges_geometrically():
    state = rewards.DinoState(3)
    fixed = [np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])] * 2
    mean = np.array([2.0, 2.0, 2.0])
    for k in range(1, 30):
        state.update_center(fixed)
        np.testing.assert_allclose(np.abs(state.center - mean), 0.9 ** k * 2.0, rtol=1e-9)


def test_dino_needs_two_prototypes():
    with pytest.raises(rewards.RewardBatchError):
        rewards.DinoState(1)


def test_dino_reward_loss_leaves_teacher_alone():
    cfg = ModelConfig(**{**TINY, "variant": "dino", "n_prototypes": 5})
    store = models.init_params(cfg, 0)
    rewards.normalize_prototypes(store)
    np.testing.assert_allclose(np.linalg.norm(store["ann.prototypes"], axis=1), 1.0, atol=1e-6)
    P, T = store.tensors(True), store.tensors(True)
    state = rewards.DinoState(5)
    v = np.random.default_rng(3).random((2, 16, 16, 3)).astype(np.float32)
    loss = rewards.dino_reward_loss(cfg, P, T, state, v, v[::-1].copy())
    loss.backward()
    assert all(t.grad is None for t in T.values())
    assert np.any(P["ann.prototypes"].grad != 0)
    assert np.any(state.center != 0)


# ------------------------------------------------------------ reward probs

def test_reward_probs_examples():
    cfg = ModelConfig(**TINY)
    p = models.init_params(cfg, 0)
    v = np.random.default_rng(4).random((3, 16, 16, 3)).astype(np.float32)
    one = rewards.reward_probs(cfg, p.tensors(False), v, [2])
    np.testing.assert_array_equal(one, 1.0)
    probs = rewards.reward_probs(cfg, p.tensors(False), v, np.arange(6))
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-12)
    p["ann.table"] = np.tile(p["ann.table"][:1], (6, 1))
    flat = rewards.reward_probs(cfg, p.tensors(False), v, np.arange(5))
    np.testing.assert_allclose(flat, 0.2, atol=1e-7)


def test_softmax_dominance():
    p = rewards.softmax_np([10.0, -10.0, -10.0])
    assert p[0] == pytest.approx(math.exp(20) / (math.exp(20) + 2))


def test_sample_annotation_ids_frequencies():
    rng = np.random.default_rng(5)
    probs = np.tile([0.1, 0.6, 0.3], (20_000, 1))
    ids = rewards.sample_annotation_ids(rng, probs)
    np.testing.assert_allclose(np.bincount(ids, minlength=3) / 20_000, [0.1, 0.6, 0.3], atol=0.015)
    assert np.all(rewards.sample_annotation_ids(rng, np.eye(4)) == np.arange(4))

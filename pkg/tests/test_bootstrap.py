import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abootstrap import bootstrap as bs, models, oracle
from abootstrap.adcore import ops
from abootstrap.bootstrap import RewardBatch, TrainConfig
from abootstrap.geometry import IDENTITY_TOKENS
from abootstrap.models import ModelConfig
from abootstrap.synthdata import SceneConfig, generate_scenes, render_views

TINY = dict(resolution=16, patch=8, width=16, depth=1, heads=2, embed_dim=8, decoder_depth=1, vocab_size=4)


@pytest.fixture(scope="module")
def scenes():
    return generate_scenes(0, 4, SceneConfig(grid=4, vocab=3, cell_px=4))


@pytest.fixture(scope="module")
def mdp(scenes):
    return oracle.lattice_mdp(scenes[:2], 0.5)


def _logit(p):
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


# ------------------------------------------------------------- transitions

def test_two_views_four_actions(scenes):
    tb = bs.build_transitions(np.random.default_rng(0), scenes[:3], 2, 16)
    assert tb.actions.shape == (3, 2, 2, 4) and tb.views.shape == (3, 2, 16, 16, 3)
    ident = np.all(tb.actions == IDENTITY_TOKENS, axis=-1)
    assert ident.sum(axis=(1, 2)).tolist() == [2, 2, 2]
    assert np.all(ident[:, [0, 1], [0, 1]])
    assert np.array_equal(tb.successor[0], [[0, 1], [0, 1]])


def test_transitions_replay(scenes):
    a = bs.build_transitions(np.random.default_rng(5), scenes, 4, 16)
    b = bs.build_transitions(np.random.default_rng(5), scenes, 4, 16)
    assert a.views.tobytes() == b.views.tobytes() and np.array_equal(a.actions, b.actions)


def test_transitions_need_two_views(scenes):
    with pytest.raises(ValueError):
        bs.build_transitions(np.random.default_rng(0), scenes, 1, 16)


def test_lattice_transitions_follow_the_mdp(mdp):
    obs = np.concatenate([render_views(sc, mdp.lattice.windows, 16) for sc in mdp.lattice.scenes])
    tb = bs.build_lattice_transitions(np.random.default_rng(1), mdp, 6, obs)
    assert tb.actions.shape == (6, mdp.n_actions, mdp.n_actions, 4)
    for b in range(6):
        s = tb.scene_ids[b]
        assert np.array_equal(tb.views[b, 0], obs[s])
        for a in range(mdp.n_actions):
            assert np.array_equal(tb.views[b, tb.successor[b, 0, a]], obs[mdp.next_state[s, a]])
        assert np.all(tb.successor[b, 1:] == -1)
    assert np.array_equal(tb.source_rows, np.arange(6) * mdp.n_actions)


# ---------------------------------------------------------------- targets

def test_targets_without_discount_are_the_reward():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(5), size=(2, 3))
    assert np.array_equal(bs.bootstrap_targets(p, rng.normal(size=(2, 3, 4, 5)), 0.0), p)


def test_targets_saturate():
    assert bs.bootstrap_targets(np.array([1.0]), np.array([[np.inf]]), 0.5)[0] == 1.0


def test_targets_hand_case():
    # one image, N = 2 views, L = 2 annotations
    p = np.array([[0.7, 0.3], [0.2, 0.8]])
    q = np.array([[[0.0, 1.0], [2.0, -1.0]], [[-3.0, 0.5], [1.0, 0.25]]])
    sig = lambda x: 1 / (1 + math.exp(-x))
    want = [[0.5 * 0.7 + 0.5 * sig(2.0), 0.5 * 0.3 + 0.5 * sig(1.0)],
            [0.5 * 0.2 + 0.5 * sig(1.0), 0.5 * 0.8 + 0.5 * sig(0.5)]]
    np.testing.assert_allclose(bs.bootstrap_targets(p, q, 0.5), want, atol=1e-15)


def test_candidate_mask_excludes_actions():
    p = np.array([0.5])
    q = np.array([[5.0], [-5.0]])
    got = bs.bootstrap_targets(p, q, 0.5, candidate_mask=[False, True])
    assert got[0] == pytest.approx(0.25 + 0.5 / (1 + math.exp(5)))


def test_targets_reproduce_fixed_point(mdp):
    q_star, _ = oracle.value_iteration(mdp, 0.5, tol=1e-14)
    t = bs.bootstrap_targets(mdp.annotation_probs, _logit(q_star), 0.5)
    # the target at a state is the value of every action leading into it
    err = np.abs(t[mdp.next_state] - q_star)
    assert err.max() <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.0, 0.25, 0.5, 0.9]), st.floats(0.1, 8.0))
def test_target_operator_contracts(seed, gamma, spread):
    rng = np.random.default_rng(seed)
    nxt = rng.integers(0, 12, size=(12, 3))
    p = rng.dirichlet(np.ones(4), size=12)
    z1, z2 = rng.normal(scale=spread, size=(2, 12, 3, 4))
    t1 = bs.bootstrap_targets(p, z1, gamma)[nxt]
    t2 = bs.bootstrap_targets(p, z2, gamma)[nxt]
    assert np.all((t1 >= 0) & (t1 <= 1))
    sig = lambda z: 1 / (1 + np.exp(-z))
    assert np.max(np.abs(t1 - t2)) <= gamma * np.max(np.abs(sig(z1) - sig(z2))) + 1e-15


# ------------------------------------------------------------- value loss

def test_value_loss_at_its_minimum():
    rng = np.random.default_rng(2)
    t = rng.uniform(0.05, 0.95, size=(2, 3, 4))
    logits = ops.Tensor(np.broadcast_to(_logit(t)[:, None], (2, 3, 3, 4)).copy(), requires_grad=True)
    loss = bs.value_loss(logits, t)
    entropy = -np.mean(t * np.log(t) + (1 - t) * np.log(1 - t))
    assert float(loss.data) == pytest.approx(entropy, abs=1e-12)
    loss.backward()
    assert np.max(np.abs(logits.grad)) <= 1e-12


def test_value_loss_diverges():
    vals = [float(bs.value_loss(ops.Tensor(np.full((1, 2, 2, 1), -z)), np.ones((1, 2, 1))).data)
            for z in (1.0, 10.0, 100.0)]
    assert vals[0] < vals[1] < vals[2] and vals[2] > 99


def test_value_loss_hand_case():
    # B=1, N=2, one annotation; logit (i, j) regresses onto target j
    z = np.array([[[[0.3], [-1.2]], [[2.0], [0.1]]]])
    t = np.array([[[0.25], [0.6]]])
    terms = []
    for i in range(2):
        for j in range(2):
            x, y = z[0, i, j, 0], t[0, j, 0]
            terms.append(-(y * math.log(1 / (1 + math.exp(-x))) + (1 - y) * math.log(1 / (1 + math.exp(x)))))
    assert float(bs.value_loss(ops.Tensor(z), t).data) == pytest.approx(np.mean(terms), abs=1e-12)


def test_value_loss_shape_errors():
    with pytest.raises(ValueError):
        bs.value_loss(ops.Tensor(np.zeros((1, 2, 2, 3))), np.zeros((1, 2, 4)))
    with pytest.raises(ValueError):
        bs.value_loss(ops.Tensor(np.zeros((1, 2, 3, 3))), np.zeros((1, 2, 3)))


def test_masked_successors_do_not_count():
    z = ops.Tensor(np.array([[[[0.0], [5.0]]]]), requires_grad=True)
    loss = bs.value_loss(z, np.array([[[1.0], [0.0]]]), successor=np.array([[[0, -1]]]))
    assert float(loss.data) == pytest.approx(math.log(2))
    loss.backward()
    assert z.grad[0, 0, 1, 0] == 0


# -------------------------------------------------------------- train step

def _setup(variant="clip", **flags):
    cfg = ModelConfig(**{**TINY, "variant": variant, "n_prototypes": 4})
    tcfg = TrainConfig(steps=10, warmup=0, **flags).validate(variant)
    state = bs.init_train_state(cfg, tcfg, models.init_params(cfg, 0))
    return cfg, tcfg, state


def _batches(scenes, variant="clip", seed=0):
    rng = np.random.default_rng(seed)
    tb = bs.build_transitions(rng, scenes[:2], 3, 16)
    views = rng.random((4, 16, 16, 3)).astype(np.float32)
    if variant == "clip":
        return RewardBatch(views, np.array([0, 1, 1, 3])), tb
    return RewardBatch(views, None, views[::-1].copy()), tb


def test_target_network_gets_no_gradient(scenes):
    cfg, tcfg, state = _setup()
    rb, tb = _batches(scenes)
    P = state.params.tensors(True)
    E = state.ema.tensors(True)
    targets = bs.compute_targets(cfg, E, tb, np.arange(4), 0.5)
    assert np.all((targets >= 0) & (targets <= 1))
    q = models.value_logits(cfg, P, tb.views, tb.actions, np.arange(4))
    ops.add(bs.value_loss(q, targets), ops.scale(ops.sum_(q), 0.0)).backward()
    assert all(t.grad is None for t in E.values())
    assert np.any(P["patch.w"].grad != 0)


@pytest.mark.parametrize("variant", ["clip", "simclr", "dino"])
def test_train_step_is_deterministic(scenes, variant):
    runs = []
    for _ in range(2):
        cfg, tcfg, state = _setup(variant)
        for s in range(2):
            rb, tb = _batches(scenes, variant, seed=s)
            m = bs.train_step(cfg, tcfg, state, rb, tb)
        runs.append(state)
    a, b = runs
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params.names())
    assert all(np.array_equal(a.ema[n], b.ema[n]) for n in a.ema.names())
    assert m["step"] == 2 and set(m) >= {"reward_loss", "value_loss", "tau", "gamma", "lr", "wall_ms"}


def test_zero_tau_freezes_the_target(scenes):
    cfg, tcfg, state = _setup(ema_schedule="zero")
    init = state.ema.copy()
    for s in range(2):
        bs.train_step(cfg, tcfg, state, *_batches(scenes, seed=s))
    assert all(np.array_equal(init[n], state.ema[n]) for n in init.names())
    assert not np.array_equal(init["patch.w"], state.params["patch.w"])


def test_no_annotation_loss_keeps_reward_head(scenes):
    cfg, tcfg, state = _setup(no_annotation_loss=True)
    before = state.params.copy()
    bs.train_step(cfg, tcfg, state, *_batches(scenes))
    for name in ("ann.reward.w", "log_t"):
        assert np.array_equal(before[name], state.params[name])
    assert not np.array_equal(before["value.w"], state.params["value.w"])


def test_no_propagation_targets_are_rewards(scenes):
    cfg, tcfg, state = _setup(no_propagation=True)
    assert tcfg.effective_gamma() == 0.0
    _, tb = _batches(scenes)
    E = state.ema.tensors(False)
    t = bs.compute_targets(cfg, E, tb, np.arange(4), tcfg.effective_gamma())
    from abootstrap.rewards import reward_probs
    p = reward_probs(cfg, E, tb.views.reshape(-1, 16, 16, 3), np.arange(4)).reshape(t.shape)
    np.testing.assert_allclose(t, p, atol=1e-12)


def test_no_target_network_uses_online_weights(scenes):
    cfg, tcfg, state = _setup(no_target_network=True)
    state.ema["b_ab"] = np.array(np.nan, np.float32)  # poisons targets if the shadow were used
    m = bs.train_step(cfg, tcfg, state, *_batches(scenes))
    assert np.isfinite(m["value_loss"])


def test_non_finite_loss_reports_diagnostics(scenes):
    cfg, tcfg, state = _setup()
    state.params["b_ab"] = np.array(np.nan, np.float32)
    with pytest.raises(bs.NumericError, match="step 0.*value_loss"):
        bs.train_step(cfg, tcfg, state, *_batches(scenes))


def test_lattice_train_step(mdp):
    cfg = ModelConfig(**TINY)
    tcfg = TrainConfig(steps=5, mode="lattice").validate("clip")
    state = bs.init_train_state(cfg, tcfg, models.init_params(cfg, 0))
    obs = np.concatenate([render_views(sc, mdp.lattice.windows, 16) for sc in mdp.lattice.scenes])
    rng = np.random.default_rng(0)
    tb = bs.build_lattice_transitions(rng, mdp, 2, obs)
    rb = RewardBatch(obs[:4], np.array([0, 1, 2, 3]))
    m = bs.train_step(cfg, tcfg, state, rb, tb)
    assert np.isfinite(m["value_loss"])


@pytest.mark.parametrize("bad", [dict(gamma=1.0), dict(n_views=1), dict(mode="grid"), dict(lr_schedule="step"),
                                 dict(ema_schedule="linear")])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad).validate()


def test_learning_rate_schedule():
    t = TrainConfig(lr=1.0, warmup=10, steps=100)
    assert t.learning_rate(0) == pytest.approx(0.1 * 0.5 * (1 + math.cos(0)))
    assert t.learning_rate(100) == pytest.approx(0.0, abs=1e-12)
    assert TrainConfig(lr=2.0, warmup=0, lr_schedule="constant").learning_rate(57) == 2.0


def test_per_sample_value_loss_matches_mean():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(5, 3, 4))
    t = rng.random((6, 4))
    succ = rng.integers(-1, 6, size=(5, 3))
    per = bs.per_sample_value_loss(q, t, succ)
    ref = bs.value_loss(ops.Tensor(q[None]), t[None], succ[None])
    assert len(per) == (succ >= 0).sum()
    assert per.mean() == pytest.approx(float(ref.data), rel=1e-12)

"""Exact finite mirror of the crop environment.

States are (scene, window) pairs on a fixed window lattice; actions are relative
window moves; a move that leaves the lattice is a self-loop. Rewards are
``(1 - gamma) * p(l | window)``. Value iteration gives Q*, the ground truth for
the tabular TD learner and for the neural value head.
"""
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import apply_action, discretize_action
from .synthdata import annotation_dists, render_views

# relative moves: stay, half-window pans, quadrant and centre zoom-in, 2x zoom-out
LATTICE_ACTIONS = np.array([
    (0.0, 0.0, 1.0, 1.0),
    (-0.5, 0.0, 0.5, 1.0), (0.5, 0.0, 1.5, 1.0),
    (0.0, -0.5, 1.0, 0.5), (0.0, 0.5, 1.0, 1.5),
    (0.0, 0.0, 0.5, 0.5), (0.0, 0.5, 0.5, 1.0),
    (0.5, 0.0, 1.0, 0.5), (0.5, 0.5, 1.0, 1.0),
    (0.25, 0.25, 0.75, 0.75),
    (-0.5, -0.5, 1.5, 1.5),
])
ACTION_NAMES = ("stay", "up", "down", "left", "right", "zoom_tl", "zoom_tr", "zoom_bl", "zoom_br",
                "zoom_centre", "zoom_out")
WINDOW_SIZES = (1, 2, 4)


class GammaError(ValueError):
    pass


@dataclass
class Lattice:
    scenes: list
    windows: np.ndarray        # (W, 4) normalised boxes
    actions: np.ndarray        # (A, 4) relative moves
    window_step: np.ndarray    # (W, A) window index after the move

    @property
    def n_windows(self):
        return len(self.windows)

    def state(self, scene_idx, window_idx):
        return scene_idx * self.n_windows + window_idx

    def split(self, state):
        return divmod(int(state), self.n_windows)

    @property
    def action_tokens(self):
        return discretize_action(self.actions)


@dataclass
class DiscreteMdp:
    next_state: np.ndarray     # (S, A) int
    rewards: np.ndarray        # (S, L) reward on entering each state
    annotation_probs: np.ndarray = None
    lattice: Lattice = field(default=None, repr=False)

    @property
    def n_states(self):
        return self.next_state.shape[0]

    @property
    def n_actions(self):
        return self.next_state.shape[1]

    @property
    def n_annotations(self):
        return self.rewards.shape[1]


def _check_gamma(gamma):
    if not 0.0 <= gamma < 1.0:
        raise GammaError(f"discount must satisfy 0 <= gamma < 1, got {gamma}")


def lattice_windows(grid, sizes=WINDOW_SIZES):
    out = []
    for s in sizes:
        if s > grid:
            continue
        pos = np.arange(0.0, grid - s + 1e-9, 0.5)
        for y in pos:
            for x in pos:
                out.append((y / grid, x / grid, (y + s) / grid, (x + s) / grid))
    return np.array(out)


def build_lattice(scenes, sizes=WINDOW_SIZES, actions=LATTICE_ACTIONS):
    grid = scenes[0].grid
    windows = lattice_windows(grid, sizes)
    key = lambda b: tuple(np.round(np.asarray(b) * grid * 2).astype(int))
    lookup = {key(w): i for i, w in enumerate(windows)}
    step = np.empty((len(windows), len(actions)), np.int64)
    for i, w in enumerate(windows):
        moved = apply_action(w, actions)
        for a, box in enumerate(moved):
            on_grid = np.allclose(box * grid * 2, np.round(box * grid * 2), atol=1e-9)
            step[i, a] = lookup.get(key(box), i) if on_grid else i
    return Lattice(list(scenes), windows, np.asarray(actions, np.float64), step)


def lattice_mdp(scenes, gamma, sizes=WINDOW_SIZES, actions=LATTICE_ACTIONS):
    """The crop MDP over ``scenes``: states ``scene * W + window``."""
    _check_gamma(gamma)
    lat = build_lattice(scenes, sizes, actions)
    w = lat.n_windows
    probs = np.concatenate([annotation_dists(sc, lat.windows) for sc in scenes])
    offsets = (np.arange(len(scenes)) * w)[:, None, None]
    nxt = (lat.window_step[None] + offsets).reshape(-1, len(actions))
    return DiscreteMdp(nxt, (1.0 - gamma) * probs, probs, lat)


def bellman_apply(mdp, q, gamma):
    """Q'[s,a,l] = r[s',l] + gamma * max_a' Q[s',a',l]; transitions are deterministic."""
    if q.shape != (mdp.n_states, mdp.n_actions, mdp.n_annotations):
        raise ValueError(f"Q table shape {q.shape} does not match MDP "
                         f"{(mdp.n_states, mdp.n_actions, mdp.n_annotations)}")
    return kernels.bellman(mdp.next_state, mdp.rewards, q, gamma)


def value_iteration(mdp, gamma, tol=1e-12, max_iter=100_000, q0=None):
    """Iterate from ``q0`` (default zeros) until the sup-norm change is <= tol.

    Returns ``(Q, iterations)``; the residual ||Q - T Q|| of the returned table is
    at most ``gamma * tol``.
    """
    _check_gamma(gamma)
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.zeros((mdp.n_states, mdp.n_actions, mdp.n_annotations)) if q0 is None else np.array(q0, float)
    for it in range(1, max_iter + 1):
        nq = bellman_apply(mdp, q, gamma)
        diff = float(np.max(np.abs(nq - q)))
        q = nq
        if diff <= tol:
            return q, it
    raise RuntimeError(f"value iteration did not reach tol {tol} in {max_iter} sweeps")


def bellman_residual(mdp, q, gamma):
    return float(np.max(np.abs(bellman_apply(mdp, q, gamma) - q)))


def contraction_ratio(mdp, gamma, rng, pairs=100, scale=1.0):
    """Max over random table pairs of ||TQ1 - TQ2|| / ||Q1 - Q2|| (sup norms)."""
    shape = (mdp.n_states, mdp.n_actions, mdp.n_annotations)
    worst = 0.0
    for _ in range(pairs):
        q1 = rng.uniform(-scale, scale, size=shape)
        q2 = rng.uniform(-scale, scale, size=shape)
        num = np.max(np.abs(bellman_apply(mdp, q1, gamma) - bellman_apply(mdp, q2, gamma)))
        worst = max(worst, float(num / np.max(np.abs(q1 - q2))))
    return worst


# ------------------------------------------------------------- observations

def render_observation_keys(mdp, resolution):
    """Hashable observation per state: digest of the rendered window pixels."""
    lat = mdp.lattice
    keys = []
    for sc in lat.scenes:
        views = render_views(sc, lat.windows, resolution)
        keys.extend(hashlib.sha1(v.tobytes()).hexdigest() for v in views)
    return keys


@dataclass
class ObservationQ:
    table: np.ndarray          # (O, A, L) posterior-mean values
    state_obs: np.ndarray      # (S,) observation index of each state
    representative: np.ndarray  # (O,) first state showing each observation
    counts: np.ndarray         # (O,) states per observation


def observation_q(mdp, q_star, obs_fn):
    """Average Q* over the states sharing an observation (uniform state prior).

    ``obs_fn`` is a callable state -> hashable key, or a precomputed sequence of keys.
    """
    keys = obs_fn if not callable(obs_fn) else [obs_fn(s) for s in range(mdp.n_states)]
    index = {}
    state_obs = np.empty(mdp.n_states, np.int64)
    for s, k in enumerate(keys):
        state_obs[s] = index.setdefault(k, len(index))
    n_obs = len(index)
    counts = np.bincount(state_obs, minlength=n_obs)
    table = np.zeros((n_obs,) + q_star.shape[1:])
    np.add.at(table, state_obs, q_star)
    table /= counts[:, None, None]
    rep = np.full(n_obs, -1, np.int64)
    for s in range(mdp.n_states - 1, -1, -1):
        rep[state_obs[s]] = s
    return ObservationQ(table, state_obs, rep, counts)


# --------------------------------------------------------------- tabular TD

def td_tabular(mdp, gamma, steps, lr_schedule, rng, sync_every=None, q0=None):
    """Q-learning with uniformly sampled (s, a) and a periodically synced target table.

    ``lr_schedule`` is a constant or a callable mapping the step-index array to
    learning rates.
    """
    _check_gamma(gamma)
    if steps <= 0:
        raise ValueError("steps must be positive")
    s_idx = rng.integers(0, mdp.n_states, size=steps)
    a_idx = rng.integers(0, mdp.n_actions, size=steps)
    t = np.arange(steps)
    lrs = lr_schedule(t) if callable(lr_schedule) else np.full(steps, float(lr_schedule))
    if sync_every is None:
        sync_every = mdp.n_states * mdp.n_actions
    q = np.zeros((mdp.n_states, mdp.n_actions, mdp.n_annotations)) if q0 is None else q0
    return kernels.td(mdp.next_state, mdp.rewards, q, gamma, s_idx, a_idx, lrs, sync_every)


def single_state_mdp(value, gamma, n_actions=1):
    """One absorbing state whose fixed point is ``value`` for every action."""
    value = np.atleast_1d(np.asarray(value, np.float64))
    return DiscreteMdp(np.zeros((1, n_actions), np.int64), ((1.0 - gamma) * value)[None], value[None])

"""Run configuration, batch sampling and the resumable training loop."""
import json
import os
import platform
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__, blobio
from .adcore import load_checkpoint, no_grad, save_checkpoint
from .bootstrap import (ABLATIONS, RewardBatch, TrainConfig, build_lattice_transitions,
                        build_transitions, compute_targets, init_train_state, train_step, value_loss)
from .evalkit import bucketed_bootstrap_accuracy, grad_cosine, oracle_value_gap, probe_reports, probe_set
from .geometry import sample_crops
from .models import ModelConfig, init_params, value_logits
from .oracle import lattice_mdp, observation_q, render_observation_keys, value_iteration
from .rewards import clip_reward_loss, dino_reward_loss, sample_annotation_ids, simclr_reward_loss
from .synthdata import SceneConfig, annotation_dists, generate_scenes, read_dataset, render_views

# rng stream ids within one step
_REWARD_STREAM, _TRANSITION_STREAM = 0, 1


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str = None          # dataset directory; generated in memory when absent
    n_scenes: int = 256
    grid: int = 4
    vocab: int = 8
    density: float = 0.6
    cell_px: int = 8
    seed: int = 0

    def scene_config(self):
        return SceneConfig(self.grid, self.vocab, self.density, self.cell_px)


@dataclass
class RunConfig:
    variant: str = "clip"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    checkpoint_every: int = 500
    eval: dict = field(default_factory=dict)

    def to_dict(self):
        return {"variant": self.variant, "model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": asdict(self.data), "seed": self.seed, "checkpoint_every": self.checkpoint_every,
                "eval": dict(self.eval)}


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    kw = dict(raw)
    for k in ("transition_scale", "reward_scale"):
        if k in kw:
            kw[k] = tuple(kw[k])
    return cls(**kw)


REQUIRED = ("variant",)


def parse_run_config(raw):
    """Validate a JSON-like dict into a :class:`RunConfig`; raises ConfigError naming the field."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for k in REQUIRED:
        if k not in raw:
            raise ConfigError(f"missing required field {k!r}")
    extra = sorted(set(raw) - {"variant", "model", "train", "data", "seed", "checkpoint_every", "eval"})
    if extra:
        raise ConfigError(f"unknown field(s) {', '.join(extra)}")
    train_raw = dict(raw.get("train", {}))
    for flag in train_raw.pop("ablations", []):
        if flag not in ABLATIONS:
            raise ConfigError(f"unknown ablation flag {flag!r}; expected one of {ABLATIONS}")
        train_raw[flag] = True
    data = _build(DataConfig, raw.get("data", {}), "data")
    model_raw = dict(raw.get("model", {}))
    model_raw["variant"] = raw["variant"]
    if raw["variant"] == "clip":
        model_raw.setdefault("vocab_size", data.vocab + 1)
    seed = int(raw.get("seed", 0))
    train_raw.setdefault("seed", seed)
    try:
        model = _build(ModelConfig, model_raw, "model").validate()
        train = _build(TrainConfig, train_raw, "train").validate(model.variant)
        data.scene_config().validate()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if model.variant == "clip" and model.vocab_size != data.vocab + 1:
        raise ConfigError("model.vocab_size must equal data.vocab + 1 (glyphs plus background)")
    return RunConfig(raw["variant"], model, train, data, seed, int(raw.get("checkpoint_every", 500)),
                     dict(raw.get("eval", {})))


def load_run_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(raw)


# ------------------------------------------------------------------ world

class World:
    """Everything batches are drawn from: scenes, and in lattice mode the oracle MDP."""

    def __init__(self, run, box_sampler=None):
        self.run = run
        self.box_sampler = box_sampler
        d = run.data
        if d.path:
            ds = read_dataset(d.path)
            self.scenes = ds.scenes
            vocabs = {sc.vocab for sc in self.scenes}
            if vocabs != {d.vocab}:
                raise ConfigError(f"data.vocab is {d.vocab} but the dataset at {d.path} has vocab "
                                  f"{sorted(vocabs)}")
        else:
            self.scenes = generate_scenes(d.seed, d.n_scenes, d.scene_config())
        self.resolution = run.model.resolution
        self.mdp = None
        self.observations = None
        if run.train.mode == "lattice":
            self.mdp = lattice_mdp(self.scenes, run.train.gamma)
            w = self.mdp.lattice.windows
            self.observations = np.concatenate([render_views(sc, w, self.resolution) for sc in self.scenes])

    def step_rngs(self, step):
        seed = self.run.train.seed
        return (np.random.default_rng([seed, step, _REWARD_STREAM]),
                np.random.default_rng([seed, step, _TRANSITION_STREAM]))

    def pick_scenes(self, rng, n):
        return [self.scenes[i] for i in rng.integers(0, len(self.scenes), size=n)]

    def reward_batch(self, rng):
        t = self.run.train
        variant = self.run.variant
        if t.mode == "lattice":
            s = rng.integers(0, self.mdp.n_states, size=t.reward_batch)
            ids = sample_annotation_ids(rng, self.mdp.annotation_probs[s])
            return RewardBatch(self.observations[s], ids)
        scenes = self.pick_scenes(rng, t.reward_batch)
        boxes = sample_crops(rng, len(scenes), t.reward_scale)
        views = np.stack([render_views(sc, b[None], self.resolution)[0] for sc, b in zip(scenes, boxes)])
        if variant == "clip":
            probs = np.stack([annotation_dists(sc, b[None])[0] for sc, b in zip(scenes, boxes)])
            return RewardBatch(views, sample_annotation_ids(rng, probs))
        boxes_b = sample_crops(rng, len(scenes), t.reward_scale)
        views_b = np.stack([render_views(sc, b[None], self.resolution)[0] for sc, b in zip(scenes, boxes_b)])
        return RewardBatch(views, None, views_b)

    def transition_batch(self, rng, box_sampler=None):
        t = self.run.train
        if t.mode == "lattice":
            return build_lattice_transitions(rng, self.mdp, t.batch_images, self.observations)
        return build_transitions(rng, self.pick_scenes(rng, t.batch_images), t.n_views, self.resolution,
                                 t.transition_scale, box_sampler=box_sampler or self.box_sampler)


# ------------------------------------------------------------ checkpoints

def new_state(run):
    params = init_params(run.model, run.seed)
    return init_train_state(run.model, run.train, params)


def checkpoint_arrays(state):
    arrays = {}
    for name, v in state.params.items():
        arrays["p/" + name] = v
    for name, v in state.ema.items():
        arrays["e/" + name] = v
    for name, v in state.opt.state["m"].items():
        arrays["m/" + name] = v
    for name, v in state.opt.state["v"].items():
        arrays["v/" + name] = v
    if state.dino is not None:
        arrays["dino/center"] = np.ascontiguousarray(state.dino.center, np.float64).view(np.uint8)
    return arrays


def save_state(path, state, run=None):
    meta = {"step": state.step, "opt_step": state.opt.state["step"], "version": __version__}
    if run is not None:
        meta["config"] = run.to_dict()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_checkpoint(path, checkpoint_arrays(state), meta)


def load_state(path, run):
    arrays, meta = load_checkpoint(path)
    state = new_state(run)
    for prefix, store in (("p/", state.params), ("e/", state.ema)):
        for name in store.names():
            if prefix + name not in arrays:
                raise blobio.MalformedManifest(f"checkpoint {path} lacks tensor {prefix + name}")
            ref = store[name]
            got = arrays[prefix + name]
            if got.shape != ref.shape:
                raise blobio.ShapeMismatch(f"checkpoint tensor {prefix + name} has shape {got.shape}, "
                                           f"expected {ref.shape}")
            store[name] = got.astype(ref.dtype)
    st = state.opt.state
    st["step"] = int(meta.get("opt_step", 0))
    st["m"] = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
    st["v"] = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}
    if state.dino is not None and "dino/center" in arrays:
        state.dino.center = arrays["dino/center"].view(np.float64).copy()
    if "step" not in meta:
        raise blobio.MalformedManifest(f"checkpoint {path} has no step")
    state.step = int(meta["step"])
    return state


def checkpoint_path(out_dir, step):
    return os.path.join(out_dir, "checkpoints", f"step_{step:07d}")


def list_checkpoints(out_dir):
    d = os.path.join(out_dir, "checkpoints")
    if not os.path.isdir(d):
        return []
    steps = sorted(int(f[5:12]) for f in os.listdir(d) if f.startswith("step_") and f.endswith(".json"))
    return steps


def run_manifest(run):
    return {"config": run.to_dict(), "seed": run.seed, "code_version": __version__,
            "workers": int(os.environ.get("ABOOT_WORKERS", "1")), "python": platform.python_version(),
            "numpy": np.__version__}


# ------------------------------------------------------------------- loop

def train(run, out_dir=None, state=None, world=None, until=None, callback=None, log=None):
    """Train from ``state`` (fresh when None) up to step ``until`` (default: train.steps).

    With ``out_dir`` the loop appends metrics to ``metrics.jsonl`` and writes a
    checkpoint every ``checkpoint_every`` steps and at the end.
    """
    world = world or World(run)
    state = state or new_state(run)
    until = run.train.steps if until is None else until
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a") if out_dir else None
    try:
        while state.step < until:
            r_rng, t_rng = world.step_rngs(state.step)
            rb = world.reward_batch(r_rng)
            tb = world.transition_batch(t_rng)
            m = train_step(run.model, run.train, state, rb, tb)
            if metrics_fh:
                metrics_fh.write(json.dumps(m) + "\n")
            if callback:
                callback(state, m)
            if log and (state.step % max(1, until // 20) == 0 or state.step == until):
                log(f"step {state.step}: reward_loss={m['reward_loss']:.4f} value_loss={m['value_loss']:.4f}")
            if out_dir and (state.step % run.checkpoint_every == 0 or state.step == until):
                if metrics_fh:
                    metrics_fh.flush()
                save_state(checkpoint_path(out_dir, state.step), state, run)
    finally:
        if metrics_fh:
            metrics_fh.close()
    return state, world


def truncate_metrics(out_dir, step):
    """Drop metric lines past ``step`` so a resumed run does not duplicate them."""
    path = os.path.join(out_dir, "metrics.jsonl")
    if not os.path.exists(path):
        return
    with open(path) as fh:
        keep = [ln for ln in fh if ln.strip() and json.loads(ln)["step"] <= step]
    with open(path, "w") as fh:
        fh.writelines(keep)


def store_equal(a, b):
    return a.names() == b.names() and all(np.array_equal(a[n], b[n]) for n in a.names())



# ------------------------------------------------------------- evaluation

def value_annotations(run, P, reward_batch):
    """Annotation set the value head is evaluated against."""
    if run.variant == "clip":
        return np.arange(run.model.vocab_size)
    if run.variant == "simclr":
        return reward_batch.views
    return None


def loss_closures(run, state, reward_batch, transitions):
    """Functions P -> reward loss and P -> value loss on fixed batches (targets from the EMA)."""
    cfg, t = run.model, run.train
    target_P = state.params.tensors(False) if t.no_target_network else state.ema.tensors(False)
    ann = value_annotations(run, target_P, reward_batch)
    targets = compute_targets(cfg, target_P, transitions, ann, t.effective_gamma(), t.no_action_tokens)

    def reward_loss(P):
        if cfg.variant == "clip":
            return clip_reward_loss(cfg, P, reward_batch.views, reward_batch.ids)
        if cfg.variant == "simclr":
            return simclr_reward_loss(cfg, P, reward_batch.views, reward_batch.views_b)
        return dino_reward_loss(cfg, P, state.ema.tensors(False), state.dino, reward_batch.views,
                                reward_batch.views_b, update_center=False)

    def value_loss_fn(P):
        q = value_logits(cfg, P, transitions.views, transitions.actions, ann, t.no_action_tokens)
        return value_loss(q, targets, transitions.successor)

    return reward_loss, value_loss_fn


def eval_report(run, state, world, seed=0):
    """Probe accuracies, IoU-bucketed bootstrap accuracy, gradient cosine and (lattice runs) oracle gap."""
    cfg, t = run.model, run.train
    ev = {"probe_scenes": 48, "probe_views": 8, "eval_batches": 4, **run.eval}
    P = state.params.tensors(False)
    E = state.params.tensors(False) if t.no_target_network else state.ema.tensors(False)
    report = {"step": state.step, "eval_seed": seed, "variant": run.variant}

    pset = probe_set(run.data.scene_config(), ev["probe_scenes"], ev["probe_views"], cfg.resolution, seed)
    report["probes"] = {k: v.to_dict() for k, v in probe_reports(cfg, P, pset, seed).items()}

    rng = np.random.default_rng([seed, 1_000_003])
    rb = world.reward_batch(rng)
    batches = [world.transition_batch(rng) for _ in range(ev["eval_batches"])]
    ann = value_annotations(run, E, rb)
    report["bucket_accuracy"] = bucketed_bootstrap_accuracy(
        cfg, P, E, batches, ann, t.effective_gamma(), mask_actions=t.no_action_tokens)

    r_fn, v_fn = loss_closures(run, state, rb, batches[0])
    gc = grad_cosine(state.params, r_fn, v_fn)
    report["grad_cosine"] = {"value": gc.value, "diagnostic": gc.diagnostic}
    with no_grad():
        report["reward_loss"] = float(r_fn(P).data)
        report["value_loss"] = float(v_fn(P).data)

    if world.mdp is not None:
        q_star, _ = value_iteration(world.mdp, t.gamma)
        obs_q = observation_q(world.mdp, q_star, render_observation_keys(world.mdp, cfg.resolution))
        report["oracle_gap"] = oracle_value_gap(cfg, P, world.mdp, obs_q, world.observations)
    else:
        report["oracle_gap"] = None
    return report

"""Command line: gen-data, train, eval, oracle, sweep.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric failure.
"""
import argparse
import csv
import json
import os
import shutil
import sys
import time

import numpy as np

from . import blobio, oracle
from .bootstrap import NumericError
from .evalkit import DEFAULT_BUCKETS as OVERLAP_BANDS
from .geometry import iou, sample_crops
from .synthdata import SceneConfig, generate_scenes, write_dataset
from .training import (ConfigError, World, checkpoint_path, eval_report, list_checkpoints, load_run_config,
                       load_state, parse_run_config, run_manifest, train, truncate_metrics)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
GAMMAS = (0.0, 0.25, 0.5, 0.75, 0.9)
MAX_REJECTIONS = 1_000_000


class CollisionError(ConfigError):
    pass


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2)
    os.replace(tmp, path)


def _prepare_out(path, force):
    """Create ``path``; refuse a non-empty existing directory unless forced."""
    if os.path.exists(path) and (not os.path.isdir(path) or os.listdir(path)):
        if not force:
            raise CollisionError(f"{path} exists; pass --force to overwrite")
        if os.path.isdir(path):
            shutil.rmtree(path)
        else:
            os.remove(path)
    os.makedirs(path, exist_ok=True)


# ----------------------------------------------------------------- gen-data

GEN_FIELDS = ("n_scenes", "seed", "resolution", "grid", "vocab", "density", "cell_px")
GEN_REQUIRED = ("n_scenes", "seed", "resolution")


def dataset_fields(raw):
    """Flat gen-data fields from either a flat config or a run config's data section."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "data" in raw:
        fields = {k: v for k, v in raw["data"].items() if k != "path"}
        if "resolution" in raw.get("model", {}):
            fields.setdefault("resolution", raw["model"]["resolution"])
    else:
        fields = dict(raw)
    for k in GEN_REQUIRED:
        if fields.get(k) is None:
            raise ConfigError(f"missing required field {k!r}")
    extra = sorted(set(fields) - set(GEN_FIELDS))
    if extra:
        raise ConfigError(f"unknown field(s) {', '.join(extra)}")
    return fields


def cmd_gen_data(args):
    f = dataset_fields(_read_json(args.config))
    sc = SceneConfig(**{k: f[k] for k in ("grid", "vocab", "density", "cell_px") if k in f})
    try:
        sc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if int(f["n_scenes"]) < 1:
        raise ConfigError("n_scenes must be >= 1")
    _prepare_out(args.out, args.force)
    scenes = generate_scenes(int(f["seed"]), int(f["n_scenes"]), sc)
    write_dataset(args.out, scenes, int(f["resolution"]))
    _log(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


# -------------------------------------------------------------------- train

def cmd_train(args):
    run = load_run_config(args.config)
    steps = list_checkpoints(args.out)
    state = None
    if args.resume and steps:
        saved = parse_run_config(_read_json(os.path.join(args.out, "config.json")))
        if saved.to_dict() != run.to_dict():
            raise ConfigError("resume config differs from the run directory's config.json")
        state = load_state(checkpoint_path(args.out, steps[-1]), run)
        truncate_metrics(args.out, state.step)
        _log(f"resuming from step {state.step}")
    else:
        _prepare_out(args.out, args.force)
        _write_json(os.path.join(args.out, "config.json"), run.to_dict())
        _write_json(os.path.join(args.out, "manifest.json"), run_manifest(run))
    t0 = time.perf_counter()
    state, _ = train(run, args.out, state=state, until=args.until, log=_log if args.verbose else None)
    _log(f"trained to step {state.step} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


# --------------------------------------------------------------------- eval

def cmd_eval(args):
    cfg_path = os.path.join(args.run, "config.json")
    if not os.path.exists(cfg_path):
        raise ConfigError(f"{args.run} is not a run directory (no config.json)")
    run = parse_run_config(_read_json(cfg_path))
    steps = list_checkpoints(args.run)
    step = steps[-1] if args.checkpoint == "latest" and steps else None
    if args.checkpoint != "latest":
        try:
            step = int(args.checkpoint)
        except ValueError:
            raise ConfigError(f"checkpoint must be a step number or 'latest', got {args.checkpoint!r}") from None
    if step is None or step not in steps:
        raise ConfigError(f"no checkpoint at step {args.checkpoint} in {args.run}")
    state = load_state(checkpoint_path(args.run, step), run)
    report = eval_report(run, state, World(run), seed=args.seed)
    out_dir = os.path.join(args.run, "eval", f"step_{step:07d}")
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "eval_report.json"), report)
    _log(f"wrote {os.path.join(out_dir, 'eval_report.json')}")
    return EXIT_OK


# ------------------------------------------------------------------- oracle

ORACLE_DEFAULTS = {"n_scenes": 2, "grid": 4, "vocab": 3, "density": 0.6, "cell_px": 8, "seed": 0,
                   "gamma": 0.5, "tol": 1e-12, "td_steps": 1_000_000, "td_sync": None, "pairs": 100,
                   "resolution": 16}


def oracle_report(cfg):
    unknown = sorted(set(cfg) - set(ORACLE_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown field(s) {', '.join(unknown)}")
    c = {**ORACLE_DEFAULTS, **cfg}
    gamma = float(c["gamma"])
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must satisfy 0 <= gamma < 1, got {gamma}")
    sc = SceneConfig(c["grid"], c["vocab"], c["density"], c["cell_px"])
    try:
        sc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    scenes = generate_scenes(c["seed"], c["n_scenes"], sc)
    t0 = time.perf_counter()
    mdp = oracle.lattice_mdp(scenes, gamma)
    q, iters = oracle.value_iteration(mdp, gamma, tol=c["tol"])
    vi_s = time.perf_counter() - t0
    ratio = oracle.contraction_ratio(mdp, gamma, np.random.default_rng(c["seed"]), c["pairs"])
    t1 = time.perf_counter()
    decay = max(1.0, c["td_steps"] / 40)
    q_td = oracle.td_tabular(mdp, gamma, c["td_steps"], lambda t: 1.0 / (1.0 + t / decay),
                             np.random.default_rng([c["seed"], 1]), c["td_sync"])
    td_s = time.perf_counter() - t1
    obs = oracle.observation_q(mdp, q, oracle.render_observation_keys(mdp, c["resolution"]))
    return {"n_states": mdp.n_states, "n_actions": mdp.n_actions, "n_annotations": mdp.n_annotations,
            "gamma": gamma, "residual": oracle.bellman_residual(mdp, q, gamma), "iterations": iters,
            "contraction_max_ratio": ratio, "td_vs_vi": float(np.max(np.abs(q_td - q))),
            "n_observations": int(len(obs.counts)), "q_min": float(q.min()), "q_max": float(q.max()),
            "vi_seconds": vi_s, "td_seconds": td_s}


def cmd_oracle(args):
    report = oracle_report(_read_json(args.config))
    text = json.dumps(report, indent=2)
    if args.out:
        if os.path.exists(args.out) and not args.force:
            raise CollisionError(f"{args.out} exists; pass --force to overwrite")
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


# -------------------------------------------------------------------- sweep

class Unsatisfiable(RuntimeError):
    pass


def _in_band(v, band):
    lo, hi = band
    return (v >= lo) & ((v < hi) | ((hi >= 1.0) & (v >= 1.0)))


def band_sampler(band, scale_range, realized, max_rejections=MAX_REJECTIONS):
    """Box sampler whose views 1..N-1 overlap view 0 with IoU inside ``band``.

    Every box is an ordinary crop draw; only pairs are rejected, so the marginal
    over single boxes is untouched. Accepted IoUs are appended to ``realized``.
    """
    def sample(rng, n):
        first = sample_crops(rng, 1, scale_range)[0]
        kept, rejected = [first], 0
        while len(kept) < n:
            cand = sample_crops(rng, 256, scale_range)
            ok = _in_band(iou(first, cand), band)
            kept.extend(cand[ok][: n - len(kept)])
            rejected += int((~ok).sum())
            if rejected > max_rejections:
                raise Unsatisfiable(f"IoU band {band} unsatisfiable after {rejected} rejections")
        realized.extend(float(iou(first, b)) for b in kept[1:])
        return np.stack(kept)

    return sample


def band_satisfiable(band, scale_range, rng, draws=MAX_REJECTIONS):
    """Whether any of ``draws`` independent crop pairs lands inside ``band``."""
    for lo in range(0, draws, 100_000):
        k = min(100_000, draws - lo)
        if np.any(_in_band(iou(sample_crops(rng, k, scale_range), sample_crops(rng, k, scale_range)), band)):
            return True
    return False


def _eval_every(run):
    return int(run.eval.get("every", max(1, run.train.steps // 4)))


CURVE_METRICS = ("probe_dominant_glyph", "probe_glyph_at_offset", "reward_loss", "value_loss")


def _flat_metrics(report):
    return {"probe_dominant_glyph": report["probes"]["dominant_glyph"]["accuracy"],
            "probe_glyph_at_offset": report["probes"]["glyph_at_offset"]["accuracy"],
            "reward_loss": report["reward_loss"], "value_loss": report["value_loss"]}


def run_setting(run, out_dir, box_sampler=None):
    """Train one sweep setting, evaluating every ``eval.every`` steps; returns the curve."""
    world = World(run, box_sampler)
    every = _eval_every(run)
    curve = []

    def on_step(state, _m):
        if state.step % every == 0 or state.step == run.train.steps:
            curve.append({"step": state.step, **_flat_metrics(eval_report(run, state, world, seed=0))})

    train(run, out_dir, world=world, callback=on_step)
    return curve


def cmd_sweep(args):
    raw = _read_json(args.config)
    base = parse_run_config(raw)
    if args.kind == "overlap" and base.train.mode != "crops":
        raise ConfigError("the overlap sweep needs crop-mode training")
    _prepare_out(args.out, args.force)
    summary, curves = [], []

    def record(setting, curve, extra=()):
        for k in CURVE_METRICS:
            summary.append({"setting": setting, "metric": k, "value": curve[-1][k]})
            curves.extend({"setting": setting, "step": pt["step"], "metric": k, "value": pt[k]} for pt in curve)
        summary.extend({"setting": setting, "metric": k, "value": v} for k, v in extra)

    if args.kind == "gamma":
        for g in GAMMAS:
            cfg = json.loads(json.dumps(raw))
            cfg.setdefault("train", {})["gamma"] = g
            run = parse_run_config(cfg)
            sub = os.path.join(args.out, f"gamma_{g}")
            os.makedirs(sub)
            _write_json(os.path.join(sub, "config.json"), run.to_dict())
            _log(f"sweep gamma={g}")
            record(f"gamma={g}", run_setting(run, sub))
    else:
        bands = [tuple(b) for b in base.eval.get("bands", OVERLAP_BANDS)]
        rng = np.random.default_rng(base.seed)
        for band in bands:
            setting = f"iou=[{band[0]},{band[1]})"
            if not band_satisfiable(band, base.train.transition_scale, rng):
                summary.append({"setting": setting, "metric": "status", "value": "unsatisfiable"})
                continue
            sub = os.path.join(args.out, f"iou_{band[0]}_{band[1]}")
            os.makedirs(sub)
            _write_json(os.path.join(sub, "config.json"), base.to_dict())
            realized = []
            _log(f"sweep {setting}")
            try:
                curve = run_setting(base, sub, band_sampler(band, base.train.transition_scale, realized))
            except Unsatisfiable:
                summary.append({"setting": setting, "metric": "status", "value": "unsatisfiable"})
                continue
            record(setting, curve, [("realized_mean_iou", float(np.mean(realized))), ("pairs", len(realized))])
    _write_csv(os.path.join(args.out, "sweep.csv"), ["setting", "metric", "value"], summary)
    _write_csv(os.path.join(args.out, "curves.csv"), ["setting", "step", "metric", "value"], curves)
    _log(f"wrote {os.path.join(args.out, 'sweep.csv')}")
    return EXIT_OK


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="abootstrap", description="Annotation bootstrapping lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.add_argument("--until", type=int, default=None, help="stop at this step (default: train.steps)")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--run", required=True)
    e.add_argument("--checkpoint", default="latest")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    o = sub.add_parser("oracle", help="certify the lattice Bellman fixed point")
    o.add_argument("--config", required=True)
    o.add_argument("--out", default=None)
    o.add_argument("--force", action="store_true")
    o.set_defaults(fn=cmd_oracle)

    s = sub.add_parser("sweep", help="gamma or overlap sweep")
    s.add_argument("--kind", choices=("gamma", "overlap"), required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except NumericError as exc:
        _log(f"numeric error: {exc}")
        return EXIT_NUMERIC
    except (OSError, blobio.BlobError) as exc:
        _log(f"I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

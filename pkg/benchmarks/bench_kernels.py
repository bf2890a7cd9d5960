"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeats 5] [--json out.json]

Each kernel is called once before timing so JIT compilation is excluded. The
two paths must agree on every workload; a mismatch aborts the run.
"""
import argparse
import json
import time

import numpy as np

from abootstrap import kernels
from abootstrap._accel import HAVE_NUMBA
from abootstrap.geometry import sample_crops
from abootstrap.oracle import lattice_mdp
from abootstrap.synthdata import SceneConfig, generate_scenes


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def workloads(rng):
    scenes = generate_scenes(0, 2, SceneConfig(grid=4, vocab=3))
    canvas = scenes[0].canvas
    boxes = sample_crops(rng, 256, (0.05, 0.5))
    mdp = lattice_mdp(scenes, 0.5)
    ns, r = mdp.next_state.astype(np.int64), mdp.rewards.astype(np.float64)
    q = rng.random(ns.shape + (r.shape[1],))
    steps = 200_000
    s_idx = rng.integers(0, ns.shape[0], steps)
    a_idx = rng.integers(0, ns.shape[1], steps)
    lrs = 1.0 / (1.0 + np.arange(steps) / 5000.0)
    return {
        "resample 256 crops @32px": (kernels.resample_numpy, kernels.resample_jit,
                                     (canvas, boxes, 32), 1e-5),
        "bellman sweep 150x11x4": (kernels.bellman_numpy, kernels.bellman_jit, (ns, r, q, 0.5), 1e-12),
        "td 200k updates, sync 1650": (kernels.td_numpy, kernels.td_jit,
                                       (ns, r, q, 0.5, s_idx, a_idx, lrs, 1650), 1e-9),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", default=None, help="also write results here")
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba unavailable or disabled; timing the numpy path only")
    rows = []
    for name, (np_fn, jit_fn, fn_args, tol) in workloads(np.random.default_rng(args.seed)).items():
        t_np = best_of(lambda: np_fn(*fn_args), args.repeats)
        row = {"kernel": name, "numpy_s": t_np, "numba_s": None, "speedup": None}
        if HAVE_NUMBA:
            err = float(np.max(np.abs(np.asarray(np_fn(*fn_args)) - np.asarray(jit_fn(*fn_args)))))
            if err > tol:
                raise SystemExit(f"{name}: numpy and numba disagree by {err:.3g}")
            t_jit = best_of(lambda: jit_fn(*fn_args), args.repeats)
            row.update(numba_s=t_jit, speedup=t_np / t_jit, max_abs_diff=err)
        rows.append(row)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for r in rows:
        jit = f"{r['numba_s'] * 1e3:10.2f}" if r["numba_s"] is not None else f"{'-':>10s}"
        sp = f"{r['speedup']:8.1f}" if r["speedup"] is not None else f"{'-':>8s}"
        print(f"{r['kernel']:32s} {r['numpy_s'] * 1e3:10.2f} {jit} {sp}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()

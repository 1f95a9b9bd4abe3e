"""Compare the numba and pure-numpy training kernels.

Times one SGD step of each kernel on a synthetic batch and a short
training run per view, and reports the largest parameter difference
between the two backends.

    python benchmarks/bench_kernels.py [--batch 10000] [--epochs 20] [--repeat 5]
"""
import argparse
import time
from dataclasses import replace

import numpy as np

from eclm import synthgen as sg
from eclm._kernels import get_backend
from eclm.pipeline import load_view_kg
from eclm.trainer import TrainConfig, train_view


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def step_cases(batch, d, rng):
    n_ent, n_rel, n_chars, n_lits = 5000, 12, 40, 300
    E = rng.uniform(-0.5, 0.5, (n_ent, d))
    R = rng.uniform(-0.5, 0.5, (n_rel, d))
    C = rng.uniform(-0.5, 0.5, (n_chars, d))
    lens = rng.integers(3, 11, n_lits)
    ptr = np.r_[0, np.cumsum(lens)]
    chars = rng.integers(0, n_chars, ptr[-1])
    coef = rng.uniform(0.5, 2.0, ptr[-1])
    pos = np.c_[rng.integers(0, n_ent, batch), rng.integers(0, n_rel, batch), rng.integers(0, n_ent, batch)]
    neg = pos.copy()
    neg[:, 2] = rng.integers(0, n_ent, batch)
    W = rng.normal(0, 0.3, (8, 2, 2))
    fb, P, pb = rng.normal(0, 0.1, 8), rng.normal(0, 0.3, (d, 8)), rng.normal(0, 0.1, d)
    users, rels = pos[:, 0], pos[:, 1]
    lits, nl = rng.integers(0, n_lits, batch), rng.integers(0, n_lits, batch)
    nu = rng.integers(0, n_ent, batch)
    return {
        "transe_step": (lambda k, a: k.transe_step(a[0], a[1], pos, neg, 1.0, 0.01), (E, R)),
        "demography_step": (lambda k, a: k.demography_step(a[0], a[1], a[2], users, rels, lits, nu, nl,
                                                           ptr, chars, coef, 1.0, 1.0, 0.01), (E, R, C)),
        "loyalty_step": (lambda k, a: k.loyalty_step(a[0], a[1], a[2], a[3], a[4], a[5], users, rels,
                                                     pos[:, 2], 0.01), (E, R, W, fb, P, pb)),
        "row_dots": (lambda k, a: k.row_dots(a[0], np.arange(len(a[0])), a[1][0]), (E, R)),
    }


def bench_steps(args):
    rng = np.random.default_rng(0)
    kernels = {name: get_backend(name) for name in ("numpy", "numba")}
    print(f"{'kernel':18s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, (fn, arrays) in step_cases(args.batch, args.d, rng).items():
        results, times = {}, {}
        for kname, k in kernels.items():
            fresh = [a.copy() for a in arrays]
            results[kname] = (fn(k, fresh), fresh)
            times[kname] = best_of(lambda: fn(k, [a.copy() for a in arrays]), args.repeat)
        diff = max(float(np.max(np.abs(x - y))) for x, y in zip(results["numpy"][1], results["numba"][1]))
        diff = max(diff, float(np.max(np.abs(np.asarray(results["numpy"][0]) - results["numba"][0]))))
        print(f"{name:18s} {1e3 * times['numpy']:10.2f} {1e3 * times['numba']:10.2f} "
              f"{times['numpy'] / times['numba']:8.1f} {diff:10.2e}")


def bench_training(args):
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        data = sg.generate(sg.GenConfig(n_users=args.users))
        sg.write_dataset(data, tmp)
        cfg = replace(TrainConfig(d=args.d), max_epochs=args.epochs, min_epochs=args.epochs)
        print(f"\ntraining {args.epochs} epochs, {args.users} users")
        print(f"{'view':12s} {'numpy s':>9s} {'numba s':>9s} {'speedup':>8s} {'max diff':>10s}")
        for view in ("demography", "loyalty", "ichiba", "travel", "family"):
            kg = load_view_kg(tmp, view)
            out = {}
            for name in ("numpy", "numba"):
                train_view(kg, view, replace(cfg, max_epochs=1), backend=name)  # warm up
                t0 = time.perf_counter()
                table, _ = train_view(kg, view, cfg, backend=name)
                out[name] = (time.perf_counter() - t0, table)
            diff = float(np.max(np.abs(out["numpy"][1].entity_emb - out["numba"][1].entity_emb)))
            print(f"{view:12s} {out['numpy'][0]:9.2f} {out['numba'][0]:9.2f} "
                  f"{out['numpy'][0] / out['numba'][0]:8.1f} {diff:10.2e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=10_000)
    ap.add_argument("--d", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--users", type=int, default=2000)
    args = ap.parse_args()
    get_backend("numba").row_dots(np.zeros((1, 1)), np.zeros(1, dtype=np.int64), np.zeros(1))
    bench_steps(args)
    bench_training(args)


if __name__ == "__main__":
    main()

"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py --sites 2000 20000 --repeats 5

For each event size this builds a stride-1 and a stride-2 3^3 kernel map and
a 2^3 max pool, checks that both backends agree exactly, and prints the best
wall time per backend.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from tpcsparse import kernels
from tpcsparse.sparse import CUBE2, CUBE3, SparseTensor, coarse_coords


def random_cloud(rng: np.random.Generator, n: int, batch_size: int = 4) -> SparseTensor:
    """Random walk tracks, roughly ``n`` unique sites split over ``batch_size`` events."""
    per = max(1, n // batch_size)
    rows = []
    for b in range(batch_size):
        steps = rng.integers(-1, 2, size=(per * 2, 3))
        walk = np.cumsum(steps, axis=0) + rng.integers(0, 200, size=3)
        _, first = np.unique(walk, axis=0, return_index=True)
        walk = walk[np.sort(first)[:per]]
        rows.append(np.column_stack([np.full(len(walk), b), walk]))
    coords = np.unique(np.concatenate(rows), axis=0)
    feats = rng.standard_normal((len(coords), 16))
    return SparseTensor(coords.astype(np.int64), feats, 1, batch_size)


def best_time(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(x: SparseTensor):
    c = x.coords
    out1 = c
    out2 = coarse_coords(c, 2)
    yield "kmap 3^3 s1", lambda: kernels.kernel_pairs(c, out1, CUBE3)
    yield "kmap 3^3 s2", lambda: kernels.kernel_pairs(c, out2, CUBE3)
    pin, pout, _ = kernels.kernel_pairs(c, out2, CUBE2)
    yield "segment max", lambda: kernels.segment_max(x.feats, pin, pout, len(out2))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sites", type=int, nargs="+", default=[1000, 10000, 50000])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = kernels.AVAILABLE
    print(f"backends: {', '.join(backends)}")
    if "cython" not in backends:
        print("compiled core not built; only the numpy fallback is timed")
    print(f"{'sites':>8} {'case':<14}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    rng = np.random.default_rng(args.seed)
    for n in args.sites:
        x = random_cloud(rng, n)
        for name, fn in cases(x):
            times, results = {}, {}
            for b in backends:
                with kernels.use_backend(b):
                    results[b] = fn()
                    times[b] = best_time(fn, args.repeats)
            ref = results[backends[0]]
            for b in backends[1:]:
                for u, v in zip(ref, results[b]):
                    if not np.array_equal(u, v):
                        raise SystemExit(f"backends disagree on {name} at {len(x)} sites")
            speed = times["python"] / times["cython"] if "cython" in times else 1.0
            cols = "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
            print(f"{len(x):>8} {name:<14}{cols}{speed:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

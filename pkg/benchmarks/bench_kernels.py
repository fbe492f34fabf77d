"""Compare the numba kernels with their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is checked for identical output first, then timed after a
warm-up call so JIT compilation is excluded.
"""

import argparse
import sys
import timeit

import numpy as np

from dfecsim import _accel


def cases(rng):
    rows32 = rng.integers(0, 256, (32, 1448), dtype=np.uint8)
    rows256 = rng.integers(0, 256, (256, 1448), dtype=np.uint8)
    u = rng.random(1_000_000)
    v = rng.random(1_000_000)
    drops = (rng.random(1_000_000) < 0.03).astype(np.uint8)
    return [
        ("xor_fold k=32", "xor_fold", (rows32,)),
        ("xor_fold k=256", "xor_fold", (rows256,)),
        ("leave_one_out k=32", "leave_one_out", (rows32, _accel.xor_fold_numpy(rows32))),
        ("leave_one_out k=256", "leave_one_out", (rows256, _accel.xor_fold_numpy(rows256))),
        ("gilbert_elliott 1e6", "gilbert_elliott", (u, v, 0.015, 0.5, 1.0, 0)),
        ("run_lengths 1e6", "run_lengths", (drops,)),
    ]


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba unavailable or disabled (DFECSIM_NUMBA=0); nothing to compare")
        return 0
    rng = np.random.default_rng(7)
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, name, fargs in cases(rng):
        f_np = getattr(_accel, f"{name}_numpy")
        f_nb = getattr(_accel, f"{name}_numba")
        if not same(f_np(*fargs), f_nb(*fargs)):
            print(f"{label}: outputs differ", file=sys.stderr)
            return 1
        t_np = min(timeit.repeat(lambda: f_np(*fargs), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: f_nb(*fargs), number=1, repeat=args.repeat))
        print(f"{label:24s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

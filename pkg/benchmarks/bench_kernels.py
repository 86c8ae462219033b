"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so STMIL_DISABLE_NUMBA has no effect here.
"""
import argparse
import timeit

import numpy as np

from stmil import kernels
from stmil._accel import HAS_NUMBA


def _best(fn, repeat):
    fn()  # warm-up (JIT compile on first call)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    cuboid = rng.standard_normal((528, 4, 14, 14), dtype=np.float32)
    n = 40 * 4 * 64
    scores = np.round(rng.random(n), 3)
    labels = (rng.random(n) < 0.3).astype(np.int8)

    cases = [
        ("pool_cells 528x4x14x14", lambda: kernels.pool_cells_numpy(cuboid, 2),
         lambda: kernels.pool_cells_numba(cuboid, 2)),
        (f"roc_sweep n={n}", lambda: kernels.roc_sweep_numpy(scores, labels),
         lambda: kernels.roc_sweep_numba(scores, labels)),
    ]
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, np_fn, nb_fn in cases:
        a, b = np_fn(), nb_fn()
        same = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) else np.allclose(a, b)
        t_np, t_nb = _best(np_fn, args.repeat), _best(nb_fn, args.repeat)
        print(f"{name:<26}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.1f}x" + ("" if same else "  MISMATCH"))


if __name__ == "__main__":
    main()

"""Time the compiled loss kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 200]

Shapes follow the training loop: contrastive blocks of (shots x groups, 8, 8)
and a (128, 8) classification batch, plus a gradient-check sized batch.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from synernet import _kernels_py

try:
    from synernet import _kernels
except ImportError:  # extension not built
    _kernels = None

CASES = {
    "contrastive (128, 8, 8)": ("contrastive_loss", lambda r: (np.clip(r.standard_normal((128, 8, 8)) * 0.3, -1, 1), 0.9)),
    "contrastive (1, 8, 8)": ("contrastive_loss", lambda r: (np.clip(r.standard_normal((1, 8, 8)) * 0.3, -1, 1), 0.9)),
    "cross_entropy (128, 8)": ("cross_entropy", lambda r: (r.standard_normal((128, 8)), r.integers(0, 8, 128))),
    "cross_entropy (8, 8)": ("cross_entropy", lambda r: (r.standard_normal((8, 8)), r.integers(0, 8, 8))),
    "softmax_rows (900, 16)": ("softmax_rows", lambda r: (r.standard_normal((900, 16)),)),
}


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for label, (fn, make) in CASES.items():
        inputs = make(rng)
        py = getattr(_kernels_py, fn)
        t_py = min(timeit.repeat(lambda: py(*inputs), number=args.repeat, repeat=3)) / args.repeat * 1e6
        if _kernels is None:
            print(f"{label:28s} {t_py:10.1f} {'-':>10s}")
            continue
        cy = getattr(_kernels, fn)
        t_cy = min(timeit.repeat(lambda: cy(*inputs), number=args.repeat, repeat=3)) / args.repeat * 1e6
        a, b = py(*inputs), cy(*inputs)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))
        print(f"{label:28s} {t_py:10.1f} {t_cy:10.1f} {t_py / t_cy:7.1f}x {diff:11.2e}")


if __name__ == "__main__":
    main()

"""Time the compiled evaluation kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--seed 0]
"""

import argparse
import importlib
import timeit

import numpy as np

from kefs import _pykernels


def boxes(rng, n):
    xy = rng.uniform(0, 500, (n, 2))
    return np.hstack([xy, xy + rng.uniform(10, 120, (n, 2))])


def cases(rng):
    dets, gts = boxes(rng, 300), boxes(rng, 60)
    iou = _pykernels.iou_matrix(dets, gts)
    hits = (rng.random(5000) < 0.3).astype(float)
    X = rng.normal(size=(1000, 64))
    labels = rng.integers(0, 2, 1000)
    return {
        "iou_matrix 300x60": ("iou_matrix", (dets, gts)),
        "greedy_match 300x60": ("greedy_match", (iou, 0.5)),
        "ap_from_hits n=5000": ("average_precision_from_hits", (hits, int(hits.sum()) + 100)),
        "silhouette n=1000 a=64": ("silhouette_samples", (X, labels)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    try:
        compiled = importlib.import_module("kefs._ckernels")
    except ImportError:
        print("compiled kernels not built; only the fallback is available")
        compiled = None

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<26}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for label, (name, call_args) in cases(rng).items():
        py = getattr(_pykernels, name)
        t_py = min(timeit.repeat(lambda: py(*call_args), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{label:<26}{t_py:>12.2f}{'-':>12}{'-':>10}")
            continue
        cy = getattr(compiled, name)
        np.testing.assert_allclose(np.asarray(cy(*call_args)), np.asarray(py(*call_args)), atol=1e-10)
        t_cy = min(timeit.repeat(lambda: cy(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<26}{t_py:>12.2f}{t_cy:>12.2f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()

"""Time the numba kernels against the numpy fallback on synthetic-corpus workloads.

Usage: python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from lipmotion import _kernels
from lipmotion.core_types import load_topology
from lipmotion.synth_data import canonical_landmarks, sample_identity


def best_of(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args()
    if _kernels.numba is None:
        raise SystemExit("numba is not installed")
    s = args.size
    topo = load_topology("desk-48")
    lm = canonical_landmarks(sample_identity(0, 0), 0.6)
    pts = (lm + 1.0) * 0.5 * s
    hull = pts[list(topo.lip_hull_idx)]
    cases = {
        "polygon_coverage (lip hull)": (
            lambda: _kernels.polygon_coverage_numpy(hull, s, s),
            lambda: _kernels.polygon_coverage_numba(np.ascontiguousarray(hull), s, s, _kernels.SUPERSAMPLE)),
        "splat_discs (48 points)": (
            lambda: _kernels.splat_discs_numpy(pts, s, s),
            lambda: _kernels.splat_discs_numba(np.ascontiguousarray(pts), s, s, 1.0)),
    }
    print(f"{'kernel':30s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, (f_np, f_nb) in cases.items():
        diff = float(np.abs(f_np() - f_nb()).max())
        t_np, t_nb = best_of(f_np, args.repeat), best_of(f_nb, args.repeat)
        print(f"{name:30s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.1f} {diff:11.2e}")


if __name__ == "__main__":
    main()

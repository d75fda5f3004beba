"""Compare the compiled and NumPy block-sparse attention backends.

Usage: python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each case times forward and backward passes over the same plan and inputs,
checks that both backends agree, and reports the median wall time plus the
effective GFLOP/s derived from the instrumented MAC count.
"""
from __future__ import annotations

import argparse
import json
import statistics
import time

import numpy as np

from cubeattn import kernels
from cubeattn.attention import (
    JointBlockMask,
    MacCounter,
    block_sparse_attention,
    block_sparse_attention_backward,
)
from cubeattn.latent_grid import CubeDims, GridDims, build_partition

CASES = [
    # name, grid, cube, n_global, heads, head_dim
    ("toy-dit", (8, 8, 8), (2, 4, 4), 32, 2, 16),
    ("small-cubes", (8, 16, 16), (2, 4, 4), 64, 2, 32),
    ("default-cube", (8, 24, 24), (4, 8, 8), 96, 2, 32),
    ("tiny-cubes", (4, 16, 16), (1, 2, 2), 16, 2, 16),
]


def _median_time(fn, repeat: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run(repeat: int, dtype) -> list[dict]:
    rows = []
    for name, grid, cube, n_global, heads, d in CASES:
        part = build_partition(GridDims(*grid), CubeDims(*cube))
        m = JointBlockMask(part, n_global, radius=1)
        L = m.n_total
        rng = np.random.default_rng(0)
        q, k, v, g = (rng.standard_normal((heads, L, d)).astype(dtype) for _ in range(4))
        counter = MacCounter()
        block_sparse_attention(q, k, v, m, counter=counter)
        ref = None
        for backend in kernels.available():
            out, lse = block_sparse_attention(q, k, v, m, backend=backend, return_lse=True)
            if ref is None:
                ref = out
            agree = float(np.max(np.abs(out - ref)))
            fwd = _median_time(lambda: block_sparse_attention(q, k, v, m, backend=backend), repeat)
            bwd = _median_time(
                lambda: block_sparse_attention_backward(q, k, v, out, lse, g, m, backend=backend), repeat
            )
            rows.append({
                "case": name, "backend": backend, "tokens": L, "heads": heads, "head_dim": d,
                "dtype": np.dtype(dtype).name, "fwd_ms": fwd * 1e3, "bwd_ms": bwd * 1e3,
                "fwd_gflops": counter.flops / fwd / 1e9, "max_diff_vs_python": agree,
            })
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float64")
    ap.add_argument("--json", help="also write rows to this file")
    args = ap.parse_args()
    if "cython" not in kernels.available():
        print("compiled backend not built; timing the NumPy fallback only")
    rows = run(args.repeat, np.dtype(args.dtype))
    head = f"{'case':<14}{'backend':<9}{'tokens':>7}{'fwd ms':>10}{'bwd ms':>10}{'GFLOP/s':>9}{'speedup':>9}"
    print(head)
    base = {r["case"]: r for r in rows if r["backend"] == "python"}
    for r in rows:
        speed = base[r["case"]]["fwd_ms"] / r["fwd_ms"]
        print(f"{r['case']:<14}{r['backend']:<9}{r['tokens']:>7}{r['fwd_ms']:>10.3f}{r['bwd_ms']:>10.3f}"
              f"{r['fwd_gflops']:>9.2f}{speed:>8.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()

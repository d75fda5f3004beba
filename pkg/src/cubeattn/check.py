"""Self-check suite behind ``cubeattn check``.

Every check compares the implementation against an independent oracle
(brute-force masks, dense attention, finite differences, closed forms) and
reports its worst error next to the tolerance it must meet.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import kernels
from .attention import BlockPlan, JointBlockMask, MacCounter, block_sparse_attention, dense_masked_attention
from .dit.model import ToyDiT, ToyDiTConfig
from .flops import CostConfig, local_attention_flops, stage1_cost_ratio, stage1_sweep
from .latent_grid import CubeDims, CubePartition, GridDims, build_partition, coords_of, cube_of_token, cubes_adjacent
from .rope3d import RopeParams, apply_rope, proxy_scale_factors, rope_angles


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0


# oracles ---------------------------------------------------------------------

def reference_mask(part: CubePartition, n_global: int, radius: int, policy: str,
                   metric: str = "chebyshev") -> np.ndarray:
    """Brute-force additive mask in the joint (reordered detail, global) layout."""
    n = part.n_tokens
    cubes = [cube_of_token(part, int(i)) for i in part.perm]
    allowed = np.zeros((n + n_global, n + n_global), dtype=bool)
    for i in range(n):
        for j in range(n):
            allowed[i, j] = cubes_adjacent(cubes[i], cubes[j], radius, metric)
    if policy == "full":
        allowed[:n, n:] = True
    allowed[n:, n:] = True
    return np.where(allowed, 0.0, -np.inf)


def corrupt_adjacency(m: JointBlockMask) -> JointBlockMask:
    """Test hook: drop one neighbour from the first cube that has any."""
    nbrs = [nb.copy() for nb in m.neighbors]
    for c, nb in enumerate(nbrs):
        if len(nb) > 1:
            others = nb[nb != c]
            nbrs[c] = np.sort(np.append(others[1:], c))
            break
    m.__dict__["neighbors"] = tuple(nbrs)
    m.__dict__.pop("plan", None)
    return m


def random_attention_config(rng: np.random.Generator, max_grid=(3, 4, 4), max_cube=(2, 2, 2)):
    grid = GridDims(*(int(rng.integers(1, g + 1)) for g in max_grid))
    cube = CubeDims(*(int(rng.integers(1, min(c, g) + 1)) for c, g in zip(max_cube, grid.as_tuple())))
    radius = int(rng.integers(0, 2))
    n_global = int(rng.choice([0, 2, 4]))
    policy = str(rng.choice(["full", "none"]))
    return grid, cube, radius, n_global, policy


# checks ----------------------------------------------------------------------

def check_oracle_equivalence(n_configs: int = 50, seed: int = 0, fault: bool = False) -> CheckResult:
    """Block-sparse vs dense attention under a brute-force mask, f32 and f64, every backend."""
    rng = np.random.default_rng(seed)
    err32 = err64 = 0.0
    heads, d = 2, 8
    for _ in range(n_configs):
        grid, cube, radius, n_global, policy = random_attention_config(rng)
        part = build_partition(grid, cube)
        dense_mask = reference_mask(part, n_global, radius, policy)
        L = part.n_tokens + n_global
        q, k, v = (rng.standard_normal((heads, L, d)) for _ in range(3))
        ref64 = dense_masked_attention(q, k, v, dense_mask)
        q32, k32, v32 = (a.astype(np.float32) for a in (q, k, v))
        ref32 = dense_masked_attention(*(a.astype(np.float64) for a in (q32, k32, v32)), dense_mask)
        for backend in kernels.available():
            m = JointBlockMask(part, n_global, radius, policy)
            if fault:
                corrupt_adjacency(m)
            out64 = block_sparse_attention(q, k, v, m, backend=backend)
            out32 = block_sparse_attention(q32, k32, v32, m, backend=backend)
            err64 = max(err64, float(np.max(np.abs(out64 - ref64))))
            err32 = max(err32, float(np.max(np.abs(out32.astype(np.float64) - ref32))))
    passed = err32 < 1e-5 and err64 < 1e-10
    return CheckResult("sparse_vs_dense", passed, max(err32, err64), 1e-5,
                       f"{n_configs} configs x {kernels.available()}; f32 {err32:.2e} (<1e-5), f64 {err64:.2e} (<1e-10)")


def check_partition_invariants(max_dim: int = 6) -> CheckResult:
    """Bijection, contiguity, coverage, membership and border counts on every small grid."""
    n_bad = 0
    n_cases = 0
    for g in itertools.product(range(1, max_dim + 1), repeat=3):
        grid = GridDims(*g)
        N = grid.n_tokens
        for c in itertools.product(*(range(1, k + 1) for k in g)):
            n_cases += 1
            part = build_partition(grid, CubeDims(*c))
            ok = np.array_equal(np.sort(part.perm), np.arange(N))
            ok &= np.array_equal(part.perm[part.inv_perm], np.arange(N))
            starts, sizes = part.cube_starts(), part.cube_sizes()
            ok &= starts[0] == 0 and np.array_equal(starts[1:], np.cumsum(sizes)[:-1]) and sizes.sum() == N
            expected_cubes = int(np.prod([-(-a // b) for a, b in zip(g, c)]))
            ok &= part.n_cubes == expected_cubes
            coords = coords_of(grid, part.perm)
            for cube in part.cubes:
                lo = np.array(cube.cube_coord) * np.array(c)
                hi = lo + np.array(cube.extent)
                span = coords[cube.start:cube.stop]
                ok &= cube.token_range[1] == int(np.prod(cube.extent))
                ok &= bool(np.all((span >= lo) & (span < hi)))
                ok &= all(1 <= e <= ce for e, ce in zip(cube.extent, c))
            if not ok:
                n_bad += 1
    return CheckResult("partition_invariants", n_bad == 0, float(n_bad), 0.0,
                       f"{n_cases} grid/cube pairs with dims <= {max_dim}, {n_bad} failing")


def check_rope(seeds: int = 100) -> CheckResult:
    """Norm preservation, relative-position identity and proxy-anchor alignment."""
    norm_err = rel_err = 0.0
    align_err = 0.0
    params = RopeParams(16)
    for s in range(seeds):
        rng = np.random.default_rng([s, 3])
        v = rng.standard_normal(16)
        a = rope_angles(params, rng.uniform(-50, 50, 3))
        norm_err = max(norm_err, abs(np.linalg.norm(apply_rope(v, a)) / np.linalg.norm(v) - 1))
        q, k = rng.standard_normal(16), rng.standard_normal(16)
        m, n = rng.integers(-20, 21, 3), rng.integers(-20, 21, 3)
        lhs = apply_rope(q, rope_angles(params, m)) @ apply_rope(k, rope_angles(params, n))
        rhs = apply_rope(q, rope_angles(params, m - n)) @ k
        rel_err = max(rel_err, abs(lhs - rhs))
    for proxy, target in [((2, 4, 4), (8, 16, 16)), ((21, 30, 52), (21, 270, 480)), ((3, 5, 7), (12, 10, 21))]:
        pg, tg = GridDims(*proxy), GridDims(*target)
        r = proxy_scale_factors(pg, tg)
        coords = np.stack(np.meshgrid(*(np.arange(x) for x in proxy), indexing="ij"), -1).reshape(-1, 3)
        scaled = rope_angles(params.with_scales(r), coords)
        unit = rope_angles(params, coords * np.array(r))
        align_err = max(align_err, float(np.max(np.abs(scaled - unit))))
    passed = norm_err < 1e-12 and rel_err < 1e-9 and align_err == 0.0
    return CheckResult("rope_properties", passed, max(norm_err, rel_err, align_err), 1e-9,
                       f"norm {norm_err:.1e} (<1e-12), relpos {rel_err:.1e} (<1e-9), anchor {align_err:.1e} (==0)")


def _isolation_configs():
    yield ToyDiTConfig(grid=GridDims(2, 4, 4), cube=CubeDims(1, 2, 2), proxy_grid=GridDims(1, 2, 2), head_dim=8)
    yield ToyDiTConfig(grid=GridDims(3, 5, 4), cube=CubeDims(2, 2, 3), proxy_grid=GridDims(1, 1, 2), radius=0)
    yield ToyDiTConfig()


def check_mask_asymmetry(seed: int = 0, fault: bool = False) -> CheckResult:
    """Global-stream activations after every sub-block are bitwise unchanged by detail perturbations."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    n_runs = 0
    for base in _isolation_configs():
        for policy, backend in itertools.product(("full", "none"), kernels.available()):
            cfg = replace(base, policy=policy)
            model = ToyDiT(cfg, seed=seed, backend=backend)
            for name, p in model.params.items():
                model.params[name] = p + 0.2 * rng.standard_normal(p.shape)
            if fault:
                model.__dict__["mask_joint"] = _leaky_mask(model.mask_joint)
            N, n = model.n_detail, model.n_global
            xd = rng.standard_normal((N, cfg.channels))
            xg = rng.standard_normal((n, cfg.channels))
            txt = rng.standard_normal((cfg.n_text, cfg.dim))
            _, c1 = model.forward(xd, xg, txt, 0.3, keep_acts=True)
            _, c2 = model.forward(xd + rng.standard_normal(xd.shape), xg, txt, 0.3, keep_acts=True)
            for a1, a2 in zip(c1["acts"], c2["acts"]):
                worst = max(worst, float(np.max(np.abs(a1[N:] - a2[N:]))))
            n_runs += 1
    return CheckResult("mask_asymmetry", worst == 0.0, worst, 0.0,
                       f"{n_runs} two-layer forwards; global rows of every activation compared bitwise")


def _leaky_mask(m: JointBlockMask) -> JointBlockMask:
    # fault hook: let the global block read the first detail cube
    plan = m.plan
    kr_start = np.append(plan.kr_start, 0)
    kr_len = np.append(plan.kr_len, m.partition.cubes[0].token_range[1])
    kr_ptr = plan.kr_ptr.copy()
    kr_ptr[-1] += 1
    leaky = JointBlockMask(m.partition, m.n_global, m.radius, m.detail_to_global, m.metric)
    leaky.__dict__["plan"] = BlockPlan(plan.q_start, plan.q_len, kr_ptr, kr_start, kr_len)
    return leaky


def gradient_check(n_params: int = 64, seed: int = 0, eps: float = 1e-5, floor: float = 1e-6,
                   backend: str | None = None) -> tuple[float, int, set[str]]:
    """Worst relative error of the full-model gradient against central differences.

    The loss sums a conditioned pass (proxy + text) and an unconditioned pass
    (no proxy, null text) so every tensor, ``null_text`` included, gets a
    gradient. Every tensor is sampled at least once; the rest of the budget
    is spread at random. Relative error is ``|fd - an| / max(|fd|, |an|, floor)``.
    """
    cfg = ToyDiTConfig(grid=GridDims(2, 4, 4), cube=CubeDims(1, 2, 2), proxy_grid=GridDims(1, 2, 2),
                       head_dim=8, heads=2, time_dim=16)
    model = ToyDiT(cfg, seed=seed, backend=backend)
    rng = np.random.default_rng([seed, 5])
    # move off the zero-initialised head so every path carries gradient
    for name, p in model.params.items():
        model.params[name] = p + 0.3 * rng.standard_normal(p.shape)
    N, n = model.n_detail, model.n_global
    xd = rng.standard_normal((N, cfg.channels))
    xg = rng.standard_normal((n, cfg.channels))
    txt = rng.standard_normal((cfg.n_text, cfg.dim))
    tgt = rng.standard_normal((N, cfg.channels))
    passes = [(xg, txt, 0.37), (None, None, 0.81)]

    def loss():
        total = 0.0
        for g, t, tau in passes:
            out, _ = model.forward(xd, g, t, tau)
            total += float(np.mean((out - tgt) ** 2))
        return total

    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for g, t, tau in passes:
        out, cache = model.forward(xd, g, t, tau)
        for k, v in model.backward(cache, 2 * (out - tgt) / out.size).items():
            grads[k] += v

    names = sorted(model.params)
    picks = list(names) + [names[i] for i in rng.integers(len(names), size=max(0, n_params - len(names)))]
    worst = 0.0
    for name in picks:
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + eps
        lp = loss()
        p[idx] = old - eps
        lm = loss()
        p[idx] = old
        fd = (lp - lm) / (2 * eps)
        an = grads[name][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
    return worst, len(picks), set(names)


def check_gradients(seed: int = 0) -> CheckResult:
    worst = 0.0
    detail = []
    for backend in kernels.available():
        err, count, names = gradient_check(seed=seed, backend=backend)
        worst = max(worst, err)
        detail.append(f"{backend} {err:.1e}")
    return CheckResult("gradients", worst < 1e-4, worst, 1e-4,
                       f"{count} params over all {len(names)} tensors; " + ", ".join(detail))


def check_stage1_ratio() -> CheckResult:
    direct = stage1_cost_ratio(4)
    swept = stage1_sweep(4, proxy_tokens=21 * 30 * 52, d_total=1536)[-1].ratio
    err = max(abs(direct - 16.0), abs(swept - 16.0))
    return CheckResult("stage1_cost_ratio", err == 0.0, err, 0.0, f"r_t=4: closed form {direct:g}, sweep {swept:g}")


def check_counter_law(n_configs: int = 20, seed: int = 0) -> CheckResult:
    """Closed-form local FLOPs equal twice the instrumented MACs."""
    rng = np.random.default_rng([seed, 9])
    worst = 0
    for _ in range(n_configs):
        grid, cube, radius, n_global, policy = random_attention_config(rng, max_grid=(4, 6, 6), max_cube=(3, 3, 3))
        metric = str(rng.choice(["chebyshev", "face"]))
        heads, d = int(rng.integers(1, 3)), int(rng.choice([2, 4, 8]))
        part = build_partition(grid, cube)
        m = JointBlockMask(part, n_global, radius, policy, metric)
        L = part.n_tokens + n_global
        q, k, v = (rng.standard_normal((heads, L, d)) for _ in range(3))
        counter = MacCounter()
        block_sparse_attention(q, k, v, m, counter=counter)
        closed = local_attention_flops(CostConfig("rand", grid, cube, radius, n_global, d, heads, policy, metric))
        worst = max(worst, abs(closed - counter.flops))
    return CheckResult("flops_counter_law", worst == 0, float(worst), 0.0,
                       f"{n_configs} random configs, max |closed - 2*MACs| = {worst}")


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "sparse_vs_dense": check_oracle_equivalence,
    "partition_invariants": check_partition_invariants,
    "rope_properties": check_rope,
    "mask_asymmetry": check_mask_asymmetry,
    "gradients": check_gradients,
    "stage1_cost_ratio": check_stage1_ratio,
    "flops_counter_law": check_counter_law,
}

FAULTABLE = {"sparse_vs_dense", "mask_asymmetry"}


def run_checks(fault: bool = False, only: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        res = fn(fault=True) if fault and name in FAULTABLE else fn()
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results


def format_table(results: list[CheckResult]) -> str:
    rows = [("check", "status", "max_error", "tolerance", "seconds", "detail")]
    for r in results:
        rows.append((r.name, "PASS" if r.passed else "FAIL", f"{r.max_error:.3e}", f"{r.tolerance:.0e}",
                     f"{r.seconds:.2f}", r.detail))
    widths = [max(len(row[i]) for row in rows) for i in range(5)]
    lines = []
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row[:5], widths)) + "  " + row[5])
    return "\n".join(lines)

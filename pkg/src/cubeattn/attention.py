"""Dense and block-sparse masked attention over ``[detail; global]`` tokens.

Layout convention: rows ``0..N-1`` are detail tokens in cube-contiguous
(reordered) order, rows ``N..N+n-1`` are global proxy tokens. The joint mask
has four blocks:

* detail -> detail: allowed iff the two tokens' cubes are adjacent,
* detail -> global: all allowed (policy ``"full"``) or none (``"none"``),
* global -> detail: always forbidden,
* global -> global: always allowed.

The sparse path never materialises the mask; it visits only allowed key
ranges and reports the work done through a :class:`MacCounter`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import _pykernels, kernels
from .latent_grid import CubePartition

POLICIES = ("full", "none")
METRICS = ("chebyshev", "face")
MATERIALIZE_CAP = 4096
NEG_SENTINEL = -1e30


class FullyMaskedRowError(ValueError):
    """A query row has no visible key."""


class MaskTooLargeError(ValueError):
    """Refusing to materialise a mask above :data:`MATERIALIZE_CAP` tokens."""


@dataclass
class MacCounter:
    """Multiply-accumulates executed by the sparse kernel, per call site."""

    key_visits: int = 0
    score_macs: int = 0
    value_macs: int = 0

    def add(self, visits: int, dim_qk: int, dim_v: int) -> None:
        self.key_visits += visits
        self.score_macs += visits * dim_qk
        self.value_macs += visits * dim_v

    @property
    def flops(self) -> int:
        return 2 * (self.score_macs + self.value_macs)


@dataclass(frozen=True)
class BlockPlan:
    """CSR list of (query block -> key ranges); see ``_pykernels``."""

    q_start: np.ndarray
    q_len: np.ndarray
    kr_ptr: np.ndarray
    kr_start: np.ndarray
    kr_len: np.ndarray

    @property
    def n_blocks(self) -> int:
        return len(self.q_start)

    def keys_per_block(self) -> np.ndarray:
        return np.add.reduceat(self.kr_len, self.kr_ptr[:-1]) if len(self.kr_len) else np.zeros(0, np.int64)

    def key_visits(self) -> int:
        return int(np.sum(self.q_len * self.keys_per_block()))


@dataclass(frozen=True)
class JointBlockMask:
    partition: CubePartition
    n_global: int = 0
    radius: int = 1
    detail_to_global: str = "full"
    metric: str = "chebyshev"

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be non-negative")
        if self.n_global < 0:
            raise ValueError("n_global must be non-negative")
        if self.detail_to_global not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")

    @property
    def n_detail(self) -> int:
        return self.partition.n_tokens

    @property
    def n_total(self) -> int:
        return self.n_detail + self.n_global

    @cached_property
    def neighbors(self) -> tuple[np.ndarray, ...]:
        """Sorted neighbour cube indices of every cube, self included."""
        gt, gy, gx = self.partition.cube_grid
        r = self.radius
        offsets = [
            o for o in itertools.product(range(-r, r + 1), repeat=3)
            if (max(map(abs, o)) if self.metric == "chebyshev" else sum(map(abs, o))) <= r
        ]
        out = []
        for c in self.partition.cubes:
            it, iy, ix = c.cube_coord
            nb = [
                ((it + a) * gy + (iy + b)) * gx + (ix + e)
                for a, b, e in offsets
                if 0 <= it + a < gt and 0 <= iy + b < gy and 0 <= ix + e < gx
            ]
            out.append(np.array(sorted(nb), dtype=np.int64))
        return tuple(out)

    def cube_ids(self) -> np.ndarray:
        """Cube index of every reordered detail position."""
        sizes = self.partition.cube_sizes()
        return np.repeat(np.arange(len(sizes), dtype=np.int64), sizes)

    def cube_adjacency(self) -> np.ndarray:
        n = self.partition.n_cubes
        adj = np.zeros((n, n), dtype=bool)
        for i, nb in enumerate(self.neighbors):
            adj[i, nb] = True
        return adj

    @cached_property
    def plan(self) -> BlockPlan:
        starts = self.partition.cube_starts()
        sizes = self.partition.cube_sizes()
        q_start, q_len, kr_ptr, kr_start, kr_len = [], [], [0], [], []
        for c, nb in enumerate(self.neighbors):
            ranges = _merge_ranges(starts[nb], sizes[nb])
            if self.detail_to_global == "full" and self.n_global:
                ranges.append((self.n_detail, self.n_global))
            q_start.append(starts[c])
            q_len.append(sizes[c])
            for s, l in ranges:
                kr_start.append(s)
                kr_len.append(l)
            kr_ptr.append(len(kr_start))
        if self.n_global:
            q_start.append(self.n_detail)
            q_len.append(self.n_global)
            kr_start.append(self.n_detail)
            kr_len.append(self.n_global)
            kr_ptr.append(len(kr_start))
        as64 = lambda a: np.ascontiguousarray(a, dtype=np.int64)  # noqa: E731
        return BlockPlan(as64(q_start), as64(q_len), as64(kr_ptr), as64(kr_start), as64(kr_len))

    def visible_keys_per_query(self) -> np.ndarray:
        """Number of visible keys for every row (detail rows first)."""
        plan = self.plan
        return np.repeat(plan.keys_per_block(), plan.q_len)


def _merge_ranges(starts: np.ndarray, sizes: np.ndarray) -> list[tuple[int, int]]:
    merged: list[list[int]] = []
    for s, l in sorted(zip(starts.tolist(), sizes.tolist())):
        if merged and merged[-1][0] + merged[-1][1] == s:
            merged[-1][1] += l
        else:
            merged.append([s, l])
    return [(s, l) for s, l in merged]


def build_joint_mask(
    partition: CubePartition,
    n_global: int = 0,
    radius: int = 1,
    policy: str = "full",
    metric: str = "chebyshev",
) -> JointBlockMask:
    return JointBlockMask(partition, n_global, radius, policy, metric)


def materialize_mask(m: JointBlockMask, dtype=np.float64) -> np.ndarray:
    """Dense additive mask: 0 where allowed, ``-inf`` where forbidden."""
    total = m.n_total
    if total > MATERIALIZE_CAP:
        raise MaskTooLargeError(f"{total} tokens exceeds the materialisation cap of {MATERIALIZE_CAP}")
    n = m.n_detail
    allowed = np.zeros((total, total), dtype=bool)
    cid = m.cube_ids()
    allowed[:n, :n] = m.cube_adjacency()[cid][:, cid]
    if m.detail_to_global == "full":
        allowed[:n, n:] = True
    allowed[n:, n:] = True
    return np.where(allowed, 0.0, -np.inf).astype(dtype)


def _as_heads(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (tokens, dim) or (heads, tokens, dim), got shape {x.shape}")
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return np.ascontiguousarray(x)


def _check_rows(mask: np.ndarray) -> np.ndarray:
    allowed = mask > NEG_SENTINEL / 2
    if not np.all(allowed.any(axis=1)):
        bad = np.flatnonzero(~allowed.any(axis=1))
        raise FullyMaskedRowError(f"rows {bad[:8].tolist()} have no visible key")
    return allowed


def _bias(mask: np.ndarray, dtype) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    return np.where(np.isneginf(m), NEG_SENTINEL, m).astype(dtype)


def dense_masked_attention(q, k, v, mask, scale: float | None = None, return_lse: bool = False):
    """``softmax((q k^T + mask) * scale) v`` for one head (2D) or a stack (3D)."""
    q3, k3, v3 = _as_heads(q), _as_heads(k), _as_heads(v)
    _check_shapes(q3, k3, v3)
    if scale is None:
        scale = q3.shape[-1] ** -0.5
    mask = np.asarray(mask)
    if mask.shape != (q3.shape[1], k3.shape[1]):
        raise ValueError(f"mask shape {mask.shape} != ({q3.shape[1]}, {k3.shape[1]})")
    _check_rows(mask)
    bias = None if not np.any(mask) else _bias(mask, q3.dtype)
    outs, lses = [], []
    for h in range(q3.shape[0]):
        o, l = _pykernels.attend(q3[h], k3[h], v3[h], scale, bias)
        outs.append(o)
        lses.append(l)
    out, lse = np.stack(outs), np.stack(lses)
    if np.asarray(q).ndim == 2:
        out, lse = out[0], lse[0]
    return (out, lse) if return_lse else out


def attention_weights(q, k, mask, scale: float | None = None) -> np.ndarray:
    """Row-stochastic attention weights for one head (test and debug helper)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if scale is None:
        scale = q.shape[-1] ** -0.5
    _check_rows(np.asarray(mask))
    s = (q @ k.T + _bias(mask, np.float64)) * scale
    p = np.exp(s - s.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def attention_backward(q, k, v, mask, dout, scale: float | None = None):
    """Gradients of :func:`dense_masked_attention` w.r.t. ``q``, ``k`` and ``v``."""
    q3, k3, v3, do3 = _as_heads(q), _as_heads(k), _as_heads(v), _as_heads(dout)
    if scale is None:
        scale = q3.shape[-1] ** -0.5
    _check_rows(np.asarray(mask))
    bias = _bias(mask, q3.dtype)
    grads = [[], [], []]
    for h in range(q3.shape[0]):
        o, l = _pykernels.attend(q3[h], k3[h], v3[h], scale, bias)
        for acc, g in zip(grads, _pykernels.attend_backward(q3[h], k3[h], v3[h], o, l, do3[h], scale, bias)):
            acc.append(g)
    dq, dk, dv = (np.stack(g) for g in grads)
    if np.asarray(q).ndim == 2:
        return dq[0], dk[0], dv[0]
    return dq, dk, dv


def _check_shapes(q3, k3, v3):
    if q3.shape[0] != k3.shape[0] or k3.shape[:2] != v3.shape[:2] or q3.shape[2] != k3.shape[2]:
        raise ValueError(f"inconsistent shapes q{q3.shape} k{k3.shape} v{v3.shape}")
    if not (np.all(np.isfinite(q3)) and np.all(np.isfinite(k3)) and np.all(np.isfinite(v3))):
        raise ValueError("attention inputs must be finite")


def _plan_args(plan: BlockPlan):
    return plan.q_start, plan.q_len, plan.kr_ptr, plan.kr_start, plan.kr_len


def block_sparse_attention(
    q,
    k,
    v,
    m: JointBlockMask,
    scale: float | None = None,
    counter: MacCounter | None = None,
    backend: str | None = None,
    return_lse: bool = False,
):
    """Attention restricted to the blocks allowed by ``m``.

    Inputs must already be in the joint layout (reordered detail rows, then
    global rows). Accepts ``(tokens, dim)`` or ``(heads, tokens, dim)``.
    """
    q3, k3, v3 = _as_heads(q), _as_heads(k), _as_heads(v)
    _check_shapes(q3, k3, v3)
    if q3.shape[1] != m.n_total:
        raise ValueError(f"{q3.shape[1]} rows, mask expects {m.n_total}")
    dtype = q3.dtype
    k3, v3 = k3.astype(dtype, copy=False), v3.astype(dtype, copy=False)
    if scale is None:
        scale = q3.shape[-1] ** -0.5
    plan = m.plan
    if np.any(plan.kr_ptr[1:] == plan.kr_ptr[:-1]):
        raise FullyMaskedRowError("a query block has no visible keys")
    out, lse, visits = kernels.get(backend).sparse_forward(q3, k3, v3, *_plan_args(plan), float(scale))
    if counter is not None:
        counter.add(visits, q3.shape[2], v3.shape[2])
    if np.asarray(q).ndim == 2:
        out, lse = out[0], lse[0]
    return (out, lse) if return_lse else out


def block_sparse_attention_backward(
    q, k, v, out, lse, dout, m: JointBlockMask, scale: float | None = None, backend: str | None = None
):
    squeeze = np.asarray(q).ndim == 2
    q3, k3, v3 = _as_heads(q), _as_heads(k), _as_heads(v)
    dtype = q3.dtype
    o3, do3 = _as_heads(out).astype(dtype, copy=False), _as_heads(dout).astype(dtype, copy=False)
    lse2 = np.ascontiguousarray(np.atleast_2d(lse), dtype=dtype)
    if scale is None:
        scale = q3.shape[-1] ** -0.5
    dq, dk, dv = kernels.get(backend).sparse_backward(
        q3, k3.astype(dtype, copy=False), v3.astype(dtype, copy=False), o3, lse2, do3,
        *_plan_args(m.plan), float(scale),
    )
    if squeeze:
        return dq[0], dk[0], dv[0]
    return dq, dk, dv

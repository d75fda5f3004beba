"""NumPy reference backend for the block-sparse attention kernels.

A plan is CSR-shaped: query block ``b`` covers rows
``q_start[b] : q_start[b] + q_len[b]`` and sees the key ranges
``kr_start[j] : kr_start[j] + kr_len[j]`` for ``j`` in ``kr_ptr[b] : kr_ptr[b+1]``.
All arrays are ``(heads, tokens, dim)``.
"""
from __future__ import annotations

import numpy as np

NAME = "python"


def attend(q, k, v, scale, bias=None):
    """Softmax attention for one head on 2D blocks; returns ``(out, lse)``.

    Shared by the dense reference so a single-block sparse call follows the
    same arithmetic.
    """
    s = q @ k.T
    if bias is not None:
        s = s + bias
    s = s * scale
    m = s.max(axis=1, keepdims=True)
    p = np.exp(s - m)
    denom = p.sum(axis=1, keepdims=True)
    p /= denom
    out = p @ v
    lse = (m + np.log(denom))[:, 0]
    return out, lse


def attend_backward(q, k, v, out, lse, dout, scale, bias=None):
    s = q @ k.T
    if bias is not None:
        s = s + bias
    p = np.exp(s * scale - lse[:, None])
    dv = p.T @ dout
    dp = dout @ v.T
    delta = np.sum(dout * out, axis=1, keepdims=True)
    ds = p * (dp - delta) * scale
    return ds @ k, ds.T @ q, dv


def _key_index(kr_start, kr_len, lo, hi):
    if hi - lo == 1:
        s = int(kr_start[lo])
        return slice(s, s + int(kr_len[lo]))
    return np.concatenate(
        [np.arange(kr_start[j], kr_start[j] + kr_len[j]) for j in range(lo, hi)]
    )


def sparse_forward(q, k, v, q_start, q_len, kr_ptr, kr_start, kr_len, scale):
    heads, n_q, _ = q.shape
    out = np.zeros((heads, n_q, v.shape[2]), dtype=q.dtype)
    lse = np.zeros((heads, n_q), dtype=q.dtype)
    visits = 0
    for b in range(len(q_start)):
        lo, hi = int(kr_ptr[b]), int(kr_ptr[b + 1])
        if hi == lo:
            raise ValueError(f"query block {b} has no visible keys")
        qs, ql = int(q_start[b]), int(q_len[b])
        idx = _key_index(kr_start, kr_len, lo, hi)
        n_keys = int(np.sum(kr_len[lo:hi]))
        for h in range(heads):
            o, l = attend(q[h, qs:qs + ql], k[h, idx], v[h, idx], scale)
            out[h, qs:qs + ql] = o
            lse[h, qs:qs + ql] = l
        visits += heads * ql * n_keys
    return out, lse, visits


def sparse_backward(q, k, v, out, lse, dout, q_start, q_len, kr_ptr, kr_start, kr_len, scale):
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    heads = q.shape[0]
    for b in range(len(q_start)):
        lo, hi = int(kr_ptr[b]), int(kr_ptr[b + 1])
        qs, ql = int(q_start[b]), int(q_len[b])
        idx = _key_index(kr_start, kr_len, lo, hi)
        rows = slice(qs, qs + ql)
        for h in range(heads):
            gq, gk, gv = attend_backward(
                q[h, rows], k[h, idx], v[h, idx], out[h, rows], lse[h, rows], dout[h, rows], scale
            )
            dq[h, rows] += gq
            # key ranges inside one block never overlap, so fancy-index += is safe
            dk[h, idx] += gk
            dv[h, idx] += gv
    return dq, dk, dv

"""Axial 3D rotary embeddings with per-axis coordinate scales.

The head dimension is split into temporal, vertical and horizontal slices.
Each slice rotates consecutive channel pairs by ``scale_a * coord_a * omega_i``
with ``omega_i = base ** (-2 i / d_a)``. Scaling the temporal axis dilates
frame spacing; scaling all three axes maps a coarse proxy grid onto the
coordinate system of a finer target grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .latent_grid import GridDims


def default_axis_split(head_dim: int) -> tuple[int, int, int]:
    """Split ``head_dim`` roughly 2:1:1 over (t, y, x), remainder to t.

    Spatial slices get at least one rotation pair when ``head_dim >= 6``.
    """
    if head_dim <= 0 or head_dim % 2:
        raise ValueError(f"head_dim must be even and positive, got {head_dim}")
    spatial = 2 * (head_dim // 8)
    if spatial == 0 and head_dim >= 6:
        spatial = 2
    return (head_dim - 2 * spatial, spatial, spatial)


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    axis_split: tuple[int, int, int] | None = None
    base: float = 10000.0
    scales: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.axis_split is None:
            object.__setattr__(self, "axis_split", default_axis_split(self.head_dim))
        split = tuple(int(s) for s in self.axis_split)
        if sum(split) != self.head_dim:
            raise ValueError(f"axis_split {split} does not sum to head_dim {self.head_dim}")
        if any(s < 0 or s % 2 for s in split):
            raise ValueError(f"axis_split entries must be even and non-negative: {split}")
        if self.base <= 0:
            raise ValueError("base must be positive")
        scales = tuple(float(s) for s in self.scales)
        if len(scales) != 3 or any(not s > 0 for s in scales):
            raise ValueError(f"scales must be three positive reals, got {self.scales}")
        object.__setattr__(self, "axis_split", split)
        object.__setattr__(self, "scales", scales)

    def with_scales(self, scales: Sequence[float]) -> "RopeParams":
        return RopeParams(self.head_dim, self.axis_split, self.base, tuple(scales))

    def frequencies(self) -> list[np.ndarray]:
        """Per-axis frequency vectors ``base ** (-2 i / d_a)``."""
        return [
            self.base ** (-2.0 * np.arange(d // 2, dtype=np.float64) / d) if d else np.zeros(0)
            for d in self.axis_split
        ]


def proxy_scale_factors(proxy_dims: GridDims, target_dims: GridDims) -> tuple[float, float, float]:
    """Ratios ``(T/t, H/h, W/w)`` that map proxy coordinates onto the target grid."""
    for v in (*proxy_dims.as_tuple(), *target_dims.as_tuple()):
        if v <= 0:
            raise ValueError("grid dims must be positive")
    return (
        target_dims.t / proxy_dims.t,
        target_dims.h / proxy_dims.h,
        target_dims.w / proxy_dims.w,
    )


def rope_angles(params: RopeParams, coord) -> np.ndarray:
    """Rotation angles for one (t, y, x) coordinate or an (N, 3) batch.

    Returns shape ``(head_dim // 2,)`` or ``(N, head_dim // 2)``, axis slices
    concatenated in (t, y, x) order.
    """
    c = np.asarray(coord, dtype=np.float64)
    single = c.ndim == 1
    c = np.atleast_2d(c)
    if c.shape[-1] != 3:
        raise ValueError("coordinates must have three components")
    if not np.all(np.isfinite(c)):
        raise ValueError("coordinates must be finite")
    parts = []
    for a, freqs in enumerate(params.frequencies()):
        # scale first so a scaled proxy coordinate reproduces the target coordinate bit for bit
        pos = params.scales[a] * c[:, a]
        parts.append(pos[:, None] * freqs[None, :])
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


def apply_rope(vec: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate consecutive pairs ``(vec[..., 2i], vec[..., 2i+1])`` by ``angles[..., i]``.

    ``angles`` broadcasts against the leading dims of ``vec``.
    """
    vec = np.asarray(vec)
    angles = np.asarray(angles)
    if vec.shape[-1] != 2 * angles.shape[-1]:
        raise ValueError(f"vector length {vec.shape[-1]} != 2 * angles ({angles.shape[-1]})")
    cos = np.cos(angles)
    sin = np.sin(angles)
    even = vec[..., 0::2]
    odd = vec[..., 1::2]
    rot_even = even * cos - odd * sin
    rot_odd = even * sin + odd * cos
    return np.stack([rot_even, rot_odd], axis=-1).reshape(rot_even.shape[:-1] + (-1,))


def apply_rope_transpose(grad: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Backward of :func:`apply_rope`: rotate by the negated angles."""
    return apply_rope(grad, -np.asarray(angles))


def grid_coords(grid: GridDims) -> np.ndarray:
    """Row-major (t, y, x) coordinates of every token of ``grid``, shape (N, 3)."""
    t, y, x = np.meshgrid(np.arange(grid.t), np.arange(grid.h), np.arange(grid.w), indexing="ij")
    return np.stack([t.ravel(), y.ravel(), x.ravel()], axis=-1)

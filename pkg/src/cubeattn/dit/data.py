"""Desk-scale synthetic videos: a Gaussian blob drifting at constant velocity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..latent_grid import GridDims


@dataclass(frozen=True)
class SyntheticSample:
    detail: np.ndarray  # (T, H, W, D)
    proxy: np.ndarray  # (t, h, w, D), exact block mean of ``detail``
    prompt_id: int


def block_mean(video: np.ndarray, factors) -> np.ndarray:
    """Average non-overlapping ``(ft, fy, fx)`` blocks of a (T, H, W, D) tensor."""
    T, H, W, D = video.shape
    ft, fy, fx = (int(f) for f in factors)
    if T % ft or H % fy or W % fx:
        raise ValueError(f"video {video.shape[:3]} not divisible by block {factors}")
    v = video.reshape(T // ft, ft, H // fy, fy, W // fx, fx, D)
    return v.mean(axis=(1, 3, 5))


def downsample_factors(grid: GridDims, proxy_grid: GridDims) -> tuple[int, int, int]:
    g, p = grid.as_tuple(), proxy_grid.as_tuple()
    if any(a % b for a, b in zip(g, p)):
        raise ValueError(f"grid {g} is not divisible by proxy grid {p}")
    return tuple(a // b for a, b in zip(g, p))  # type: ignore[return-value]


def channel_offsets(channels: int) -> np.ndarray:
    return 0.5 * (np.arange(channels, dtype=np.float64) - (channels - 1) / 2)


def _blob_video(rng, grid: GridDims, channels: int, prompt_id: int, n_prompts: int,
                amp_range=(1.5, 2.5), sigma_frac=0.25) -> np.ndarray:
    T, H, W = grid.as_tuple()
    # the prompt fixes the drift direction; speed, start and amplitude are free
    angle = 2 * np.pi * prompt_id / n_prompts
    speed = rng.uniform(0.5, 1.0) * min(H, W) / (2 * T)
    vy, vx = speed * np.sin(angle), speed * np.cos(angle)
    cy = H / 2 - vy * T / 2 + rng.uniform(-0.15, 0.15) * H
    cx = W / 2 - vx * T / 2 + rng.uniform(-0.15, 0.15) * W
    sigma = sigma_frac * min(H, W)
    amp = rng.uniform(*amp_range)
    t = np.arange(T)[:, None, None]
    y = np.arange(H)[None, :, None]
    x = np.arange(W)[None, None, :]
    d2 = (y - (cy + vy * t)) ** 2 + (x - (cx + vx * t)) ** 2
    blob = amp * np.exp(-d2 / (2 * sigma ** 2))
    return blob[..., None] + channel_offsets(channels)


def make_synthetic_dataset(
    seed: int,
    grid: GridDims,
    proxy_grid: GridDims,
    count: int,
    channels: int = 4,
    n_prompts: int = 4,
    amp_range: tuple[float, float] = (1.5, 2.5),
    sigma_frac: float = 0.25,
) -> list[SyntheticSample]:
    factors = downsample_factors(grid, proxy_grid)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        prompt = int(rng.integers(n_prompts))
        detail = _blob_video(rng, grid, channels, prompt, n_prompts, amp_range, sigma_frac)
        out.append(SyntheticSample(detail, block_mean(detail, factors), prompt))
    return out


def text_tokens(prompt_id: int, n_text: int, dim: int) -> np.ndarray:
    """Fixed random text-token matrix for ``prompt_id`` (stands in for a text encoder)."""
    rng = np.random.default_rng([0x7E47, int(prompt_id), n_text, dim])
    return rng.standard_normal((n_text, dim))

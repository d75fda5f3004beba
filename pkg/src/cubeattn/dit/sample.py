"""Euler sampler for the learned velocity field, with optional CFG."""
from __future__ import annotations

import numpy as np

from .data import text_tokens
from .model import ToyDiT


def sample_euler(
    model: ToyDiT,
    steps: int,
    cfg_scale: float | None = None,
    proxy: np.ndarray | None = None,
    seed: int = 0,
    prompt_id: int = 0,
) -> np.ndarray:
    """Integrate from ``eps`` at ``tau = 1`` to ``tau = 0`` with uniform Euler steps.

    ``cfg_scale=None`` disables guidance and evaluates only the conditional
    branch. Otherwise the unconditional branch drops the proxy and uses the
    null text embedding, and the two are mixed as ``v_u + s (v_c - v_u)``.
    A scale of exactly 1 reduces to ``v_c`` and skips the unconditional
    branch. Noise is the only random draw. Returns a (T, H, W, D) latent.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = model.config
    shape = cfg.grid.as_tuple() + (cfg.channels,)
    eps = np.random.default_rng([int(seed), 2]).standard_normal(shape)
    x = model.reorder(eps)
    g = model.flat_proxy(proxy)
    txt = text_tokens(prompt_id, cfg.n_text, cfg.dim)
    guided = cfg_scale is not None and cfg_scale != 1.0
    dt = 1.0 / steps
    for i in range(steps):
        tau = 1.0 - i * dt
        v, _ = model.forward(x, g, txt, tau)
        if guided:
            v_u, _ = model.forward(x, None, None, tau)
            v = v_u + cfg_scale * (v - v_u)
        x = x - dt * v
    return model.unorder(x).reshape(shape)

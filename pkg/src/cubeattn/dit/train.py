"""Rectified-flow training for both pipeline stages.

Path ``x_tau = (1 - tau) x0 + tau eps`` with target velocity ``eps - x0``;
``tau`` is uniform on [0, 1]. Everything random is drawn from generators
seeded by the caller, in a fixed order, so runs are reproducible.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import SyntheticSample, text_tokens
from .layers import Adam
from .model import ToyDiT, ToyDiTConfig, ffn_param_names, init_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowItem:
    """One training example in model layout."""

    x0: np.ndarray  # (N, D) cube-reordered
    proxy: np.ndarray | None  # (n, D) or None
    text: np.ndarray


@dataclass(frozen=True)
class FlowState:
    x0: np.ndarray
    eps: np.ndarray
    tau: float
    proxy: np.ndarray | None
    text: np.ndarray | None

    @property
    def x_tau(self) -> np.ndarray:
        return (1.0 - self.tau) * self.x0 + self.tau * self.eps

    @property
    def velocity(self) -> np.ndarray:
        return self.eps - self.x0


@dataclass
class TrainResult:
    weights: dict[str, np.ndarray]
    loss_trace: list[float] = field(default_factory=list)
    initial_eval: float = float("nan")
    final_eval: float = float("nan")


def make_items(model: ToyDiT, samples: Sequence[SyntheticSample], stage: int) -> list[FlowItem]:
    cfg = model.config
    items = []
    for s in samples:
        txt = text_tokens(s.prompt_id, cfg.n_text, cfg.dim)
        if stage == 1:
            items.append(FlowItem(model.reorder(s.proxy), None, txt))
        else:
            items.append(FlowItem(model.reorder(s.detail), model.flat_proxy(s.proxy), txt))
    return items


def loss_and_grads(model: ToyDiT, states: Sequence[FlowState], need_grads: bool = True):
    """Mean squared velocity error over detail tokens and the batch."""
    if not states:
        raise ValueError("empty batch")
    total = 0.0
    grads = None
    for st in states:
        pred, cache = model.forward(st.x_tau, st.proxy, st.text, st.tau)
        err = pred - st.velocity
        total += float(np.mean(err * err))
        if need_grads:
            g = model.backward(cache, 2.0 * err / (err.size * len(states)))
            if grads is None:
                grads = g
            else:
                for k in grads:
                    grads[k] += g[k]
    return total / len(states), grads


def draw_states(model: ToyDiT, batch: Sequence[FlowItem], rng: np.random.Generator, drop: bool = True) -> list[FlowState]:
    cfg = model.config
    states = []
    for item in batch:
        tau = float(rng.uniform())
        eps = rng.standard_normal(item.x0.shape)
        drop_proxy, drop_text = rng.uniform(size=2)
        proxy = item.proxy
        if drop and drop_proxy < cfg.p_drop_proxy:
            proxy = None
        text = None if drop and drop_text < cfg.p_drop_text else item.text
        states.append(FlowState(item.x0, eps, tau, proxy, text))
    return states


def flow_match_loss(model: ToyDiT, batch: Sequence[FlowItem], rng: np.random.Generator):
    """Draw ``tau`` and ``eps`` for every item, return ``(loss, grads)``."""
    return loss_and_grads(model, draw_states(model, batch, rng))


def eval_loss(model: ToyDiT, items: Sequence[FlowItem], seed: int = 1234, n_tau: int = 4) -> float:
    """Flow loss on fixed, stratified ``tau`` values with full conditioning."""
    rng = np.random.default_rng([int(seed), 7])
    states = []
    for item in items:
        for j in range(n_tau):
            eps = rng.standard_normal(item.x0.shape)
            states.append(FlowState(item.x0, eps, (j + 0.5) / n_tau, item.proxy, item.text))
    return loss_and_grads(model, states, need_grads=False)[0]


def train(
    model: ToyDiT,
    items: Sequence[FlowItem],
    steps: int,
    seed: int,
    eval_items: Sequence[FlowItem] | None = None,
    frozen: frozenset[str] = frozenset(),
) -> TrainResult:
    cfg = model.config
    rng = np.random.default_rng([int(seed), 1])
    opt = Adam(cfg.lr, cfg.betas, cfg.adam_eps)
    eval_items = list(eval_items) if eval_items is not None else list(items)
    result = TrainResult(weights=model.params)
    result.initial_eval = eval_loss(model, eval_items)
    for step in range(steps):
        idx = rng.choice(len(items), size=min(cfg.batch_size, len(items)), replace=False)
        loss, grads = flow_match_loss(model, [items[i] for i in idx], rng)
        opt.step(model.params, grads, frozen)
        result.loss_trace.append(loss)
        if step % 50 == 0:
            log.info("step %d loss %.5f", step, loss)
    result.final_eval = eval_loss(model, eval_items) if steps else result.initial_eval
    return result


def _copy(weights):
    return {k: np.array(v, copy=True) for k, v in weights.items()}


def train_stage1(
    config: ToyDiTConfig,
    dataset: Sequence[SyntheticSample],
    steps: int,
    seed: int,
    r_t: float = 4.0,
    eval_dataset: Sequence[SyntheticSample] | None = None,
    init: dict[str, np.ndarray] | None = None,
    backend: str | None = None,
) -> TrainResult:
    """Train the proxy generator: proxy tokens only, temporal RoPE dilated by ``r_t``."""
    cfg1 = config.stage1(r_t) if config.proxy_grid is not None else config
    weights = _copy(init) if init is not None else init_weights(cfg1, seed)
    model = ToyDiT(cfg1, weights, backend=backend)
    items = make_items(model, dataset, stage=1)
    eval_items = make_items(model, eval_dataset, stage=1) if eval_dataset else None
    return train(model, items, steps, seed, eval_items)


def train_stage2(
    config: ToyDiTConfig,
    dataset: Sequence[SyntheticSample],
    steps: int,
    seed: int,
    eval_dataset: Sequence[SyntheticSample] | None = None,
    init: dict[str, np.ndarray] | None = None,
    backend: str | None = None,
) -> TrainResult:
    """Train the joint model; proxy tokens stay clean, only detail tokens are noised."""
    if config.proxy_grid is None:
        raise ValueError("stage 2 needs a proxy grid")
    weights = _copy(init) if init is not None else init_weights(config, seed)
    model = ToyDiT(config, weights, backend=backend)
    items = make_items(model, dataset, stage=2)
    eval_items = make_items(model, eval_dataset, stage=2) if eval_dataset else None
    frozen = frozenset(ffn_param_names(config)) if config.freeze_ffn else frozenset()
    return train(model, items, steps, seed, eval_items, frozen)


def with_policy(config: ToyDiTConfig, policy: str) -> ToyDiTConfig:
    return replace(config, policy=policy)

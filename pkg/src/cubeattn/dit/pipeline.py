"""The reference two-stage run used by the golden tests.

Stage 1 trains the temporally dilated proxy generator, stage 2 the joint
model. Two stage-2 ablations share the seed: ``policy="none"`` (detail rows
cannot see the proxy) and ``proxy_rope="unit"`` (proxy RoPE not rescaled onto
the detail grid). Sampling compares proxy-conditioned and proxy-free
generations against the held-out ground truth with identical noise.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import make_synthetic_dataset
from .model import ToyDiT, ToyDiTConfig
from .sample import sample_euler
from .train import TrainResult, train_stage1, train_stage2

GOLDEN_SEED = 0
DATASET_SIZE = 64
EVAL_SIZE = 8


@dataclass
class PipelineReport:
    stage1: TrainResult
    stage2: TrainResult
    ablations: dict[str, TrainResult] = field(default_factory=dict)
    mse_conditioned: list[float] = field(default_factory=list)
    mse_unconditioned: list[float] = field(default_factory=list)
    seconds: dict[str, float] = field(default_factory=dict)

    @staticmethod
    def ratio(res: TrainResult) -> float:
        return res.final_eval / res.initial_eval

    def summary(self) -> dict:
        out = {
            "stage1_initial": self.stage1.initial_eval,
            "stage1_final": self.stage1.final_eval,
            "stage2_initial": self.stage2.initial_eval,
            "stage2_final": self.stage2.final_eval,
            "mse_conditioned": float(np.mean(self.mse_conditioned)),
            "mse_unconditioned": float(np.mean(self.mse_unconditioned)),
        }
        for name, res in self.ablations.items():
            out[f"{name}_final"] = res.final_eval
        return out


def datasets(config: ToyDiTConfig, seed: int = GOLDEN_SEED):
    train = make_synthetic_dataset(seed, config.grid, config.proxy_grid, DATASET_SIZE, config.channels,
                                   config.n_prompts)
    held_out = make_synthetic_dataset(seed + 1, config.grid, config.proxy_grid, EVAL_SIZE, config.channels,
                                      config.n_prompts)
    return train, held_out


def run_pipeline(
    config: ToyDiTConfig | None = None,
    seed: int = GOLDEN_SEED,
    stage1_steps: int = 300,
    stage2_steps: int = 500,
    ablations: tuple[str, ...] = ("policy_none", "unit_rope"),
    sample_steps: int = 20,
    backend: str | None = None,
) -> PipelineReport:
    config = config or ToyDiTConfig()
    train, held_out = datasets(config, seed)
    seconds = {}

    t0 = time.perf_counter()
    s1 = train_stage1(config, train, stage1_steps, seed, eval_dataset=held_out, backend=backend)
    seconds["stage1"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    s2 = train_stage2(config, train, stage2_steps, seed, eval_dataset=held_out, backend=backend)
    seconds["stage2"] = time.perf_counter() - t0

    variants = {"policy_none": replace(config, policy="none"), "unit_rope": replace(config, proxy_rope="unit")}
    results = {}
    for name in ablations:
        t0 = time.perf_counter()
        results[name] = train_stage2(variants[name], train, stage2_steps, seed, eval_dataset=held_out,
                                     backend=backend)
        seconds[name] = time.perf_counter() - t0

    t0 = time.perf_counter()
    model = ToyDiT(config, s2.weights, backend=backend)
    cond, uncond = [], []
    for s in held_out:
        with_proxy = sample_euler(model, sample_steps, proxy=s.proxy, seed=seed, prompt_id=s.prompt_id)
        without = sample_euler(model, sample_steps, proxy=None, seed=seed, prompt_id=s.prompt_id)
        cond.append(float(np.mean((with_proxy - s.detail) ** 2)))
        uncond.append(float(np.mean((without - s.detail) ** 2)))
    seconds["sampling"] = time.perf_counter() - t0
    return PipelineReport(s1, s2, results, cond, uncond, seconds)

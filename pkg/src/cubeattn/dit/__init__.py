"""Toy two-stream diffusion transformer: model, rectified-flow training, Euler sampling."""
from .data import SyntheticSample, block_mean, make_synthetic_dataset, text_tokens
from .model import ToyDiT, ToyDiTConfig, dit_forward, ffn_param_names, init_weights
from .sample import sample_euler
from .train import FlowState, TrainResult, eval_loss, flow_match_loss, train_stage1, train_stage2

__all__ = [
    "FlowState",
    "SyntheticSample",
    "ToyDiT",
    "ToyDiTConfig",
    "TrainResult",
    "block_mean",
    "dit_forward",
    "eval_loss",
    "ffn_param_names",
    "flow_match_loss",
    "init_weights",
    "make_synthetic_dataset",
    "sample_euler",
    "text_tokens",
    "train_stage1",
    "train_stage2",
]

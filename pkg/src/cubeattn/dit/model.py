"""Two-stream toy diffusion transformer with manual reverse-mode gradients.

Token layout is ``[detail (cube-reordered); global (row-major proxy)]``.
Each layer runs pre-norm joint block-sparse self-attention under the
asymmetric mask, cross-attention from detail rows to text tokens, and an
FFN. Both streams share every weight. The velocity head reads detail rows.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import cached_property

import numpy as np

from .. import _pykernels
from ..attention import JointBlockMask, block_sparse_attention, block_sparse_attention_backward
from ..latent_grid import CubeDims, GridDims, build_partition
from ..rope3d import RopeParams, apply_rope, apply_rope_transpose, grid_coords, proxy_scale_factors, rope_angles
from . import layers as L

FFN_PARAMS = ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")


@dataclass(frozen=True)
class ToyDiTConfig:
    layers: int = 2
    head_dim: int = 16
    heads: int = 2
    ffn_mult: int = 4
    grid: GridDims = field(default_factory=lambda: GridDims(8, 8, 8))
    cube: CubeDims = field(default_factory=lambda: CubeDims(2, 4, 4))
    radius: int = 1
    n_text: int = 4
    channels: int = 4
    proxy_grid: GridDims | None = field(default_factory=lambda: GridDims(2, 4, 4))
    policy: str = "full"
    metric: str = "chebyshev"
    rope_base: float = 10000.0
    detail_rope_scales: tuple[float, float, float] = (1.0, 1.0, 1.0)
    proxy_rope: str = "scaled"  # "scaled" maps proxy coords onto the detail grid, "unit" does not
    n_prompts: int = 4
    time_dim: int = 32
    # optimisation
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 4
    freeze_ffn: bool = False
    p_drop_proxy: float = 0.1
    p_drop_text: float = 0.1

    def __post_init__(self):
        if self.head_dim % 2:
            raise ValueError("head_dim must be even")
        if not self.cube.fits(self.grid):
            raise ValueError("cube does not fit the grid")
        if self.proxy_rope not in ("scaled", "unit"):
            raise ValueError("proxy_rope must be 'scaled' or 'unit'")

    @property
    def dim(self) -> int:
        return self.head_dim * self.heads

    def stage1(self, r_t: float = 4.0) -> "ToyDiTConfig":
        """Proxy generator: proxy grid, full attention, temporal RoPE dilated by ``r_t``."""
        if self.proxy_grid is None:
            raise ValueError("stage 1 needs a proxy grid")
        g = self.proxy_grid
        return replace(
            self,
            grid=g,
            cube=CubeDims(*g.as_tuple()),
            proxy_grid=None,
            detail_rope_scales=(float(r_t), 1.0, 1.0),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid.as_tuple())
        d["cube"] = list(self.cube.as_tuple())
        d["proxy_grid"] = list(self.proxy_grid.as_tuple()) if self.proxy_grid else None
        d["detail_rope_scales"] = list(self.detail_rope_scales)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDiTConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "grid" in d:
            d["grid"] = GridDims(*d["grid"])
        if "cube" in d:
            d["cube"] = CubeDims(*d["cube"])
        if d.get("proxy_grid") is not None:
            d["proxy_grid"] = GridDims(*d["proxy_grid"])
        for key in ("detail_rope_scales", "betas"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


def init_weights(config: ToyDiTConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform projections, zero output head, unit LayerNorm gains."""
    rng = np.random.default_rng([int(seed), 0])
    C, D, F = config.dim, config.channels, config.time_dim
    H = C * config.ffn_mult

    def lin(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    w = {
        "in_w": lin(D, C), "in_b": np.zeros(C),
        "t_w1": lin(F, C), "t_b1": np.zeros(C),
        "t_w2": lin(C, C), "t_b2": np.zeros(C),
        "null_text": np.zeros((config.n_text, C)),
    }
    for i in range(config.layers):
        p = f"l{i}."
        w |= {
            p + "ln1_g": np.ones(C), p + "ln1_b": np.zeros(C),
            p + "wq": lin(C, C), p + "wk": lin(C, C), p + "wv": lin(C, C),
            p + "wo": lin(C, C), p + "bo": np.zeros(C),
            p + "ln2_g": np.ones(C), p + "ln2_b": np.zeros(C),
            p + "cq": lin(C, C), p + "ck": lin(C, C), p + "cv": lin(C, C),
            p + "co": lin(C, C), p + "cbo": np.zeros(C),
            p + "ln3_g": np.ones(C), p + "ln3_b": np.zeros(C),
            p + "ffn_w1": lin(C, H), p + "ffn_b1": np.zeros(H),
            p + "ffn_w2": lin(H, C), p + "ffn_b2": np.zeros(C),
        }
    w |= {
        "out_ln_g": np.ones(C), "out_ln_b": np.zeros(C),
        "out_w": np.zeros((C, D)), "out_b": np.zeros(D),
    }
    return dict(sorted(w.items()))


def ffn_param_names(config: ToyDiTConfig) -> list[str]:
    return [f"l{i}.{n}" for i in range(config.layers) for n in FFN_PARAMS]


class ToyDiT:
    """Holds weights plus the precomputed masks and RoPE angles for one config."""

    def __init__(self, config: ToyDiTConfig, weights: dict[str, np.ndarray] | None = None, seed: int = 0,
                 backend: str | None = None):
        self.config = config
        self.params = weights if weights is not None else init_weights(config, seed)
        self.backend = backend

    @cached_property
    def partition(self):
        return build_partition(self.config.grid, self.config.cube)

    @property
    def n_detail(self) -> int:
        return self.config.grid.n_tokens

    @property
    def n_global(self) -> int:
        return self.config.proxy_grid.n_tokens if self.config.proxy_grid else 0

    @cached_property
    def rope(self) -> RopeParams:
        return RopeParams(self.config.head_dim, base=self.config.rope_base)

    @cached_property
    def proxy_scales(self) -> tuple[float, float, float]:
        if self.config.proxy_rope == "unit" or self.config.proxy_grid is None:
            return (1.0, 1.0, 1.0)
        return proxy_scale_factors(self.config.proxy_grid, self.config.grid)

    @cached_property
    def detail_angles(self) -> np.ndarray:
        params = self.rope.with_scales(self.config.detail_rope_scales)
        return rope_angles(params, self.partition.reordered_coords())

    @cached_property
    def global_angles(self) -> np.ndarray:
        params = self.rope.with_scales(self.proxy_scales)
        return rope_angles(params, grid_coords(self.config.proxy_grid))

    @cached_property
    def joint_angles(self) -> np.ndarray:
        return np.concatenate([self.detail_angles, self.global_angles])

    @cached_property
    def mask_joint(self) -> JointBlockMask:
        c = self.config
        return JointBlockMask(self.partition, self.n_global, c.radius, c.policy, c.metric)

    @cached_property
    def mask_detail(self) -> JointBlockMask:
        c = self.config
        return JointBlockMask(self.partition, 0, c.radius, c.policy, c.metric)

    # forward / backward ------------------------------------------------------

    def forward(self, x_detail, x_global, text, tau: float, keep_acts: bool = False):
        """Velocity for reordered detail tokens.

        ``x_detail`` is (N, D) in cube-reordered order, ``x_global`` is (n, D)
        or ``None``; ``text`` is (n_text, dim) or ``None`` for the learned
        null embedding. Returns ``(velocity, cache)``.
        """
        P, cfg = self.params, self.config
        N = self.n_detail
        x_detail = np.asarray(x_detail, dtype=np.float64)
        if x_detail.shape != (N, cfg.channels):
            raise ValueError(f"x_detail shape {x_detail.shape} != {(N, cfg.channels)}")
        has_global = x_global is not None
        if has_global:
            x_global = np.asarray(x_global, dtype=np.float64)
            if x_global.shape != (self.n_global, cfg.channels):
                raise ValueError(f"x_global shape {x_global.shape} != {(self.n_global, cfg.channels)}")
            x = np.concatenate([x_detail, x_global])
            mask, angles = self.mask_joint, self.joint_angles
        else:
            x = x_detail
            mask, angles = self.mask_detail, self.detail_angles
        null_text = text is None
        txt = P["null_text"] if null_text else np.asarray(text, dtype=np.float64)
        if txt.shape != (cfg.n_text, cfg.dim):
            raise ValueError(f"text shape {txt.shape} != {(cfg.n_text, cfg.dim)}")

        h = x @ P["in_w"] + P["in_b"]
        temb_in = L.timestep_embedding(tau, cfg.time_dim)
        t1 = temb_in @ P["t_w1"] + P["t_b1"]
        t1a, t1sig = L.silu(t1)
        temb = t1a @ P["t_w2"] + P["t_b2"]
        h = h + temb

        acts = [h] if keep_acts else None
        layer_caches = []
        for i in range(cfg.layers):
            p = f"l{i}."
            lc = {}
            a, lc["ln1"] = L.layer_norm(h, P[p + "ln1_g"], P[p + "ln1_b"])
            lc["a"] = a
            q = L.split_heads(a @ P[p + "wq"], cfg.heads)
            k = L.split_heads(a @ P[p + "wk"], cfg.heads)
            v = L.split_heads(a @ P[p + "wv"], cfg.heads)
            qr = np.ascontiguousarray(apply_rope(q, angles[None]))
            kr = np.ascontiguousarray(apply_rope(k, angles[None]))
            o, lse = block_sparse_attention(qr, kr, v, mask, return_lse=True, backend=self.backend)
            lc.update(qr=qr, kr=kr, v=v, o=o, lse=lse)
            o2 = L.merge_heads(o)
            lc["o2"] = o2
            h = h + o2 @ P[p + "wo"] + P[p + "bo"]
            if keep_acts:
                acts.append(h)

            c, lc["ln2"] = L.layer_norm(h[:N], P[p + "ln2_g"], P[p + "ln2_b"])
            lc["c"] = c
            cq = L.split_heads(c @ P[p + "cq"], cfg.heads)
            ck = L.split_heads(txt @ P[p + "ck"], cfg.heads)
            cv = L.split_heads(txt @ P[p + "cv"], cfg.heads)
            scale = cfg.head_dim ** -0.5
            co, clse = [], []
            for hh in range(cfg.heads):
                oh, lh = _pykernels.attend(cq[hh], ck[hh], cv[hh], scale)
                co.append(oh)
                clse.append(lh)
            co, clse = np.stack(co), np.stack(clse)
            lc.update(cq=cq, ck=ck, cv=cv, co=co, clse=clse)
            co2 = L.merge_heads(co)
            lc["co2"] = co2
            h = h.copy()
            h[:N] += co2 @ P[p + "co"] + P[p + "cbo"]
            if keep_acts:
                acts.append(h)

            f, lc["ln3"] = L.layer_norm(h, P[p + "ln3_g"], P[p + "ln3_b"])
            u = f @ P[p + "ffn_w1"] + P[p + "ffn_b1"]
            g, th = L.gelu(u)
            lc.update(f=f, u=u, g=g, th=th)
            h = h + g @ P[p + "ffn_w2"] + P[p + "ffn_b2"]
            if keep_acts:
                acts.append(h)
            layer_caches.append(lc)

        y, ln_out = L.layer_norm(h[:N], P["out_ln_g"], P["out_ln_b"])
        out = y @ P["out_w"] + P["out_b"]
        cache = dict(
            x=x, txt=txt, null_text=null_text, mask=mask, angles=angles, temb_in=temb_in,
            t1=t1, t1a=t1a, t1sig=t1sig, layers=layer_caches, y=y, ln_out=ln_out, L=x.shape[0], acts=acts,
        )
        return out, cache

    def backward(self, cache, dout) -> dict[str, np.ndarray]:
        P, cfg = self.params, self.config
        N = self.n_detail
        grads = {name: np.zeros_like(v) for name, v in P.items()}
        mask, angles, txt = cache["mask"], cache["angles"], cache["txt"]

        grads["out_w"] += cache["y"].T @ dout
        grads["out_b"] += dout.sum(axis=0)
        dy = dout @ P["out_w"].T
        dhn, dg, db = L.layer_norm_backward(dy, cache["ln_out"])
        grads["out_ln_g"] += dg
        grads["out_ln_b"] += db
        dh = np.zeros((cache["L"], cfg.dim))
        dh[:N] = dhn
        dtxt = np.zeros_like(txt)
        scale = cfg.head_dim ** -0.5

        for i in reversed(range(cfg.layers)):
            p = f"l{i}."
            lc = cache["layers"][i]
            # FFN
            grads[p + "ffn_w2"] += lc["g"].T @ dh
            grads[p + "ffn_b2"] += dh.sum(axis=0)
            du = L.gelu_backward(dh @ P[p + "ffn_w2"].T, lc["u"], lc["th"])
            grads[p + "ffn_w1"] += lc["f"].T @ du
            grads[p + "ffn_b1"] += du.sum(axis=0)
            dx, dg, db = L.layer_norm_backward(du @ P[p + "ffn_w1"].T, lc["ln3"])
            grads[p + "ln3_g"] += dg
            grads[p + "ln3_b"] += db
            dh = dh + dx

            # cross-attention (detail rows only)
            dhd = dh[:N]
            grads[p + "co"] += lc["co2"].T @ dhd
            grads[p + "cbo"] += dhd.sum(axis=0)
            dco = L.split_heads(dhd @ P[p + "co"].T, cfg.heads)
            dcq = np.empty_like(lc["cq"])
            dck = np.empty_like(lc["ck"])
            dcv = np.empty_like(lc["cv"])
            for hh in range(cfg.heads):
                dcq[hh], dck[hh], dcv[hh] = _pykernels.attend_backward(
                    lc["cq"][hh], lc["ck"][hh], lc["cv"][hh], lc["co"][hh], lc["clse"][hh], dco[hh], scale
                )
            dcq2, dck2, dcv2 = L.merge_heads(dcq), L.merge_heads(dck), L.merge_heads(dcv)
            grads[p + "cq"] += lc["c"].T @ dcq2
            grads[p + "ck"] += txt.T @ dck2
            grads[p + "cv"] += txt.T @ dcv2
            dtxt += dck2 @ P[p + "ck"].T + dcv2 @ P[p + "cv"].T
            dx, dg, db = L.layer_norm_backward(dcq2 @ P[p + "cq"].T, lc["ln2"])
            grads[p + "ln2_g"] += dg
            grads[p + "ln2_b"] += db
            dh = dh.copy()
            dh[:N] += dx

            # joint self-attention
            grads[p + "wo"] += lc["o2"].T @ dh
            grads[p + "bo"] += dh.sum(axis=0)
            do = L.split_heads(dh @ P[p + "wo"].T, cfg.heads)
            dqr, dkr, dv = block_sparse_attention_backward(
                lc["qr"], lc["kr"], lc["v"], lc["o"], lc["lse"], do, mask, backend=self.backend
            )
            dq = L.merge_heads(apply_rope_transpose(dqr, angles[None]))
            dk = L.merge_heads(apply_rope_transpose(dkr, angles[None]))
            dv = L.merge_heads(dv)
            a = lc["a"]
            grads[p + "wq"] += a.T @ dq
            grads[p + "wk"] += a.T @ dk
            grads[p + "wv"] += a.T @ dv
            da = dq @ P[p + "wq"].T + dk @ P[p + "wk"].T + dv @ P[p + "wv"].T
            dx, dg, db = L.layer_norm_backward(da, lc["ln1"])
            grads[p + "ln1_g"] += dg
            grads[p + "ln1_b"] += db
            dh = dh + dx

        dtemb = dh.sum(axis=0)
        grads["t_w2"] += np.outer(cache["t1a"], dtemb)
        grads["t_b2"] += dtemb
        dt1 = L.silu_backward(dtemb @ P["t_w2"].T, cache["t1"], cache["t1sig"])
        grads["t_w1"] += np.outer(cache["temb_in"], dt1)
        grads["t_b1"] += dt1
        grads["in_w"] += cache["x"].T @ dh
        grads["in_b"] += dh.sum(axis=0)
        if cache["null_text"]:
            grads["null_text"] += dtxt
        return grads

    # convenience ---------------------------------------------------------------

    def reorder(self, video: np.ndarray) -> np.ndarray:
        """(T, H, W, D) video -> (N, D) cube-reordered tokens."""
        return np.asarray(video).reshape(self.n_detail, -1)[self.partition.perm]

    def unorder(self, tokens: np.ndarray) -> np.ndarray:
        """(N, D) reordered tokens -> (N, D) row-major tokens."""
        return np.asarray(tokens)[self.partition.inv_perm]

    def flat_proxy(self, proxy: np.ndarray | None) -> np.ndarray | None:
        return None if proxy is None else np.asarray(proxy, dtype=np.float64).reshape(self.n_global, -1)


def dit_forward(
    weights: dict[str, np.ndarray],
    config: ToyDiTConfig,
    x_detail_noisy: np.ndarray,
    x_global_clean: np.ndarray | None,
    text_tokens: np.ndarray | None,
    tau: float,
    backend: str | None = None,
) -> np.ndarray:
    """Predicted detail velocity in row-major token order.

    ``x_detail_noisy`` is (T, H, W, D) or row-major (N, D); the proxy is
    (t, h, w, D), (n, D) or ``None`` for the unconditional stream. Returns
    (N, D) rows in row-major (t, y, x) order.
    """
    model = ToyDiT(config, weights, backend=backend)
    x = np.asarray(x_detail_noisy, dtype=np.float64)
    if x.size != model.n_detail * config.channels:
        raise ValueError(f"x_detail has {x.size} values, expected {model.n_detail * config.channels}")
    g = None
    if x_global_clean is not None:
        g = np.asarray(x_global_clean, dtype=np.float64)
        if g.size != model.n_global * config.channels:
            raise ValueError(f"x_global has {g.size} values, expected {model.n_global * config.channels}")
        g = g.reshape(model.n_global, config.channels)
    out, _ = model.forward(model.reorder(x.reshape(model.n_detail, config.channels)), g, text_tokens, tau)
    return model.unorder(out)

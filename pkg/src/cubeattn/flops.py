"""Closed-form attention cost model.

Convention: one multiply-accumulate is 2 FLOPs; softmax and normalisation
are excluded from every count, dense and sparse alike. ``d_total`` is
``head_dim * heads``.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .latent_grid import CubeDims, GridDims

REFERENCE_MAX_RATIO = 1208.2
CSV_COLUMNS = ("name", "N", "n_global", "dense_flops", "local_flops", "ratio")
CONVENTION = "2 FLOPs per MAC; QK^T and PV only; softmax excluded on both sides"


@dataclass(frozen=True)
class CostConfig:
    name: str
    grid: GridDims
    cube: CubeDims
    radius: int = 1
    n_global: int = 0
    head_dim: int = 128
    heads: int = 1
    detail_to_global: str = "full"
    metric: str = "chebyshev"
    assumptions: str = ""

    @property
    def d_total(self) -> int:
        return self.head_dim * self.heads


@dataclass(frozen=True)
class FlopsReport:
    name: str
    n_tokens: int
    n_global: int
    dense_flops: float
    local_flops: float
    terms: dict = field(default_factory=dict)
    assumptions: str = ""

    @property
    def ratio(self) -> float:
        return self.dense_flops / self.local_flops

    def csv_row(self) -> list:
        return [self.name, self.n_tokens, self.n_global, _num(self.dense_flops), _num(self.local_flops), f"{self.ratio:.6g}"]


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def dense_attention_flops(n_tokens: int, d_total: int) -> int:
    """``4 N^2 d``: ``2 N^2 d`` for the scores plus ``2 N^2 d`` for the weighted sum."""
    if n_tokens <= 0 or d_total <= 0:
        raise ValueError("N and d must be positive")
    return 4 * int(n_tokens) ** 2 * int(d_total)


def _axis_extents(n: int, c: int) -> np.ndarray:
    full, rest = divmod(n, c)
    return np.array([c] * full + ([rest] if rest else []), dtype=np.int64)


def detail_key_visits(grid: GridDims, cube: CubeDims, radius: int, metric: str = "chebyshev") -> int:
    """Sum over detail queries of the detail keys they see.

    Evaluated on the cube grid: every cube contributes
    ``size(c) * sum(size(c') for c' adjacent to c)``, clipped border cubes
    included.
    """
    et = _axis_extents(grid.t, cube.ct)
    ey = _axis_extents(grid.h, cube.ch)
    ex = _axis_extents(grid.w, cube.cw)
    sizes = et[:, None, None] * ey[None, :, None] * ex[None, None, :]
    padded = np.pad(sizes, radius)
    total = 0
    for off in itertools.product(range(-radius, radius + 1), repeat=3):
        dist = max(map(abs, off)) if metric == "chebyshev" else sum(map(abs, off))
        if dist > radius:
            continue
        a, b, c = (radius + o for o in off)
        shifted = padded[a:a + sizes.shape[0], b:b + sizes.shape[1], c:c + sizes.shape[2]]
        total += int(np.sum(sizes * shifted))
    return total


def local_attention_flops(cfg: CostConfig) -> int:
    return sum(local_attention_terms(cfg).values())


def local_attention_terms(cfg: CostConfig) -> dict[str, int]:
    d = cfg.d_total
    visits = detail_key_visits(cfg.grid, cfg.cube, cfg.radius, cfg.metric)
    n, g = cfg.grid.n_tokens, cfg.n_global
    return {
        "detail_scores": 2 * d * visits,
        "detail_weighted_sum": 2 * d * visits,
        "detail_to_global": 4 * d * n * g if cfg.detail_to_global == "full" else 0,
        "global_block": 4 * d * g * g,
    }


def stage1_cost_ratio(r_t: float) -> float:
    """Self-attention cost of a full-rate clip over its duration-matched ``r_t``-dilated proxy.

    Both sequences cover the same duration; the full-rate one has ``r_t``
    times as many frames, so the quadratic score term grows by ``r_t**2``.
    """
    if r_t < 1:
        raise ValueError("r_t must be >= 1")
    return float(r_t) ** 2


def report(cfg: CostConfig) -> FlopsReport:
    terms = local_attention_terms(cfg)
    return FlopsReport(
        name=cfg.name,
        n_tokens=cfg.grid.n_tokens,
        n_global=cfg.n_global,
        dense_flops=dense_attention_flops(cfg.grid.n_tokens, cfg.d_total),
        local_flops=sum(terms.values()),
        terms=terms,
        assumptions=cfg.assumptions,
    )


def flops_table(configs: Sequence[CostConfig]) -> list[FlopsReport]:
    if not configs:
        raise ValueError("no configurations given")
    return [report(c) for c in configs]


def stage1_sweep(r_max: int, proxy_tokens: int, d_total: int) -> list[FlopsReport]:
    """Rows for ``r_t = 1..r_max``: full-rate sequence (dense) vs dilated proxy (local)."""
    rows = []
    for r in range(1, r_max + 1):
        rows.append(
            FlopsReport(
                name=f"stage1-rt{r}",
                n_tokens=r * proxy_tokens,
                n_global=0,
                dense_flops=dense_attention_flops(r * proxy_tokens, d_total),
                local_flops=dense_attention_flops(proxy_tokens, d_total),
                assumptions=f"full-rate clip of {r}x the proxy frames vs the proxy itself",
            )
        )
    return rows


def to_csv(rows: Iterable[FlopsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.csv_row())
    return buf.getvalue()


def closest_to_reference(rows: Sequence[FlopsReport]) -> tuple[FlopsReport, float]:
    best = min(rows, key=lambda r: abs(r.ratio - REFERENCE_MAX_RATIO))
    return best, REFERENCE_MAX_RATIO - best.ratio


# presets ---------------------------------------------------------------------

def video_to_tokens(width: int, height: int, frames: int, spatial: int = 16, temporal: int = 4) -> GridDims:
    """Pixel video -> post-patchify token grid (spatial ``//16``, temporal ``(F-1)//4 + 1``)."""
    return GridDims((frames - 1) // temporal + 1, height // spatial, width // spatial)


def _config_from_entry(entry: dict) -> CostConfig:
    known = {
        "name", "grid", "video", "proxy", "proxy_grid", "n_global", "cube", "radius",
        "head_dim", "heads", "detail_to_global", "metric", "assumptions",
    }
    unknown = set(entry) - known
    if unknown:
        raise ValueError(f"unknown preset keys {sorted(unknown)}")
    if "grid" in entry:
        grid = GridDims(*entry["grid"])
        notes = []
    else:
        grid = video_to_tokens(*entry["video"])
        notes = ["video {}x{}x{}f -> tokens (t,h,w)={} via //16 spatial, (F-1)//4+1 temporal".format(
            *entry["video"], grid.as_tuple())]
    if "n_global" in entry:
        n_global = int(entry["n_global"])
    elif "proxy_grid" in entry:
        n_global = GridDims(*entry["proxy_grid"]).n_tokens
    elif "proxy" in entry:
        pg = video_to_tokens(*entry["proxy"])
        n_global = pg.n_tokens
        notes.append("proxy {}x{}x{}f -> {} = {} tokens".format(*entry["proxy"], pg.as_tuple(), n_global))
    else:
        n_global = 0
    if entry.get("assumptions"):
        notes.append(entry["assumptions"])
    return CostConfig(
        name=entry["name"],
        grid=grid,
        cube=CubeDims(*entry.get("cube", (4, 8, 8))),
        radius=int(entry.get("radius", 1)),
        n_global=n_global,
        head_dim=int(entry.get("head_dim", 128)),
        heads=int(entry.get("heads", 1)),
        detail_to_global=entry.get("detail_to_global", "full"),
        metric=entry.get("metric", "chebyshev"),
        assumptions="; ".join(notes),
    )


def load_presets(path: str | Path | None = None) -> list[CostConfig]:
    if path is None:
        text = resources.files("cubeattn").joinpath("data/flops_presets.json").read_text()
    else:
        text = Path(path).read_text()
    entries = json.loads(text)
    if not isinstance(entries, list):
        raise ValueError("preset file must hold a JSON list")
    return [_config_from_entry(e) for e in entries]

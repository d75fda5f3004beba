import json

import numpy as np
import pytest

from cubeattn.attention import MacCounter, block_sparse_attention, build_joint_mask, materialize_mask
from cubeattn.check import random_attention_config
from cubeattn.flops import (
    CSV_COLUMNS,
    REFERENCE_MAX_RATIO,
    CostConfig,
    closest_to_reference,
    dense_attention_flops,
    detail_key_visits,
    flops_table,
    load_presets,
    local_attention_flops,
    local_attention_terms,
    report,
    stage1_cost_ratio,
    stage1_sweep,
    to_csv,
    video_to_tokens,
)
from cubeattn.latent_grid import CubeDims, GridDims, build_partition


def separable_visits(grid, cube, radius):
    """Chebyshev neighbourhoods factor per axis, so the visit sum is a product."""
    total = 1
    for n, c in zip(grid, cube):
        ext = [min(c, n - i) for i in range(0, n, c)]
        total *= sum(e * sum(ext[max(0, i - radius):i + radius + 1]) for i, e in enumerate(ext))
    return total


class TestDense:
    def test_unit(self):
        assert dense_attention_flops(1, 1) == 4

    def test_example(self):
        assert dense_attention_flops(16, 2) == 2048

    def test_quadratic(self):
        assert dense_attention_flops(200, 8) == 4 * dense_attention_flops(100, 8)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            dense_attention_flops(0, 4)


class TestLocal:
    def test_single_cube_equals_dense(self):
        cfg = CostConfig("one", GridDims(2, 4, 4), CubeDims(2, 4, 4), radius=1, head_dim=8, heads=2)
        assert local_attention_flops(cfg) == dense_attention_flops(32, 16)

    def test_example(self):
        cfg = CostConfig("ex", GridDims(2, 2, 4), CubeDims(1, 2, 2), radius=0, head_dim=2)
        assert local_attention_flops(cfg) == 512

    def test_radius_monotone(self):
        values = [
            local_attention_flops(CostConfig("r", GridDims(5, 9, 7), CubeDims(2, 2, 3), radius=r, n_global=3))
            for r in range(5)
        ]
        assert values == sorted(values)

    def test_terms_nonnegative_and_sum(self):
        cfg = CostConfig("t", GridDims(3, 5, 5), CubeDims(2, 2, 2), n_global=4, head_dim=4, heads=3)
        terms = local_attention_terms(cfg)
        assert set(terms) == {"detail_scores", "detail_weighted_sum", "detail_to_global", "global_block"}
        assert all(v >= 0 for v in terms.values())
        assert sum(terms.values()) == local_attention_flops(cfg)
        assert terms["detail_to_global"] == 4 * 12 * 75 * 4
        none = local_attention_terms(CostConfig("t", cfg.grid, cfg.cube, n_global=4, detail_to_global="none"))
        assert none["detail_to_global"] == 0

    @pytest.mark.parametrize("grid,cube,radius", [
        ((3, 5, 5), (2, 2, 2), 1), ((21, 270, 480), (4, 8, 8), 1), ((7, 9, 11), (3, 2, 4), 2), ((6, 6, 6), (1, 1, 1), 0),
    ])
    def test_separable_closed_form(self, grid, cube, radius):
        assert detail_key_visits(GridDims(*grid), CubeDims(*cube), radius) == separable_visits(grid, cube, radius)

    def test_brute_force_visits(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            grid, cube, radius, _, _ = random_attention_config(rng, (4, 5, 5), (3, 3, 3))
            for metric in ("chebyshev", "face"):
                m = build_joint_mask(build_partition(grid, cube), 0, radius, metric=metric)
                assert detail_key_visits(grid, cube, radius, metric) == int((materialize_mask(m) == 0).sum())

    def test_all_visible_equals_dense(self):
        cfg = CostConfig("all", GridDims(4, 6, 6), CubeDims(2, 2, 2), radius=3, head_dim=4)
        assert local_attention_flops(cfg) == dense_attention_flops(cfg.grid.n_tokens, 4)


class TestCounterLaw:
    def test_twenty_random_configs(self, backend):
        rng = np.random.default_rng(21)
        for _ in range(20):
            grid, cube, radius, n_global, policy = random_attention_config(rng, (4, 6, 6), (3, 3, 3))
            metric = str(rng.choice(["chebyshev", "face"]))
            heads, d = int(rng.integers(1, 4)), int(rng.choice([2, 4, 8]))
            m = build_joint_mask(build_partition(grid, cube), n_global, radius, policy, metric)
            q, k, v = (rng.standard_normal((heads, m.n_total, d)) for _ in range(3))
            c = MacCounter()
            block_sparse_attention(q, k, v, m, counter=c, backend=backend)
            cfg = CostConfig("r", grid, cube, radius, n_global, d, heads, policy, metric)
            assert local_attention_flops(cfg) == c.flops == 2 * (c.score_macs + c.value_macs)


class TestStage1:
    @pytest.mark.parametrize("r,expected", [(1, 1), (2, 4), (4, 16)])
    def test_examples(self, r, expected):
        assert stage1_cost_ratio(r) == expected

    def test_square_law(self):
        for r in np.linspace(1, 12, 23):
            assert stage1_cost_ratio(r) == pytest.approx(r * r, rel=1e-15)

    def test_rejects_below_one(self):
        with pytest.raises(ValueError):
            stage1_cost_ratio(0.5)

    def test_sweep(self):
        rows = stage1_sweep(4, 1000, 64)
        assert [r.ratio for r in rows] == [1, 4, 9, 16]


class TestTable:
    def test_empty(self):
        with pytest.raises(ValueError):
            flops_table([])

    def test_full_grid_ratio_one(self):
        (row,) = flops_table([CostConfig("full", GridDims(2, 4, 4), CubeDims(2, 4, 4), radius=0)])
        assert row.ratio == 1

    def test_csv(self):
        rows = flops_table([CostConfig("a", GridDims(1, 4, 4), CubeDims(1, 4, 4), head_dim=2)])
        text = to_csv(rows)
        lines = text.strip().split("\n")
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert lines[1] == "a,16,0,2048,2048,1"

    def test_rows_keep_order(self):
        cfgs = [CostConfig(n, GridDims(2, 4, 4), CubeDims(1, 2, 2)) for n in "cab"]
        assert [r.name for r in flops_table(cfgs)] == ["c", "a", "b"]


class TestPresets:
    def test_token_mapping(self):
        assert video_to_tokens(7680, 4320, 81) == GridDims(21, 270, 480)
        assert video_to_tokens(832, 480, 21) == GridDims(6, 30, 52)

    def test_shipped_presets(self):
        presets = load_presets()
        assert [p.name for p in presets] == ["720p-81f", "1080p-81f", "2K-81f", "4K-81f", "8K-81f"]
        for p in presets:
            assert p.cube == CubeDims(4, 8, 8) and p.radius == 1 and p.n_global == 9360
            assert "//16" in p.assumptions

    def test_ladder_monotone(self):
        ratios = [r.ratio for r in flops_table(load_presets())]
        assert all(a < b for a, b in zip(ratios, ratios[1:]))

    def test_8k_matches_independent_closed_form(self):
        p = load_presets()[-1]
        N, n, d = 21 * 270 * 480, 9360, 128 * 12
        expected_local = 4 * d * (separable_visits((21, 270, 480), (4, 8, 8), 1) + n * n + N * n)
        r = report(p)
        assert r.local_flops == expected_local
        assert r.dense_flops == 4 * N * N * d

    def test_closest_to_reference(self):
        best, gap = closest_to_reference(flops_table(load_presets()))
        assert best.name == "8K-81f"
        assert gap == pytest.approx(REFERENCE_MAX_RATIO - best.ratio)

    def test_unknown_key_rejected(self, tmp_path):
        f = tmp_path / "p.json"
        f.write_text(json.dumps([{"name": "x", "grid": [1, 2, 2], "colour": "red"}]))
        with pytest.raises(ValueError):
            load_presets(f)

    def test_explicit_grid_and_n_global(self, tmp_path):
        f = tmp_path / "p.json"
        f.write_text(json.dumps([{"name": "x", "grid": [2, 4, 4], "cube": [1, 2, 2], "n_global": 2, "head_dim": 2}]))
        (cfg,) = load_presets(f)
        assert cfg.grid == GridDims(2, 4, 4) and cfg.n_global == 2 and cfg.d_total == 2

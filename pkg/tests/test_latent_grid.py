import itertools

import numpy as np
import pytest

from cubeattn.latent_grid import (
    CubeDims,
    GridDims,
    Permutation,
    apply_permutation,
    build_partition,
    coord_of,
    coords_of,
    cube_of_token,
    cubes_adjacent,
    linear_index,
)

PERM_2x2x4 = [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]


def brute_force_perm(grid, cube):
    """Enumerate cubes row-major, then each cube's tokens row-major."""
    t, h, w = grid
    ct, ch, cw = cube
    perm = []
    for it in range(-(-t // ct)):
        for iy in range(-(-h // ch)):
            for ix in range(-(-w // cw)):
                for tt in range(it * ct, min(t, (it + 1) * ct)):
                    for yy in range(iy * ch, min(h, (iy + 1) * ch)):
                        for xx in range(ix * cw, min(w, (ix + 1) * cw)):
                            perm.append(tt * h * w + yy * w + xx)
    return perm


class TestLinearIndex:
    def test_single_token(self):
        assert linear_index(GridDims(1, 1, 1), (0, 0, 0)) == 0

    @pytest.mark.parametrize("coord,expected", [((1, 0, 2), 10), ((0, 1, 3), 7)])
    def test_examples(self, coord, expected):
        assert linear_index(GridDims(2, 2, 4), coord) == expected

    def test_inverse_of_coord_of(self):
        g = GridDims(3, 5, 7)
        for i in range(g.n_tokens):
            assert linear_index(g, coord_of(g, i)) == i
        np.testing.assert_array_equal(coords_of(g, np.arange(g.n_tokens))[17], coord_of(g, 17))

    @pytest.mark.parametrize("coord", [(2, 0, 0), (0, 2, 0), (0, 0, 4), (-1, 0, 0)])
    def test_out_of_range(self, coord):
        with pytest.raises(IndexError):
            linear_index(GridDims(2, 2, 4), coord)

    def test_coord_of_out_of_range(self):
        with pytest.raises(IndexError):
            coord_of(GridDims(2, 2, 4), 16)


class TestDims:
    @pytest.mark.parametrize("dims", [(0, 1, 1), (1, -2, 1), (1, 1, 0)])
    def test_grid_rejects_nonpositive(self, dims):
        with pytest.raises(ValueError):
            GridDims(*dims)

    def test_cube_rejects_zero(self):
        with pytest.raises(ValueError):
            CubeDims(1, 0, 1)

    def test_parse(self):
        assert GridDims.parse("2,3,4") == GridDims(2, 3, 4)
        assert CubeDims.parse("1x2x2") == CubeDims(1, 2, 2)
        with pytest.raises(ValueError):
            GridDims.parse("2,3")

    def test_default_cube(self):
        assert CubeDims().as_tuple() == (4, 8, 8)


class TestBuildPartition:
    def test_single_cube_is_identity(self):
        p = build_partition(GridDims(4, 8, 8), CubeDims(4, 8, 8))
        assert p.n_cubes == 1
        np.testing.assert_array_equal(p.perm, np.arange(256))

    def test_2x2x4_example(self):
        p = build_partition(GridDims(2, 2, 4), CubeDims(1, 2, 2))
        assert p.n_cubes == 4
        assert p.perm.tolist() == PERM_2x2x4

    def test_border_cubes(self):
        p = build_partition(GridDims(3, 5, 5), CubeDims(2, 2, 2))
        assert p.cube_grid == (2, 3, 3)
        assert p.n_cubes == 18
        assert sum(c.token_range[1] for c in p.cubes) == 75
        border = [c for c in p.cubes if c.cube_coord == (1, 2, 2)][0]
        assert border.extent == (1, 1, 1)
        assert {c.extent[0] for c in p.cubes} == {1, 2}
        assert {c.extent[1] for c in p.cubes} == {1, 2}
        assert {c.extent[2] for c in p.cubes} == {1, 2}

    def test_cube_larger_than_grid_rejected(self):
        with pytest.raises(ValueError):
            build_partition(GridDims(2, 2, 2), CubeDims(3, 1, 1))

    @pytest.mark.parametrize("grid,cube", [((3, 5, 5), (2, 2, 2)), ((4, 6, 7), (3, 4, 2)), ((1, 9, 4), (1, 2, 3))])
    def test_matches_brute_force(self, grid, cube):
        p = build_partition(GridDims(*grid), CubeDims(*cube))
        assert p.perm.tolist() == brute_force_perm(grid, cube)

    def test_spans_sorted_by_cube_order(self):
        p = build_partition(GridDims(5, 6, 7), CubeDims(2, 4, 3))
        coords = [c.cube_coord for c in p.cubes]
        assert coords == sorted(coords)
        assert [p.cube_index(c) for c in coords] == list(range(p.n_cubes))

    def test_random_larger_sizes(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            grid = GridDims(*(int(v) for v in rng.integers(1, 40, 3)))
            cube = CubeDims(*(int(rng.integers(1, g + 1)) for g in grid.as_tuple()))
            p = build_partition(grid, cube)
            assert np.array_equal(np.sort(p.perm), np.arange(grid.n_tokens))
            assert np.array_equal(p.perm[p.inv_perm], np.arange(grid.n_tokens))
            starts, sizes = p.cube_starts(), p.cube_sizes()
            assert starts[0] == 0 and np.array_equal(starts[1:], np.cumsum(sizes)[:-1])
            assert sizes.sum() == grid.n_tokens

    def test_geometric_locality(self):
        grid, cube = GridDims(2, 2, 4), CubeDims(1, 2, 2)
        p = build_partition(grid, cube)
        coords = coords_of(grid, p.perm)
        for c in p.cubes:
            span = coords[c.start:c.stop]
            diff = span[:, None, :] - span[None, :, :]
            assert np.all(np.abs(diff) < np.array(cube.as_tuple()))
        # the identity order puts (0,0,3) and (0,1,0) in one 4-token span although
        # they are 3 columns apart, wider than the cube
        ident = coords_of(grid, np.arange(16))
        span = ident[2:6]
        diff = np.abs(span[:, None, :] - span[None, :, :])
        assert np.any(diff >= np.array(cube.as_tuple()))

    def test_json_dump_key_order(self):
        d = build_partition(GridDims(2, 2, 4), CubeDims(1, 2, 2)).to_json_dict()
        assert list(d) == ["grid", "cube", "cubes", "perm"]
        assert list(d["cubes"][0]) == ["coord", "extent", "range"]
        assert d["cubes"][1] == {"coord": [0, 0, 1], "extent": [1, 2, 2], "range": [4, 4]}


class TestPermutation:
    def test_identity(self):
        seq = np.arange(10) * 3
        np.testing.assert_array_equal(apply_permutation(seq, Permutation.identity(10)), seq)

    def test_example(self):
        p = build_partition(GridDims(2, 2, 4), CubeDims(1, 2, 2)).permutation
        assert apply_permutation(np.arange(16), p).tolist() == PERM_2x2x4

    def test_round_trip(self):
        p = build_partition(GridDims(3, 5, 6), CubeDims(2, 2, 4)).permutation
        for seed in range(100):
            seq = np.random.default_rng(seed).standard_normal((90, 3))
            back = apply_permutation(apply_permutation(seq, p), p.inverted())
            assert np.array_equal(back, seq)

    def test_forward_inverse_identity(self):
        p = Permutation.from_forward([2, 0, 3, 1])
        assert all(p.forward[p.inverse[k]] == k for k in range(4))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            apply_permutation(np.arange(5), Permutation.identity(4))

    def test_rejects_non_bijection(self):
        with pytest.raises(ValueError):
            Permutation.from_forward([0, 0, 1])


class TestCubeOfToken:
    def test_single_cube(self):
        p = build_partition(GridDims(2, 3, 4), CubeDims(2, 3, 4))
        assert {cube_of_token(p, i) for i in range(24)} == {(0, 0, 0)}

    def test_examples(self):
        p = build_partition(GridDims(2, 2, 4), CubeDims(1, 2, 2))
        assert cube_of_token(p, 10) == (1, 0, 1)
        g = GridDims(3, 5, 5)
        p = build_partition(g, CubeDims(2, 2, 2))
        assert cube_of_token(p, linear_index(g, (2, 4, 4))) == (1, 2, 2)

    def test_out_of_range(self):
        p = build_partition(GridDims(2, 2, 4), CubeDims(1, 2, 2))
        with pytest.raises(IndexError):
            cube_of_token(p, 16)

    def test_agrees_with_spans(self):
        p = build_partition(GridDims(3, 5, 5), CubeDims(2, 2, 2))
        for c in p.cubes:
            for k in range(c.start, c.stop):
                assert cube_of_token(p, int(p.perm[k])) == c.cube_coord


class TestAdjacency:
    def test_reflexive(self):
        assert cubes_adjacent((1, 2, 3), (1, 2, 3), 0)

    def test_examples(self):
        assert cubes_adjacent((0, 0, 0), (1, 1, 1), 1)
        assert not cubes_adjacent((0, 0, 0), (0, 0, 2), 1)

    def test_radius_zero_distinct(self):
        for a, b in itertools.permutations([(0, 0, 0), (0, 0, 1), (1, 0, 0)], 2):
            assert not cubes_adjacent(a, b, 0)

    def test_face_metric(self):
        assert cubes_adjacent((0, 0, 0), (0, 0, 1), 1, "face")
        assert not cubes_adjacent((0, 0, 0), (0, 1, 1), 1, "face")
        with pytest.raises(ValueError):
            cubes_adjacent((0, 0, 0), (0, 0, 0), 1, "manhattan")

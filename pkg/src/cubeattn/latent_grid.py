"""Token grids for latent video volumes and their cube-contiguous reordering.

Tokens are flattened row-major over (t, y, x). A :class:`CubePartition` tiles
the grid with ``ct x ch x cw`` cubes (border cubes are clipped, never padded)
and carries the permutation that makes every cube's tokens contiguous.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

Coord = tuple[int, int, int]

_MAX_TOKENS = np.iinfo(np.int64).max


@dataclass(frozen=True)
class GridDims:
    t: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("t", "h", "w"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValueError(f"grid dim {name} must be a positive integer, got {v!r}")
        if self.t * self.h * self.w > _MAX_TOKENS:
            raise ValueError("token count overflows int64")

    @property
    def n_tokens(self) -> int:
        return self.t * self.h * self.w

    def as_tuple(self) -> Coord:
        return (self.t, self.h, self.w)

    @classmethod
    def parse(cls, value: str | Sequence[int]) -> "GridDims":
        return cls(*_parse_triple(value))


@dataclass(frozen=True)
class CubeDims:
    ct: int = 4
    ch: int = 8
    cw: int = 8

    def __post_init__(self):
        for name in ("ct", "ch", "cw"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValueError(f"cube dim {name} must be a positive integer, got {v!r}")

    @property
    def volume(self) -> int:
        return self.ct * self.ch * self.cw

    def as_tuple(self) -> Coord:
        return (self.ct, self.ch, self.cw)

    def fits(self, grid: GridDims) -> bool:
        return self.ct <= grid.t and self.ch <= grid.h and self.cw <= grid.w

    @classmethod
    def parse(cls, value: str | Sequence[int]) -> "CubeDims":
        return cls(*_parse_triple(value))


def _parse_triple(value: str | Sequence[int]) -> Coord:
    if isinstance(value, str):
        parts = [p for p in value.replace("x", ",").split(",") if p.strip()]
        value = [int(p) for p in parts]
    vals = tuple(int(v) for v in value)
    if len(vals) != 3:
        raise ValueError(f"expected three integers, got {value!r}")
    return vals  # type: ignore[return-value]


@dataclass(frozen=True)
class Cube:
    cube_coord: Coord
    extent: Coord
    token_range: tuple[int, int]  # (start, length) in the reordered sequence

    @property
    def start(self) -> int:
        return self.token_range[0]

    @property
    def stop(self) -> int:
        return self.token_range[0] + self.token_range[1]


@dataclass(frozen=True)
class Permutation:
    """``forward[k]`` is the original index placed at reordered position ``k``."""

    forward: np.ndarray
    inverse: np.ndarray

    def __post_init__(self):
        if self.forward.shape != self.inverse.shape:
            raise ValueError("forward and inverse must have equal length")

    def __len__(self) -> int:
        return len(self.forward)

    @classmethod
    def from_forward(cls, forward: Sequence[int] | np.ndarray) -> "Permutation":
        fwd = np.asarray(forward, dtype=np.int64)
        n = len(fwd)
        if fwd.ndim != 1 or (n and (fwd.min() < 0 or fwd.max() >= n)) or len(np.unique(fwd)) != n:
            raise ValueError("not a permutation")
        inv = np.empty_like(fwd)
        inv[fwd] = np.arange(n, dtype=np.int64)
        fwd.setflags(write=False)
        inv.setflags(write=False)
        return cls(fwd, inv)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls.from_forward(np.arange(n, dtype=np.int64))

    def inverted(self) -> "Permutation":
        return Permutation(self.inverse, self.forward)


@dataclass(frozen=True)
class CubePartition:
    grid: GridDims
    cube_dims: CubeDims
    cubes: tuple[Cube, ...]
    perm: np.ndarray
    inv_perm: np.ndarray
    cube_grid: Coord = field(default=(1, 1, 1))

    @property
    def n_tokens(self) -> int:
        return self.grid.n_tokens

    @property
    def n_cubes(self) -> int:
        return len(self.cubes)

    @property
    def permutation(self) -> Permutation:
        return Permutation(self.perm, self.inv_perm)

    def cube_index(self, cube_coord: Coord) -> int:
        it, iy, ix = cube_coord
        _, gy, gx = self.cube_grid
        return (it * gy + iy) * gx + ix

    def cube_sizes(self) -> np.ndarray:
        return np.array([c.token_range[1] for c in self.cubes], dtype=np.int64)

    def cube_starts(self) -> np.ndarray:
        return np.array([c.token_range[0] for c in self.cubes], dtype=np.int64)

    def reordered_coords(self) -> np.ndarray:
        """Grid coordinates (t, y, x) of every reordered position, shape (N, 3)."""
        return coords_of(self.grid, self.perm)

    def __iter__(self) -> Iterator[Cube]:
        return iter(self.cubes)

    def to_json_dict(self) -> dict:
        return {
            "grid": list(self.grid.as_tuple()),
            "cube": list(self.cube_dims.as_tuple()),
            "cubes": [
                {
                    "coord": list(c.cube_coord),
                    "extent": list(c.extent),
                    "range": list(c.token_range),
                }
                for c in self.cubes
            ],
            "perm": [int(i) for i in self.perm],
        }


def linear_index(grid: GridDims, coord: Sequence[int]) -> int:
    t, y, x = (int(c) for c in coord)
    if not (0 <= t < grid.t and 0 <= y < grid.h and 0 <= x < grid.w):
        raise IndexError(f"coordinate {tuple(coord)} outside grid {grid.as_tuple()}")
    return t * (grid.h * grid.w) + y * grid.w + x


def coord_of(grid: GridDims, index: int) -> Coord:
    if not 0 <= index < grid.n_tokens:
        raise IndexError(f"token index {index} outside [0, {grid.n_tokens})")
    t, rem = divmod(int(index), grid.h * grid.w)
    y, x = divmod(rem, grid.w)
    return (t, y, x)


def coords_of(grid: GridDims, indices: np.ndarray) -> np.ndarray:
    """Vectorised :func:`coord_of`; returns an int64 array of shape (len, 3)."""
    idx = np.asarray(indices, dtype=np.int64)
    t, rem = np.divmod(idx, grid.h * grid.w)
    y, x = np.divmod(rem, grid.w)
    return np.stack([t, y, x], axis=-1)


def _axis_extents(n: int, c: int) -> list[int]:
    full, rest = divmod(n, c)
    return [c] * full + ([rest] if rest else [])


def build_partition(grid: GridDims, cube: CubeDims) -> CubePartition:
    """Tile ``grid`` with cubes and build the cube-contiguous permutation.

    Cubes are enumerated in row-major cube order and tokens inside a cube in
    row-major local order.
    """
    if not cube.fits(grid):
        raise ValueError(f"cube {cube.as_tuple()} larger than grid {grid.as_tuple()}")
    ext_t = _axis_extents(grid.t, cube.ct)
    ext_y = _axis_extents(grid.h, cube.ch)
    ext_x = _axis_extents(grid.w, cube.cw)

    gy, gx = len(ext_y), len(ext_x)
    cubes = []
    start = 0
    for it, dt in enumerate(ext_t):
        for iy, dy in enumerate(ext_y):
            for ix, dx in enumerate(ext_x):
                size = dt * dy * dx
                cubes.append(Cube((it, iy, ix), (dt, dy, dx), (start, size)))
                start += size

    # row-major order inside a cube is the original row-major order restricted
    # to it, so a stable sort by cube index yields the permutation directly
    t, y, x = coords_of(grid, np.arange(grid.n_tokens)).T
    cube_id = ((t // cube.ct) * gy + y // cube.ch) * gx + x // cube.cw
    perm = np.argsort(cube_id, kind="stable").astype(np.int64)
    p = Permutation.from_forward(perm)
    return CubePartition(
        grid=grid,
        cube_dims=cube,
        cubes=tuple(cubes),
        perm=p.forward,
        inv_perm=p.inverse,
        cube_grid=(len(ext_t), gy, gx),
    )


def apply_permutation(seq: np.ndarray, p: Permutation) -> np.ndarray:
    """Gather along the leading axis: ``out[k] = seq[p.forward[k]]``."""
    seq = np.asarray(seq)
    if seq.shape[0] != len(p):
        raise ValueError(f"sequence length {seq.shape[0]} != permutation length {len(p)}")
    return seq[p.forward]


def cube_of_token(part: CubePartition, original_index: int) -> Coord:
    t, y, x = coord_of(part.grid, original_index)
    c = part.cube_dims
    return (t // c.ct, y // c.ch, x // c.cw)


def cubes_adjacent(a: Sequence[int], b: Sequence[int], radius: int = 1, metric: str = "chebyshev") -> bool:
    """Chebyshev (26-connected) by default; ``metric="face"`` uses L1 distance (6-connected)."""
    d = [abs(int(i) - int(j)) for i, j in zip(a, b)]
    if metric == "chebyshev":
        return max(d) <= radius
    if metric == "face":
        return sum(d) <= radius
    raise ValueError(f"unknown adjacency metric {metric!r}")

"""Box geometry, node-centred grid indexing and the horizontal worker decomposition."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Domain:
    """Box periodic in x and y, solid in z, split into ``nx*ny*nz`` cells."""

    extent: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shape: tuple[int, int, int] = (32, 32, 32)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    periodic: tuple[bool, bool, bool] = field(default=(True, True, False), init=False)

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if len(self.extent) != 3 or len(self.shape) != 3 or len(self.origin) != 3:
            raise ValueError("extent, shape and origin must have three components")
        if min(self.extent) <= 0:
            raise ValueError(f"extents must be positive, got {self.extent}")
        if min(self.shape) < 1:
            raise ValueError(f"cell counts must be positive, got {self.shape}")

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.extent) / np.asarray(self.shape)

    @property
    def cell_volume(self) -> float:
        dx, dy, dz = self.spacing
        return float(dx * dy * dz)

    @property
    def vmin(self) -> float:
        return self.cell_volume / 40.0

    @property
    def big_distance(self) -> float:
        """Squared-distance sentinel; exceeds any in-box squared separation."""
        lx, ly, lz = self.extent
        return lx * lx + ly * ly + lz * lz

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.shape
        return nx * ny * nz

    # -- indexing -------------------------------------------------------

    def normalise(self, position) -> np.ndarray:
        """Wrap x and y into the primary box. z is checked, not wrapped."""
        pos = np.array(position, dtype=np.float64)
        o = np.asarray(self.origin)
        ext = np.asarray(self.extent)
        for d in (0, 1):
            rel = pos[..., d] - o[d]
            rel = rel - ext[d] * np.floor(rel / ext[d])
            # rel can round up to exactly L
            rel = np.where(rel >= ext[d], 0.0, rel)
            pos[..., d] = o[d] + rel
        z = pos[..., 2]
        if np.any(z < o[2]) or np.any(z > o[2] + ext[2]):
            raise ValueError("position outside the vertical extent of the box")
        return pos


def nearest_node(domain: Domain, position) -> np.ndarray:
    """Index ``(i, j, k)`` of the closest grid node; works on ``(3,)`` or ``(n, 3)``.

    Exact midpoints go to the lower node. ``i`` and ``j`` are reduced modulo
    ``nx`` and ``ny``; ``k`` lies in ``[0, nz]``.
    """
    pos = domain.normalise(position)
    u = (pos - np.asarray(domain.origin)) / domain.spacing
    node = np.ceil(u - 0.5).astype(np.int64)
    nx, ny, _ = domain.shape
    node[..., 0] %= nx
    node[..., 1] %= ny
    return node


def cell_of(domain: Domain, position) -> np.ndarray:
    """Index of the cell containing ``position`` (half-open cells, top face kept in the last layer)."""
    pos = domain.normalise(position)
    u = (pos - np.asarray(domain.origin)) / domain.spacing
    cell = np.floor(u).astype(np.int64)
    nx, ny, nz = domain.shape
    cell[..., 0] %= nx
    cell[..., 1] %= ny
    cell[..., 2] = np.clip(cell[..., 2], 0, nz - 1)
    return cell


def linear_cell(domain: Domain, cell) -> np.ndarray:
    cell = np.asarray(cell)
    _, ny, nz = domain.shape
    return (cell[..., 0] * ny + cell[..., 1]) * nz + cell[..., 2]


def surrounding_cells(domain: Domain, node) -> list[tuple[int, int, int]]:
    """Cells sharing the node: 8 in the interior, 4 on the bottom or top plane."""
    i, j, k = (int(v) for v in node)
    nx, ny, nz = domain.shape
    if not (0 <= k <= nz):
        raise ValueError(f"node layer {k} outside [0, {nz}]")
    xs = sorted({(i - 1) % nx, i % nx})
    ys = sorted({(j - 1) % ny, j % ny})
    zs = [c for c in (k - 1, k) if 0 <= c < nz]
    return [(a, b, c) for a in xs for b in ys for c in zs]


def minimum_image_delta(domain: Domain, p, q) -> np.ndarray:
    """``p - q`` with x and y wrapped into ``[-L/2, L/2)``; z is left alone."""
    d = np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    lx, ly, _ = domain.extent
    dx = d[..., 0] - lx * np.floor(d[..., 0] / lx + 0.5)
    dy = d[..., 1] - ly * np.floor(d[..., 1] / ly + 0.5)
    return np.stack([dx, dy, d[..., 2]], axis=-1)


def squared_distance(domain: Domain, p, q) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return squared_distance_xyz(domain, p[..., 0], p[..., 1], p[..., 2], q[..., 0], q[..., 1], q[..., 2])


def squared_distance_xyz(domain: Domain, px, py, pz, qx, qy, qz) -> np.ndarray:
    """Component-wise form of :func:`squared_distance`.

    The expression order matches the compiled search kernel, so both give
    identical bits.
    """
    lx, ly, _ = domain.extent
    dx = px - qx
    dx -= lx * np.floor(dx / lx + 0.5)
    dy = py - qy
    dy -= ly * np.floor(dy / ly + 0.5)
    dz = pz - qz
    return dx * dx + dy * dy + dz * dz


# -- decomposition ------------------------------------------------------


def most_square_factors(n: int) -> tuple[int, int]:
    """``(px, py)`` with ``px * py == n``, ``px >= py`` and ``py`` as large as possible."""
    if n < 1:
        raise ValueError("worker count must be positive")
    py = max(d for d in range(1, math.isqrt(n) + 1) if n % d == 0)
    return n // py, py


@dataclass(frozen=True)
class Decomposition:
    """2D split of the horizontal cell grid; every worker owns full z columns.

    Ranks run x-fastest: ``rank = ix + px * iy``.
    """

    domain: Domain
    px: int
    py: int

    def __post_init__(self):
        nx, ny, _ = self.domain.shape
        if self.px < 1 or self.py < 1:
            raise ValueError("worker grid dimensions must be positive")
        for n, p, axis in ((nx, self.px, "x"), (ny, self.py, "y")):
            if n // p < 2:
                raise ValueError(
                    f"{p} workers along {axis} leave fewer than 2 cells each ({n} cells)"
                )

    @classmethod
    def for_workers(cls, domain: Domain, n_workers: int) -> "Decomposition":
        px, py = most_square_factors(n_workers)
        return cls(domain, px, py)

    @property
    def size(self) -> int:
        return self.px * self.py

    @property
    def x_bounds(self) -> np.ndarray:
        nx = self.domain.shape[0]
        return np.array([r * nx // self.px for r in range(self.px + 1)])

    @property
    def y_bounds(self) -> np.ndarray:
        ny = self.domain.shape[1]
        return np.array([r * ny // self.py for r in range(self.py + 1)])

    def coords(self, rank: int) -> tuple[int, int]:
        return rank % self.px, rank // self.px

    def rank_at(self, ix, iy):
        return np.asarray(ix) % self.px + self.px * (np.asarray(iy) % self.py)

    def owned_range(self, rank: int) -> tuple[tuple[int, int], tuple[int, int]]:
        ix, iy = self.coords(rank)
        xb, yb = self.x_bounds, self.y_bounds
        return (int(xb[ix]), int(xb[ix + 1])), (int(yb[iy]), int(yb[iy + 1]))

    def neighbours(self, rank: int) -> list[int]:
        """The 8 surrounding workers under periodic wrap; may repeat or include ``rank``."""
        ix, iy = self.coords(rank)
        return [
            int(self.rank_at(ix + a, iy + b))
            for b in (-1, 0, 1)
            for a in (-1, 0, 1)
            if (a, b) != (0, 0)
        ]

    def neighbour_set(self, rank: int) -> list[int]:
        """Distinct neighbours other than ``rank``, ascending."""
        return sorted(set(self.neighbours(rank)) - {rank})

    def owner_of_cell(self, i, j):
        """Worker owning horizontal cell ``(i, j)``; vectorised over arrays."""
        nx, ny, _ = self.domain.shape
        ix = np.searchsorted(self.x_bounds, np.asarray(i) % nx, side="right") - 1
        iy = np.searchsorted(self.y_bounds, np.asarray(j) % ny, side="right") - 1
        r = self.rank_at(ix, iy)
        return int(r) if np.ndim(r) == 0 else r

    def owner_of_position(self, domain_positions) -> np.ndarray:
        cell = cell_of(self.domain, domain_positions)
        return self.owner_of_cell(cell[..., 0], cell[..., 1])

"""Single-worker reference clustering.

Shares the distance and node arithmetic of :mod:`nnmerge.domain` with the
parallel engine but none of its search, messaging or flag logic: the
nearest-neighbour search here pads every cell to a dense table and the
resolution works directly on indegree counts.
"""
from __future__ import annotations

import numpy as np

from .domain import Decomposition, Domain, cell_of, linear_cell, nearest_node, squared_distance_xyz
from .parcels import ParcelStore
from .partition import MergePartition


def nearest_neighbours(population: ParcelStore, domain: Domain, key=None):
    """Closest other parcel in the stencil of every small parcel.

    Returns ``(small, target, d2, tied)`` over global row indices; smalls
    with an empty stencil are left out. Equidistant candidates go to the
    lowest ``key`` (default: the row index); ``tied`` flags the smalls where
    that rule was needed.
    """
    pos = population.position[: population.n_local]
    n = len(pos)
    small = np.flatnonzero(population.volume[:n] < domain.vmin)
    if len(small) == 0 or n < 2:
        z = np.zeros(0, np.int64)
        return z, z, np.zeros(0), np.zeros(0, bool)

    cid = linear_cell(domain, cell_of(domain, pos))
    counts = np.bincount(cid, minlength=domain.n_cells)
    width = int(counts.max())
    table = np.full((domain.n_cells, width), -1, dtype=np.int64)
    order = np.argsort(cid, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(n) - np.repeat(starts, counts)
    table[cid[order], slot] = order

    nx, ny, nz = domain.shape
    node = nearest_node(domain, pos[small])
    stencil = []
    for a in (-1, 0):
        for b in (-1, 0):
            for c in (-1, 0):
                ci = (node[:, 0] + a) % nx
                cj = (node[:, 1] + b) % ny
                ck = node[:, 2] + c
                ok = (ck >= 0) & (ck < nz)
                ids = (ci * ny + cj) * nz + np.clip(ck, 0, nz - 1)
                stencil.append(np.where(ok, ids, -1))
    stencil = np.stack(stencil, axis=1)
    # a cell can appear twice when nx or ny is 1
    srt = np.sort(stencil, axis=1)
    dup = np.zeros_like(srt, dtype=bool)
    dup[:, 1:] = srt[:, 1:] == srt[:, :-1]
    srt[dup] = -1

    x, y, z = (np.ascontiguousarray(pos[:, c]) for c in range(3))
    big = np.iinfo(np.int64).max
    if key is None:
        key = np.arange(n, dtype=np.int64)
    by_key = np.argsort(key)
    target = np.empty(len(small), np.int64)
    dmin = np.empty(len(small))
    tied = np.empty(len(small), bool)
    for lo in range(0, len(small), 1024):
        sl = slice(lo, lo + 1024)
        cand = table[np.maximum(srt[sl], 0)]
        cand[srt[sl] < 0] = -1
        cand = cand.reshape(len(cand), -1)
        valid = (cand >= 0) & (cand != small[sl, None])
        safe = np.where(valid, cand, 0)
        q = small[sl, None]
        d2 = squared_distance_xyz(domain, x[q], y[q], z[q], x[safe], y[safe], z[safe])
        d2[~valid] = np.inf
        dmin[sl] = d2.min(axis=1)
        best = valid & (d2 == dmin[sl, None])
        tied[sl] = best.sum(axis=1) > 1
        k = np.where(best, key[safe], big).min(axis=1)
        target[sl] = by_key[np.searchsorted(key[by_key], np.minimum(k, key.max()))]
    found = np.isfinite(dmin)
    return small[found], target[found], dmin[found], tied[found]


def resolve_edges(src: np.ndarray, dst: np.ndarray, n: int, key=None):
    """Sequential two-stage resolution on global indices.

    In an isolated dual link the endpoint with the lower ``key`` (default:
    the index) gives up its edge. Returns ``(keep, lone)`` where ``keep``
    masks the surviving edges and ``lone`` indexes the surviving edge of
    each isolated dual link.
    """
    if key is None:
        key = np.arange(n, dtype=np.int64)
    m = len(src)
    out = np.full(n, -1, np.int64)
    out[src] = dst
    dual = out[dst] == src
    state = np.zeros(m, np.int8)  # 0 open, 1 joined, 2 dropped
    while True:
        open_ = state == 0
        indeg = np.bincount(dst[open_], minlength=n)
        leaf_src = indeg[src] == 0
        bad = np.zeros(n, dtype=bool)
        bad[dst[open_ & ~leaf_src]] = True
        available = ~bad
        drop = open_ & ~leaf_src & available[src] & ~dual
        join = open_ & leaf_src & available[dst]
        if not (drop.any() or join.any()):
            break
        state[drop] = 2
        state[join] = 1

    open_ = state == 0
    indeg = np.bincount(dst[open_], minlength=n)
    pairs = open_ & dual
    if np.any(open_ & ~dual & (indeg[src] > 0)):
        raise RuntimeError("cycle longer than two left after stage 1")
    heavy = pairs & (indeg[src] > 1)
    lone = pairs & (indeg[src] == 1) & (indeg[dst] == 1)
    state[heavy] = 2
    lower = key[src] < key[dst]
    state[lone & lower] = 2
    keep = state != 2
    return keep, np.flatnonzero(lone & ~lower)


def layout_key(population: ParcelStore, decomposition: Decomposition) -> np.ndarray:
    """``owner * n + local index`` of every row once the population is distributed.

    Local indices follow input order within each owner, as in
    :func:`nnmerge.engine.distribute`.
    """
    n = population.n_local
    if n == 0:
        return np.zeros(0, np.int64)
    owner = np.atleast_1d(decomposition.owner_of_position(population.position[:n])).astype(np.int64)
    order = np.argsort(owner, kind="stable")
    counts = np.bincount(owner, minlength=decomposition.size)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.empty(n, np.int64)
    local[order] = np.arange(n) - starts[owner[order]]
    return owner * n + local


class Reference:
    """Serial clustering of one population, reusable across worker layouts.

    The stencil search runs once. Only the tie rules depend on the layout:
    equidistant candidates and isolated dual links are decided by
    ``(worker, local index)``, with worker 0 and the row index when no
    decomposition is given.
    """

    def __init__(self, population: ParcelStore, domain: Domain):
        self.population = population.local()
        self.domain = domain
        self.small, self.target, self.d2, self.tied = nearest_neighbours(self.population, domain)

    def partition(self, decomposition: Decomposition | None = None) -> MergePartition:
        pop = self.population
        small, target = self.small, self.target
        key = None
        if decomposition is not None and decomposition.size > 1:
            key = layout_key(pop, decomposition)
            if self.tied.any():
                small, target, _, _ = nearest_neighbours(pop, self.domain, key)
        keep, lone = resolve_edges(small, target, len(pop), key)
        src, dst = small[keep], target[keep]
        if np.isin(dst, src).any():
            raise RuntimeError("resolved graph has a chain longer than one edge")
        gid = pop.gid
        return MergePartition(gid[src], gid[dst], gid[target[lone]])


def oracle_cluster(
    population: ParcelStore, domain: Domain, decomposition: Decomposition | None = None
) -> MergePartition:
    """Reference partition; ``isolated`` holds the roots of isolated dual links."""
    return Reference(population, domain).partition(decomposition)

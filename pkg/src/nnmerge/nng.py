"""Nearest-neighbour graph construction across the decomposed domain.

Every small parcel gets one outgoing edge to the closest other parcel found
in the cells around its nearest grid node. Small parcels near a subdomain
edge are copied to the neighbours owning part of that stencil, searched
there against the neighbour's own parcels, and the best answer is reduced
back onto the owner.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numba
import numpy as np

from .domain import Decomposition, Domain, cell_of, linear_cell, nearest_node
from .parcels import ParcelStore
from .runtime import Context, ProtocolError, exchange


@dataclass
class CandidateArrays:
    """One row per small parcel: ``isma -> (rclo, iclo)`` at squared distance ``dclo``.

    ``dual`` marks rows whose target points straight back (filled in by
    :func:`mark_dual_links`); ``None`` until known.
    """

    isma: np.ndarray
    iclo: np.ndarray
    rclo: np.ndarray
    dclo: np.ndarray
    dual: np.ndarray | None = None

    def __post_init__(self):
        self.isma = np.asarray(self.isma, dtype=np.int64)
        self.iclo = np.asarray(self.iclo, dtype=np.int64)
        self.rclo = np.asarray(self.rclo, dtype=np.int64)
        self.dclo = np.asarray(self.dclo, dtype=np.float64)
        n = len(self.isma)
        if not (len(self.iclo) == len(self.rclo) == len(self.dclo) == n):
            raise ValueError("candidate arrays must share one length")
        if self.dual is not None:
            self.dual = np.asarray(self.dual, dtype=bool)

    @classmethod
    def empty(cls) -> "CandidateArrays":
        z = np.zeros(0, np.int64)
        return cls(z, z, z, np.zeros(0), np.zeros(0, bool))

    def __len__(self) -> int:
        return len(self.isma)

    def select(self, mask) -> "CandidateArrays":
        return CandidateArrays(
            self.isma[mask],
            self.iclo[mask],
            self.rclo[mask],
            self.dclo[mask],
            None if self.dual is None else self.dual[mask],
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["isma", "iclo", "rclo", "dclo"])
            for row in zip(self.isma, self.iclo, self.rclo, self.dclo):
                w.writerow([int(row[0]), int(row[1]), int(row[2]), repr(float(row[3]))])

    @classmethod
    def from_csv(cls, path) -> "CandidateArrays":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [int(r["isma"]) for r in rows],
            [int(r["iclo"]) for r in rows],
            [int(r["rclo"]) for r in rows],
            [float(r["dclo"]) for r in rows],
        )


Vertex = tuple[int, int]  # (worker, local index)


@dataclass
class DirectedGraphView:
    """Global view of the edge set gathered from every worker's arrays."""

    edges: dict[Vertex, Vertex] = field(default_factory=dict)

    @classmethod
    def from_candidates(cls, per_worker) -> "DirectedGraphView":
        edges = {}
        for rank, c in enumerate(per_worker):
            for s, t, r in zip(c.isma, c.iclo, c.rclo):
                edges[(rank, int(s))] = (int(r), int(t))
        return cls(edges)

    @property
    def vertices(self) -> set[Vertex]:
        return set(self.edges) | set(self.edges.values())

    def indegree(self) -> dict[Vertex, int]:
        deg = {v: 0 for v in self.vertices}
        for t in self.edges.values():
            deg[t] += 1
        return deg

    def leaves(self) -> set[Vertex]:
        return {v for v, d in self.indegree().items() if d == 0}

    def available(self) -> set[Vertex]:
        leaves = self.leaves()
        has_bad_parent = {t for s, t in self.edges.items() if s not in leaves}
        return {v for v in self.vertices if v not in has_bad_parent}

    def dual_links(self) -> set[frozenset]:
        return {
            frozenset((s, t)) for s, t in self.edges.items() if self.edges.get(t) == s
        }

    def cycles(self) -> list[list[Vertex]]:
        """All directed cycles (each vertex has outdegree <= 1)."""
        seen, found = set(), []
        for start in self.edges:
            path, pos, v = [], {}, start
            while v in self.edges and v not in seen and v not in pos:
                pos[v] = len(path)
                path.append(v)
                v = self.edges[v]
            if v in pos:
                found.append(path[pos[v]:])
            seen.update(path)
        return found


def collect_small(store: ParcelStore, domain: Domain) -> np.ndarray:
    """Ascending local rows with volume strictly below the threshold."""
    return np.flatnonzero(store.volume[: store.n_local] < domain.vmin)


def stencil_owners(domain: Domain, decomposition: Decomposition, positions) -> np.ndarray:
    """``(n, 4)`` owners of the horizontal stencil columns around each nearest node."""
    node = nearest_node(domain, positions).reshape(-1, 3)
    i, j = node[:, 0], node[:, 1]
    cols = [(i - 1, j - 1), (i, j - 1), (i - 1, j), (i, j)]
    return np.stack([decomposition.owner_of_cell(a, b) for a, b in cols], axis=1).reshape(-1, 4)


def exchange_boundary_smalls(
    ctx: Context,
    store: ParcelStore,
    small,
    decomposition: Decomposition,
):
    """Copy small parcels to every other worker owning part of their stencil.

    Generator; returns the store with received copies appended in
    ascending sender order.
    """
    domain = decomposition.domain
    me = ctx.rank
    peers = decomposition.neighbour_set(me)
    small = np.asarray(small, dtype=np.int64)
    owners = stencil_owners(domain, decomposition, store.position[small])
    outgoing = {}
    for dest in np.unique(owners):
        dest = int(dest)
        if dest == me:
            continue
        if dest not in peers:
            raise ProtocolError(f"worker {me}: stencil reaches non-neighbour {dest}")
        rows = small[np.any(owners == dest, axis=1)]
        outgoing[dest] = (store.gid[rows], store.position[rows], store.volume[rows], rows)
    got = yield from exchange(ctx, "smalls", outgoing, peers)
    for src in sorted(got):
        if got[src] is None:
            continue
        gid, pos, vol, rows = got[src]
        store = store.append_remote(gid, pos, vol, np.full(len(gid), src), rows)
    return store


@numba.njit(cache=True)
def _nearest_kernel(qpos, qnode, qself, ppos, cell_start, cell_items, nx, ny, nz, lx, ly):
    nq = qpos.shape[0]
    best = np.full(nq, -1, np.int64)
    bestd = np.full(nq, np.inf)
    evals = 0
    xs = np.empty(2, np.int64)
    ys = np.empty(2, np.int64)
    for q in range(nq):
        i, j, k = qnode[q, 0], qnode[q, 1], qnode[q, 2]
        xs[0] = (i - 1) % nx
        xs[1] = i % nx
        ys[0] = (j - 1) % ny
        ys[1] = j % ny
        nxs = 1 if xs[0] == xs[1] else 2
        nys = 1 if ys[0] == ys[1] else 2
        bq = -1
        bd = np.inf
        for a in range(nxs):
            for b in range(nys):
                for c in range(k - 1, k + 1):
                    if c < 0 or c >= nz:
                        continue
                    cid = (xs[a] * ny + ys[b]) * nz + c
                    for t in range(cell_start[cid], cell_start[cid + 1]):
                        p = cell_items[t]
                        if p == qself[q]:
                            continue
                        evals += 1
                        dx = qpos[q, 0] - ppos[p, 0]
                        dx = dx - lx * np.floor(dx / lx + 0.5)
                        dy = qpos[q, 1] - ppos[p, 1]
                        dy = dy - ly * np.floor(dy / ly + 0.5)
                        dz = qpos[q, 2] - ppos[p, 2]
                        d = dx * dx + dy * dy + dz * dz
                        if d < bd or (d == bd and p < bq):
                            bd = d
                            bq = p
        best[q] = bq
        bestd[q] = bd
    return best, bestd, evals


def cell_list(domain: Domain, positions) -> tuple[np.ndarray, np.ndarray]:
    """CSR cell list: rows of cell ``c`` are ``items[start[c]:start[c + 1]]``."""
    ids = linear_cell(domain, cell_of(domain, positions)).reshape(-1)
    items = np.argsort(ids, kind="stable")
    counts = np.bincount(ids, minlength=domain.n_cells)
    start = np.zeros(domain.n_cells + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    return start, items


@dataclass
class SearchResult:
    """Provisional candidates for every query row (local smalls then remote copies)."""

    rows: np.ndarray
    iclo: np.ndarray
    dclo: np.ndarray
    evaluations: int


def local_nearest(store: ParcelStore, small, domain: Domain) -> SearchResult:
    """Closest owned parcel in the stencil of each local small and each remote copy.

    Queries without any candidate on this worker get ``iclo = -1`` and the
    sentinel distance.
    """
    small = np.asarray(small, dtype=np.int64)
    rows = np.concatenate([small, np.arange(store.n_local, len(store), dtype=np.int64)])
    if len(rows) == 0:
        return SearchResult(rows, rows.copy(), np.zeros(0), 0)
    qpos = np.ascontiguousarray(store.position[rows])
    qnode = nearest_node(domain, qpos).reshape(-1, 3)
    qself = np.where(rows < store.n_local, rows, -1)
    ppos = np.ascontiguousarray(store.position[: store.n_local])
    start, items = cell_list(domain, ppos)
    nx, ny, nz = domain.shape
    lx, ly, _ = domain.extent
    best, bestd, evals = _nearest_kernel(
        qpos, qnode, qself, ppos, start, items.astype(np.int64), nx, ny, nz, lx, ly
    )
    bestd[best < 0] = domain.big_distance
    return SearchResult(rows, best, bestd, int(evals))


def reduce_remote_candidates(
    ctx: Context,
    search: SearchResult,
    store: ParcelStore,
    decomposition: Decomposition,
    big_distance: float,
):
    """Send remote-copy answers home and keep the closest candidate per small parcel.

    Generator; returns finalised :class:`CandidateArrays` sorted by ``isma``.
    Ties in distance go to the smaller ``(rclo, iclo)``.
    """
    me = ctx.rank
    peers = decomposition.neighbour_set(me)
    n_local = store.n_local
    is_remote = search.rows >= n_local
    local = ~is_remote

    outgoing = {}
    rrow = search.rows[is_remote] - n_local
    owner = store.remote_owner[rrow]
    for dest in np.unique(owner):
        sel = owner == dest
        outgoing[int(dest)] = (
            store.remote_index[rrow[sel]],
            search.iclo[is_remote][sel],
            search.dclo[is_remote][sel],
        )
    got = yield from exchange(ctx, "candidates", outgoing, peers)

    small = search.rows[local]
    isma = [small]
    iclo = [search.iclo[local]]
    rclo = [np.full(len(small), me, np.int64)]
    dclo = [search.dclo[local]]
    known = np.zeros(n_local, dtype=bool)
    known[small] = True
    for src in sorted(got):
        if got[src] is None:
            continue
        idx, ic, dc = got[src]
        if len(idx) and (idx.max() >= n_local or not known[idx].all()):
            raise ProtocolError(f"worker {me}: reply from {src} names an unknown small parcel")
        isma.append(idx)
        iclo.append(ic)
        rclo.append(np.full(len(idx), src, np.int64))
        dclo.append(dc)
    isma, iclo, rclo, dclo = (np.concatenate(a) for a in (isma, iclo, rclo, dclo))
    order = np.lexsort((iclo, rclo, dclo, isma))
    first = np.ones(len(order), dtype=bool)
    first[1:] = isma[order][1:] != isma[order][:-1]
    pick = order[first]
    keep = pick[dclo[pick] < big_distance]
    return CandidateArrays(isma[keep], iclo[keep], rclo[keep], dclo[keep])


def mark_dual_links(ctx: Context, cands: CandidateArrays, n_slots: int, peers):
    """Tell each target owner about its incoming edges and learn which edges are dual.

    Generator; sets ``cands.dual`` and returns the indegree of every local slot.
    """
    me = ctx.rank
    tgt_rank = np.full(n_slots, -1, np.int64)
    tgt_idx = np.full(n_slots, -1, np.int64)
    tgt_rank[cands.isma] = cands.rclo
    tgt_idx[cands.isma] = cands.iclo
    indegree = np.zeros(n_slots, np.int64)

    def answer(src, origin, target):
        np.add.at(indegree, target, 1)
        return (tgt_rank[target] == src) & (tgt_idx[target] == origin)

    dual = np.zeros(len(cands), dtype=bool)
    mine = cands.rclo == me
    dual[mine] = answer(me, cands.isma[mine], cands.iclo[mine])
    outgoing = {}
    for dest in np.unique(cands.rclo[~mine]):
        sel = cands.rclo == dest
        outgoing[int(dest)] = (cands.isma[sel], cands.iclo[sel])
    got = yield from exchange(ctx, "edges", outgoing, peers)
    replies = {
        src: answer(src, *msg) for src, msg in got.items() if msg is not None
    }
    back = yield from exchange(ctx, "dual", replies, peers)
    for src, flags in back.items():
        if flags is not None:
            dual[cands.rclo == src] = flags
    cands.dual = dual
    return indegree


@dataclass
class BuildResult:
    candidates: CandidateArrays
    store: ParcelStore
    indegree: np.ndarray
    n_small: int
    evaluations: int


def build_graph(ctx: Context, store: ParcelStore, decomposition: Decomposition):
    """Full graph construction on one worker (generator)."""
    domain = decomposition.domain
    small = collect_small(store, domain)
    store = yield from exchange_boundary_smalls(ctx, store, small, decomposition)
    search = local_nearest(store, small, domain)
    cands = yield from reduce_remote_candidates(
        ctx, search, store, decomposition, domain.big_distance
    )
    indegree = yield from mark_dual_links(
        ctx, cands, store.n_local, decomposition.neighbour_set(ctx.rank)
    )
    return BuildResult(cands, store, indegree, len(small), search.evaluations)

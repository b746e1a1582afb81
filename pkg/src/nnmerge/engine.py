"""Per-worker clustering program and the driver that runs it on a runtime."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import Decomposition, Domain
from .nng import BuildResult, CandidateArrays, build_graph
from .parcels import ParcelStore, merge_clusters
from .partition import MergeGroup, MergePartition
from .resolve import ConsistencyError, FlagWindows, ResolveCounters, TraceEvent, compact, resolve
from .runtime import Context, Runtime, exchange


def extract_merge_groups(
    ctx: Context, kept: CandidateArrays, store: ParcelStore, peers, *, with_rows: bool = False
):
    """Ship every kept edge to its target's owner and form one star per target (generator).

    Returns ``(partition, incoming)``: the groups rooted on this worker, and,
    with ``with_rows``, for each root row the attribute bundles of its
    members.
    """
    me = ctx.rank

    def payload(sel):
        rows = kept.isma[sel]
        body = store.rows(rows) if with_rows else {"gid": store.gid[rows]}
        return kept.iclo[sel], body

    outgoing = {}
    for dest in np.unique(kept.rclo):
        sel = kept.rclo == dest
        if dest != me:
            outgoing[int(dest)] = payload(sel)
    got = yield from exchange(ctx, "merge", outgoing, peers)
    got[me] = payload(kept.rclo == me)

    origins = np.zeros(store.n_local, dtype=bool)
    origins[kept.isma] = True
    targets, bundles = [], []
    for src in sorted(got):
        if got[src] is None:
            continue
        tgt, body = got[src]
        if len(tgt) == 0:
            continue
        if tgt.max() >= store.n_local:
            raise ConsistencyError(f"worker {me}: merge target outside the owned rows")
        if origins[tgt].any():
            raise ConsistencyError(f"worker {me}: merge target is itself merging (chain of depth > 1)")
        targets.append(tgt)
        bundles.append(body)
    if not targets:
        return MergePartition(), {}
    tgt = np.concatenate(targets)
    gids = np.concatenate([b["gid"] for b in bundles])
    order = np.lexsort((gids, tgt))
    tgt, gids = tgt[order], gids[order]
    groups = MergePartition(gids, store.gid[tgt])
    incoming = {}
    if with_rows:
        keys = bundles[0].keys()
        merged_bundle = {k: np.concatenate([b[k] for b in bundles])[order] for k in keys}
        incoming = {"target": tgt, **merged_bundle}
    return groups, incoming


def apply_merges(ctx: Context, store: ParcelStore, kept: CandidateArrays, domain: Domain, peers):
    """Merge every star into its root and delete the absorbed parcels (generator).

    Returns ``(groups, new_store)``; the new store holds only local rows.
    """
    groups, incoming = yield from extract_merge_groups(ctx, kept, store, peers, with_rows=True)
    local = store.local()
    keep = np.ones(local.n_local, dtype=bool)
    keep[kept.isma] = False
    if groups.n_merges:
        roots = np.unique(incoming["target"])
        label = np.concatenate([roots, incoming["target"]])
        rows = {
            k: np.concatenate([local.rows(roots)[k], incoming[k]])
            for k in ("gid", "position", "volume", "buoyancy", "vorticity", "shape")
        }
        labels, merged = merge_clusters(domain, label, rows)
        for k, v in merged.items():
            getattr(local, k)[labels] = v
    return groups, local.take(np.flatnonzero(keep))


def redistribute(ctx: Context, store: ParcelStore, decomposition: Decomposition):
    """Hand parcels whose centre left this subdomain to the owning neighbour (generator)."""
    me = ctx.rank
    peers = decomposition.neighbour_set(me)
    owner = np.atleast_1d(decomposition.owner_of_position(store.position)) if len(store) else np.zeros(0, int)
    outgoing = {}
    for dest in np.unique(owner):
        if dest != me:
            outgoing[int(dest)] = store.rows(np.flatnonzero(owner == dest))
    got = yield from exchange(ctx, "redistribute", outgoing, peers)
    stay = store.take(np.flatnonzero(owner == me))
    arrivals = [got[s] for s in sorted(got) if got[s] is not None]
    return ParcelStore.from_rows([stay.rows(np.arange(len(stay)))] + arrivals), sum(
        len(a["gid"]) for a in arrivals
    )


@dataclass
class WorkerOutcome:
    groups: MergePartition
    counters: ResolveCounters
    participated: bool
    n_small: int
    n_candidates: int
    evaluations: int
    events: list[TraceEvent]
    store: ParcelStore | None
    n_before: int
    n_migrated: int = 0


def cluster_program(
    ctx: Context,
    stores,
    decomposition: Decomposition,
    *,
    apply: bool = True,
    trace: bool = False,
    fault: str | None = None,
):
    """One merge cycle on one worker: build, resolve, then merge or just report groups."""
    store: ParcelStore = stores[ctx.rank]
    n_before = store.n_local
    peers = decomposition.neighbour_set(ctx.rank)
    ctx.set_phase("build")
    built: BuildResult = yield from build_graph(ctx, store, decomposition)
    store = built.store
    participates = built.n_small > 0 or store.n_remote > 0
    group = yield ctx.split(None, participates)

    counters = ResolveCounters()
    events: list[TraceEvent] = []
    kept = CandidateArrays.empty()
    if group is not None:
        ctx.set_phase("resolve")
        windows = yield from FlagWindows.create(ctx, group, len(store))
        res = yield from resolve(
            ctx, group, built.candidates, windows, n_slots=len(store), trace=trace, fault=fault
        )
        counters = res.counters
        events = res.events
        kept = compact(built.candidates, res.keep)

    ctx.set_phase("merge")
    migrated = 0
    if apply:
        groups, new_store = yield from apply_merges(ctx, store, kept, decomposition.domain, peers)
        new_store, migrated = yield from redistribute(ctx, new_store, decomposition)
    else:
        groups, _ = yield from extract_merge_groups(ctx, kept, store, peers)
        new_store = None
    ctx.set_phase("done")
    return WorkerOutcome(
        groups=groups,
        counters=counters,
        participated=group is not None,
        n_small=built.n_small,
        n_candidates=len(built.candidates),
        evaluations=built.evaluations,
        events=events,
        store=new_store,
        n_before=n_before,
        n_migrated=migrated,
    )


def distribute(population: ParcelStore, decomposition: Decomposition) -> list[ParcelStore]:
    """Split a global population by cell ownership, keeping the input order within each worker."""
    population = population.local()
    if len(population) == 0:
        return [ParcelStore.empty() for _ in range(decomposition.size)]
    owner = np.atleast_1d(decomposition.owner_of_position(population.position))
    return [population.take(np.flatnonzero(owner == r)) for r in range(decomposition.size)]


@dataclass
class ParallelResult:
    partition: MergePartition
    outcomes: list[WorkerOutcome]
    runtime: Runtime

    @property
    def participants(self) -> list[int]:
        return [r for r, o in enumerate(self.outcomes) if o.participated]

    @property
    def store(self) -> ParcelStore | None:
        if any(o.store is None for o in self.outcomes):
            return None
        return ParcelStore.concat([o.store for o in self.outcomes])

    @property
    def evaluations(self) -> int:
        return sum(o.evaluations for o in self.outcomes)

    def events(self) -> list[TraceEvent]:
        return sorted(
            (e for o in self.outcomes for e in o.events),
            key=lambda e: (e.stage != "stage1", e.iteration, e.stage, e.origin),
        )


def run_stores(
    stores,
    decomposition: Decomposition,
    *,
    checking: bool = False,
    schedule_seed: int | None = None,
    apply: bool = True,
    trace: bool = False,
    fault: str | None = None,
) -> ParallelResult:
    size = decomposition.size
    rt = Runtime(
        size,
        neighbours=[decomposition.neighbour_set(r) for r in range(size)],
        checking=checking,
        schedule_seed=schedule_seed,
    )
    outcomes = rt.run(cluster_program, stores, decomposition, apply=apply, trace=trace, fault=fault)
    partition = MergePartition.concat(o.groups for o in outcomes)
    return ParallelResult(partition, outcomes, rt)


def run_parallel(
    population: ParcelStore, domain: Domain, n_workers: int, **kwargs
) -> ParallelResult:
    """Cluster a global population on ``n_workers`` simulated workers."""
    decomposition = Decomposition.for_workers(domain, n_workers)
    return run_stores(distribute(population, decomposition), decomposition, **kwargs)

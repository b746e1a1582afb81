"""The twelve-vertex A-L example graph, as an edge list and as hand-placed parcels.

The edge set below is a reconstruction: it is the smallest graph consistent
with the example's leaves (A, B, G, J, K, L), its initially available
non-leaves (F, I), the four edge removals in their documented order and the
four final subgraphs. Replaying the resolution on it reproduces all of them.

Two helpers drive :func:`nnmerge.resolve.resolve` on an arbitrary edge list
spread over simulated workers, without any geometry.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import Domain, nearest_node, squared_distance
from .nng import CandidateArrays
from .parcels import ParcelStore
from .resolve import FlagWindows, ResolveCounters, TraceEvent, resolve
from .runtime import Runtime

NAMES = tuple("ABCDEFGHIJKL")

EXAMPLE_EDGES = (
    ("A", "F"),
    ("B", "F"),
    ("F", "C"),
    ("C", "D"),
    ("D", "E"),
    ("E", "H"),
    ("H", "E"),
    ("G", "I"),
    ("J", "I"),
    ("K", "I"),
    ("I", "H"),
    ("L", "H"),
)

EXAMPLE_GROUPS = (("A", "B", "F"), ("G", "I", "J", "K"), ("C", "D"), ("E", "H", "L"))
EXAMPLE_ROOTS = {"F", "I", "D", "H"}

# removals in order: (stage-1 pass or 0 for stage 2, origin, target)
EXAMPLE_REMOVALS = ((1, "F", "C"), (1, "I", "H"), (2, "D", "E"), (0, "H", "E"))

# Positions in arbitrary units whose nearest-neighbour graph is EXAMPLE_EDGES.
# The chain F-C-D-E-H runs along x with shrinking gaps 10, 8, 6, 4; the
# leaves sit further out than the vertex they point at.
EXAMPLE_LAYOUT = {
    "F": (0.0, 0.0, 0.0),
    "C": (10.0, 0.0, 0.0),
    "D": (18.0, 0.0, 0.0),
    "E": (24.0, 0.0, 0.0),
    "H": (28.0, 0.0, 0.0),
    "A": (0.0, 11.0, 0.0),
    "B": (0.0, -11.0, 0.0),
    "I": (28.0, 0.0, 5.0),
    "L": (28.0, 0.0, -5.0),
    "G": (28.0, 0.0, 11.0),
    "J": (28.0, 6.0, 5.0),
    "K": (28.0, -6.0, 5.0),
}


def example_domain() -> Domain:
    return Domain(extent=(1.0, 1.0, 1.0), shape=(8, 8, 8))


def example_population(domain: Domain | None = None, node=(4, 4, 4)) -> ParcelStore:
    """The example as twelve small parcels around one grid node.

    The layout is scaled uniformly so every parcel lies within 0.45 cell
    widths of ``node``; all twelve then share one search stencil and each
    parcel's nearest neighbour is its edge target. gid ``k`` is ``NAMES[k]``.
    """
    domain = domain or example_domain()
    raw = np.array([EXAMPLE_LAYOUT[n] for n in NAMES])
    centre = (raw.max(axis=0) + raw.min(axis=0)) / 2
    half_span = (raw.max(axis=0) - raw.min(axis=0)).max() / 2
    spacing = domain.spacing
    scale = 0.45 * spacing.min() / half_span
    pos = np.asarray(domain.origin) + np.asarray(node) * spacing + (raw - centre) * scale
    n = len(NAMES)
    rng = np.random.default_rng(0)
    return ParcelStore(
        gid=np.arange(n),
        position=pos,
        volume=np.full(n, 0.5 * domain.vmin),
        buoyancy=rng.uniform(-1, 1, n),
        vorticity=rng.uniform(-10, 10, (n, 3)),
        shape=np.column_stack(
            [rng.uniform(1, 4, n), rng.uniform(1, 4, n), rng.uniform(0, 2 * np.pi, n), rng.uniform(0, np.pi, n)]
        ),
    )


def brute_force_edges(store: ParcelStore, domain: Domain) -> dict[int, int]:
    """gid -> gid of the closest other parcel over all pairs (ties to the lower gid)."""
    out = {}
    for i in range(len(store)):
        d2 = squared_distance(domain, store.position[i], store.position)
        d2[i] = np.inf
        best = np.flatnonzero(d2 == d2.min())
        out[int(store.gid[i])] = int(store.gid[best].min())
    return out


def check_example_layout(domain: Domain | None = None) -> None:
    """Raise AssertionError unless the placed parcels reproduce the example exactly."""
    domain = domain or example_domain()
    store = example_population(domain)
    nodes = nearest_node(domain, store.position)
    assert (nodes == nodes[0]).all(), "fixture parcels do not share a nearest node"
    want = {NAMES.index(s): NAMES.index(t) for s, t in EXAMPLE_EDGES}
    assert brute_force_edges(store, domain) == want, "fixture layout does not give the example graph"


# -- graph-level resolution ---------------------------------------------


@dataclass
class GraphRun:
    kept: list[tuple[str, str]]
    events: list[TraceEvent]
    counters: list[ResolveCounters]  # per world rank, zero for non-participants
    names: dict[tuple[int, int], str]
    runtime: Runtime

    def removals(self) -> list[tuple[int, str, str]]:
        out = []
        for e in self.events:
            if e.kind == "removed":
                out.append((e.iteration, self.names[e.origin], self.names[e.target]))
        return out

    def groups(self) -> list[tuple[str, ...]]:
        members: dict[str, set[str]] = {}
        for s, t in self.kept:
            members.setdefault(t, {t}).add(s)
        return sorted(tuple(sorted(m)) for m in members.values())

    def trace_lines(self) -> list[str]:
        return [e.line(self.names.__getitem__) for e in self.events]


def graph_candidates(edges, placement):
    """Per-worker candidate arrays for ``edges`` with vertices at ``placement[v] = (worker, slot)``.

    Returns ``(cands, n_slots)``; ``n_slots[w]`` is one past the largest slot on worker ``w``.
    """
    n_workers = 1 + max(w for w, _ in placement.values())
    rows = [[] for _ in range(n_workers)]
    for s, t in edges:
        ws, i = placement[s]
        wt, j = placement[t]
        rows[ws].append((i, j, wt))
    n_slots = [0] * n_workers
    for w, i in placement.values():
        n_slots[w] = max(n_slots[w], i + 1)
    cands = []
    for r in rows:
        r.sort()
        a = np.array(r, dtype=np.int64).reshape(-1, 3)
        cands.append(CandidateArrays(a[:, 0], a[:, 1], a[:, 2], np.ones(len(a))))
    return cands, n_slots


def _graph_program(ctx, cands, n_slots, trace, fault):
    mine = cands[ctx.rank]
    peers = [r for r in range(ctx.world.size) if r != ctx.rank]
    # a worker takes part if it owns an origin or a target
    targeted = any((c.rclo == ctx.rank).any() for c in cands)
    group = yield ctx.split(None, len(mine) > 0 or targeted)
    if group is None:
        return None
    windows = yield from FlagWindows.create(ctx, group, n_slots[ctx.rank])
    own = CandidateArrays(mine.isma, mine.iclo, mine.rclo, mine.dclo)
    sub_peers = [p for p in peers if p in group]
    return (yield from resolve(ctx, group, own, windows, peers=sub_peers, trace=trace, fault=fault)), own


def run_graph(
    edges,
    placement=None,
    *,
    checking: bool = True,
    schedule_seed: int | None = None,
    trace: bool = True,
    fault: str | None = None,
) -> GraphRun:
    """Resolve a named edge list on simulated workers.

    ``placement`` maps each vertex name to ``(worker, slot)``; by default
    every vertex sits on worker 0 in sorted-name order.
    """
    if placement is None:
        verts = sorted({v for e in edges for v in e})
        placement = {v: (0, k) for k, v in enumerate(verts)}
    cands, n_slots = graph_candidates(edges, placement)
    rt = Runtime(len(n_slots), checking=checking, schedule_seed=schedule_seed)
    out = rt.run(_graph_program, cands, n_slots, trace, fault)
    names = {v: k for k, v in placement.items()}
    kept, events, counters = [], [], []
    for rank, res in enumerate(out):
        if res is None:
            counters.append(ResolveCounters())
            continue
        result, own = res
        counters.append(result.counters)
        events.extend(result.events)
        for s, t, r in zip(own.isma[result.keep], own.iclo[result.keep], own.rclo[result.keep]):
            kept.append((names[(rank, int(s))], names[(int(r), int(t))]))
    events.sort(key=lambda e: (e.stage != "stage1", e.iteration, e.stage, names[e.origin]))
    return GraphRun(sorted(kept), events, counters, names, rt)

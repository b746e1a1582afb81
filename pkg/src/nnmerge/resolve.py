"""Two-stage graph resolution over shared flag windows.

Stage 1 repeats four epochs separated by three barriers and closed by an
all-reduce: reset candidate targets, mark leaves, filter out targets with a
non-leaf parent, then let leaves attach to available targets while
available non-leaves drop their own outgoing edge. It stops on the first
pass in which no worker changed anything. Stage 2 breaks the remaining dual
links in two more barrier-separated epochs.

All flags live in three boolean windows indexed by the owner's local slot,
so every put/get below goes to the worker that owns the vertex.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nng import CandidateArrays, mark_dual_links
from .runtime import Context, WindowHandle, WorkerGroup

ACTIVE, FINAL, REMOVED = 0, 1, 2
FAULTS = (None, "isolated_both", "flip_tiebreak")


class ConsistencyError(RuntimeError):
    """The edge set violates a structural guarantee of the resolved graph."""


@dataclass
class ResolveCounters:
    n_barrier: int = 0
    n_allreduce: int = 0
    n_rma_put: int = 0
    n_rma_get: int = 0
    n_iterations: int = 0

    def __add__(self, other: "ResolveCounters") -> "ResolveCounters":
        return ResolveCounters(**{k: v + getattr(other, k) for k, v in asdict(self).items()})

    @property
    def n_rma(self) -> int:
        return self.n_rma_put + self.n_rma_get

    def law_holds(self) -> bool:
        return self.n_barrier == 3 * self.n_iterations + 2 and self.n_allreduce == self.n_iterations


@dataclass(frozen=True)
class TraceEvent:
    iteration: int  # stage-1 pass number; 0 for stage 2
    stage: str  # "stage1", "dual" or "isolated"
    kind: str  # "removed" or "finalized"
    origin: tuple[int, int]
    target: tuple[int, int]

    def line(self, name=None) -> str:
        name = name or (lambda v: f"{v[0]}:{v[1]}")
        it = f"iter={self.iteration}" if self.stage == "stage1" else "stage2"
        return f"{it} {self.stage} {self.kind} {name(self.origin)}->{name(self.target)}"


@dataclass
class FlagWindows:
    available: WindowHandle
    leaf: WindowHandle
    merged: WindowHandle

    @classmethod
    def create(cls, ctx: Context, group: WorkerGroup, length: int):
        """Collective allocation of the three zeroed windows (generator)."""
        avail = yield ctx.win_create(group, "l_available", length)
        leaf = yield ctx.win_create(group, "l_leaf", length)
        merged = yield ctx.win_create(group, "l_merged", length)
        return cls(avail, leaf, merged)

    def __len__(self) -> int:
        return min(len(self.available), len(self.leaf), len(self.merged))

    def lock_all(self):
        for w in (self.available, self.leaf, self.merged):
            w.lock_all()

    def unlock_all(self):
        for w in (self.available, self.leaf, self.merged):
            w.unlock_all()


@dataclass
class ResolveResult:
    keep: np.ndarray
    counters: ResolveCounters
    events: list[TraceEvent] = field(default_factory=list)


def resolve(
    ctx: Context,
    group: WorkerGroup,
    cands: CandidateArrays,
    windows: FlagWindows,
    *,
    n_slots: int | None = None,
    peers=None,
    trace: bool = False,
    fault: str | None = None,
):
    """Resolve this worker's share of the graph (generator).

    Every member of ``group`` must call this together. ``cands.dual`` must be
    known, or ``peers`` given so it can be exchanged first. Returns a
    :class:`ResolveResult` whose ``keep`` mask selects the surviving rows.

    ``fault`` injects a known defect so tests can check that verification
    notices: ``"isolated_both"`` drops both links of an isolated dual pair,
    ``"flip_tiebreak"`` makes the higher endpoint drop its link instead.
    """
    me = ctx.rank
    if fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    if n_slots is not None and len(windows) < n_slots:
        raise ValueError(f"flag windows hold {len(windows)} slots, store has {n_slots}")
    if cands.dual is None:
        if peers is None:
            raise ValueError("dual links unknown and no peers given to exchange them")
        yield from mark_dual_links(ctx, cands, len(windows), peers)

    board = ctx.counters
    puts0, gets0 = board["puts"][me], board["gets"][me]
    cnt = ResolveCounters()
    events: list[TraceEvent] = []
    isma, iclo, rclo, dual = cands.isma, cands.iclo, cands.rclo, cands.dual
    status = np.full(len(cands), ACTIVE, dtype=np.int8)
    avail, leaf, merged = windows.available, windows.leaf, windows.merged

    def note(mask, it, stage, kind):
        if trace:
            for m in np.flatnonzero(mask):
                events.append(
                    TraceEvent(it, stage, kind, (me, int(isma[m])), (int(rclo[m]), int(iclo[m])))
                )

    def sync():
        cnt.n_barrier += 1
        return ctx.barrier(group)

    windows.lock_all()
    while True:
        cnt.n_iterations += 1
        it = cnt.n_iterations
        act = status == ACTIVE
        if act.any():
            act &= ~merged.load(isma)

        # clear flags for this pass
        leaf.store(isma[act], True)
        avail.put(rclo[act], iclo[act], True)
        yield sync()

        # a targeted vertex is not a leaf
        leaf.put(rclo[act], iclo[act], False)
        yield sync()

        # a target with a non-leaf parent is unavailable
        is_leaf = leaf.load(isma)
        nonleaf = act & ~is_leaf
        avail.put(rclo[nonleaf], iclo[nonleaf], False)
        yield sync()

        # leaves join available targets; available non-leaves let go of their target
        is_leaf = leaf.load(isma)
        own_avail = avail.load(isma)
        drop = act & ~is_leaf & own_avail & ~dual
        ask = np.flatnonzero(act & is_leaf)
        ok = avail.get(rclo[ask], iclo[ask])
        fin = np.zeros(len(cands), dtype=bool)
        fin[ask[ok]] = True
        status[drop] = REMOVED
        status[fin] = FINAL
        merged.put(rclo[fin], iclo[fin], True)
        merged.store(isma[fin], True)
        note(drop, it, "stage1", "removed")
        note(fin, it, "stage1", "finalized")
        cnt.n_allreduce += 1
        changed = yield ctx.allreduce_sum(group, int(drop.sum() + fin.sum()))
        if changed == 0:
            break

    # stage 2: a vertex with a leaf parent has indegree > 1 if it sits in a dual link
    act = status == ACTIVE
    is_leaf = leaf.load(isma)
    from_leaf = act & is_leaf
    avail.put(rclo[from_leaf], iclo[from_leaf], True)
    yield sync()

    pair = act & ~is_leaf
    if not np.array_equal(pair, act & dual):
        raise ConsistencyError(f"worker {me}: non-dual edge left between non-leaf vertices")
    heavy = pair & avail.load(isma)
    status[heavy] = REMOVED
    note(heavy, 0, "dual", "removed")
    yield sync()

    rest = np.flatnonzero(pair & ~heavy)
    other_heavy = avail.get(rclo[rest], iclo[rest])
    lone = rest[~other_heavy]
    lower = (me < rclo[lone]) | ((me == rclo[lone]) & (isma[lone] < iclo[lone]))
    if fault == "isolated_both":
        lower[:] = True
    elif fault == "flip_tiebreak":
        lower = ~lower
    cut = np.zeros(len(cands), dtype=bool)
    cut[lone[lower]] = True
    status[cut] = REMOVED
    note(cut, 0, "isolated", "removed")
    windows.unlock_all()

    cnt.n_rma_put = int(board["puts"][me] - puts0)
    cnt.n_rma_get = int(board["gets"][me] - gets0)
    return ResolveResult(status != REMOVED, cnt, events)


def compact(cands: CandidateArrays, keep) -> CandidateArrays:
    """Drop removed rows, keeping the survivors dense and in their original order."""
    return cands.select(np.asarray(keep, dtype=bool))

"""Deterministic in-process message passing with one-sided boolean windows.

Worker programs are generator functions ``program(ctx, *args)``. They run
freely between synchronisation points and ``yield`` a request whenever they
need one: ``yield ctx.barrier(group)``, ``total = yield
ctx.allreduce_sum(group, n)``, ``msg = yield ctx.recv(src, tag)``. Sends and
window put/get never block. The scheduler steps one worker at a time, either
in rank order or in an order drawn from ``schedule_seed``, so every run is
reproducible and different seeds give different interleavings.

Window memory follows the unified model: there is one array per owner and
puts land in it immediately. Epochs are opened and closed by the origin
alone (passive target). With ``checking=True`` every slot remembers who
wrote and read it since the last barrier or all-reduce of the window's group;
differing-value writes, and reads of a slot another worker wrote in the same
epoch, raise :class:`RaceError`.
"""
from __future__ import annotations

import json
import random
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np


class CommError(Exception):
    pass


class ProtocolError(CommError):
    pass


class EpochError(CommError):
    pass


class BoundsError(CommError, IndexError):
    pass


class RaceError(CommError):
    pass


class DeadlockError(CommError):
    pass


_group_ids = iter(range(1, 1 << 62))


@dataclass(frozen=True, eq=False)
class WorkerGroup:
    """Ordered set of world ranks. Group rank ``r`` is ``members[r]``."""

    members: tuple[int, ...]
    parent: "WorkerGroup | None" = None
    ident: int = field(default_factory=lambda: next(_group_ids))

    @property
    def size(self) -> int:
        return len(self.members)

    def rank_of(self, world_rank: int) -> int:
        return self.members.index(world_rank)

    def __contains__(self, world_rank) -> bool:
        return world_rank in self.members


class CounterBoard:
    FIELDS = ("puts", "gets", "barriers", "allreduces", "msgs")

    def __init__(self, size: int):
        self.size = size
        self._c = {f: np.zeros(size, dtype=np.int64) for f in self.FIELDS}

    def add(self, name: str, rank: int, n: int = 1):
        if n < 0:
            raise ValueError("counters never decrease")
        self._c[name][rank] += n

    def __getitem__(self, name) -> np.ndarray:
        return self._c[name].copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {f: self._c[f].copy() for f in self.FIELDS}

    def rows(self) -> list[dict]:
        return [
            {"worker": r, **{f: int(self._c[f][r]) for f in self.FIELDS}}
            for r in range(self.size)
        ]

    def to_json(self) -> str:
        return json.dumps(self.rows())


class Window:
    """Shared state of one window: a boolean array per group member."""

    def __init__(self, runtime: "Runtime", group: WorkerGroup, name: str, lengths: dict[int, int]):
        self.runtime = runtime
        self.group = group
        self.name = name
        self.lengths = dict(lengths)
        self.arrays = {r: np.zeros(n, dtype=bool) for r, n in self.lengths.items()}
        self.epoch = 0
        if runtime.checking:
            self._wstamp = {r: np.full(n, -1, np.int64) for r, n in self.lengths.items()}
            self._wval = {r: np.zeros(n, np.int8) for r, n in self.lengths.items()}
            self._writer = {r: np.full(n, -1, np.int64) for r, n in self.lengths.items()}
            self._rstamp = {r: np.full(n, -1, np.int64) for r, n in self.lengths.items()}
            self._reader = {r: np.full(n, -1, np.int64) for r, n in self.lengths.items()}

    def _check_write(self, origin, target, idx, value):
        e = self.epoch
        cur = self._wstamp[target][idx] == e
        if np.any(cur & (self._wval[target][idx] != value)):
            raise RaceError(
                f"window {self.name!r}: differing-value writes to worker {target} in one epoch"
            )
        rcur = self._rstamp[target][idx] == e
        if np.any(rcur & (self._reader[target][idx] != origin)):
            raise RaceError(
                f"window {self.name!r}: worker {origin} writes worker {target} slots read by another worker in the same epoch"
            )
        w = self._writer[target]
        w[idx] = np.where(cur & (w[idx] != origin), -2, origin)
        self._wstamp[target][idx] = e
        self._wval[target][idx] = value

    def _check_read(self, origin, target, idx):
        e = self.epoch
        cur = self._wstamp[target][idx] == e
        if np.any(cur & (self._writer[target][idx] != origin)):
            raise RaceError(
                f"window {self.name!r}: worker {origin} reads worker {target} slots written by another worker in the same epoch"
            )
        r = self._reader[target]
        rcur = self._rstamp[target][idx] == e
        r[idx] = np.where(rcur & (r[idx] != origin), -2, origin)
        self._rstamp[target][idx] = e


class WindowHandle:
    """One worker's access to a :class:`Window`."""

    def __init__(self, window: Window, origin: int):
        self.window = window
        self.origin = origin
        self.is_open = False

    def __len__(self):
        return self.window.lengths[self.origin]

    @property
    def local(self) -> np.ndarray:
        """Read-only view of this worker's own array."""
        v = self.window.arrays[self.origin].view()
        v.flags.writeable = False
        return v

    def lock_all(self):
        if self.is_open:
            raise EpochError("epoch already open")
        self.is_open = True

    def unlock_all(self):
        if not self.is_open:
            raise EpochError("no open epoch to close")
        self.is_open = False

    def _targets(self, target, index):
        index = np.asarray(index, dtype=np.int64).ravel()
        target = np.broadcast_to(np.asarray(target, dtype=np.int64), index.shape)
        return target, index

    def _split(self, target, index):
        if target.size == 0:
            return
        for t in np.unique(target):
            t = int(t)
            if t not in self.window.arrays:
                raise ProtocolError(f"worker {t} is not a member of window {self.window.name!r}")
            sel = target == t
            idx = index[sel]
            n = self.window.lengths[t]
            if idx.min() < 0 or idx.max() >= n:
                raise BoundsError(
                    f"window {self.window.name!r}: index out of range [0, {n}) on worker {t}"
                )
            yield t, sel, idx

    def put(self, target, index, value: bool):
        """Write ``value`` into ``target[index]``; arrays broadcast together."""
        if not self.is_open:
            raise EpochError("put outside an open epoch")
        target, index = self._targets(target, index)
        value = bool(value)
        rt = self.window.runtime
        for t, _, idx in self._split(target, index):
            if rt.checking:
                self.window._check_write(self.origin, t, idx, value)
            self.window.arrays[t][idx] = value
            if t != self.origin:
                rt.counters.add("puts", self.origin, len(idx))

    def get(self, target, index) -> np.ndarray:
        if not self.is_open:
            raise EpochError("get outside an open epoch")
        target, index = self._targets(target, index)
        out = np.zeros(index.shape, dtype=bool)
        rt = self.window.runtime
        for t, sel, idx in self._split(target, index):
            if rt.checking:
                self.window._check_read(self.origin, t, idx)
            out[sel] = self.window.arrays[t][idx]
            if t != self.origin:
                rt.counters.add("gets", self.origin, len(idx))
        return out

    def store(self, index, value: bool):
        """Local write to this worker's own slots (no RMA traffic)."""
        self.put(self.origin, index, value)

    def load(self, index) -> np.ndarray:
        return self.get(self.origin, index)


@dataclass
class _Collective:
    kind: str
    group: WorkerGroup
    value: object = None


@dataclass
class _Recv:
    source: int
    tag: str


class Context:
    """Handle a worker program uses to talk to the runtime."""

    def __init__(self, runtime: "Runtime", rank: int):
        self.runtime = runtime
        self.rank = rank
        self.phase = "main"
        self._t0 = 0.0

    @property
    def world(self) -> WorkerGroup:
        return self.runtime.world

    @property
    def counters(self) -> CounterBoard:
        return self.runtime.counters

    def set_phase(self, name: str):
        now = time.perf_counter()
        self.runtime.timings[self.rank][self.phase] += now - self._t0
        self._t0 = now
        self.phase = name

    def barrier(self, group: WorkerGroup | None = None):
        return _Collective("barrier", group or self.world)

    def allreduce_sum(self, group: WorkerGroup | None, value: int):
        return _Collective("allreduce", group or self.world, int(value))

    def split(self, group: WorkerGroup | None, participates: bool):
        return _Collective("split", group or self.world, bool(participates))

    def win_create(self, group: WorkerGroup | None, name: str, length: int):
        return _Collective("win_create", group or self.world, (name, int(length)))

    def send(self, dest: int, tag: str, payload=None):
        allowed = self.runtime.neighbours
        if allowed is not None and dest not in allowed[self.rank]:
            raise ProtocolError(f"worker {self.rank} may not message non-neighbour {dest}")
        self.runtime._mail[(self.rank, dest, tag)].append(payload)
        self.counters.add("msgs", self.rank)

    def recv(self, source: int, tag: str):
        return _Recv(source, tag)


def exchange(ctx: Context, tag: str, outgoing: dict, peers):
    """Send one message to every peer (``None`` if absent) and receive one back from each."""
    peers = sorted(set(peers))
    stray = set(outgoing) - set(peers)
    if stray:
        raise ProtocolError(f"worker {ctx.rank}: messages for non-neighbours {sorted(stray)}")
    for p in peers:
        ctx.send(p, tag, outgoing.get(p))
    got = {}
    for p in peers:
        got[p] = yield ctx.recv(p, tag)
    return got


class Runtime:
    def __init__(
        self,
        size: int,
        *,
        neighbours=None,
        checking: bool = False,
        schedule_seed: int | None = None,
        max_steps: int = 10_000_000,
    ):
        if size < 1:
            raise ValueError("need at least one worker")
        self.size = size
        self.world = WorkerGroup(tuple(range(size)))
        self.neighbours = None if neighbours is None else [set(n) for n in neighbours]
        self.checking = checking
        self.schedule_seed = schedule_seed
        self.max_steps = max_steps
        self.counters = CounterBoard(size)
        self.timings = [defaultdict(float) for _ in range(size)]
        self.windows: list[Window] = []
        self._mail = defaultdict(deque)
        self._pending: dict[int, dict] = {}

    def run(self, program, *args, **kwargs) -> list:
        """Run ``program(ctx, *args, **kwargs)`` on every worker; returns their return values."""
        rng = random.Random(self.schedule_seed) if self.schedule_seed is not None else None
        ctxs = [Context(self, r) for r in range(self.size)]
        gens = [program(c, *args, **kwargs) for c in ctxs]
        resume = [None] * self.size
        results = [None] * self.size
        runnable = set(range(self.size))
        waiting: dict[int, _Recv] = {}
        blocked: dict[int, _Collective] = {}
        steps = 0

        while runnable or waiting or blocked:
            if not runnable:
                raise DeadlockError(
                    f"no runnable worker; waiting on receive: {sorted(waiting)}, "
                    f"in collectives: {sorted(blocked)}"
                )
            steps += 1
            if steps > self.max_steps:
                raise DeadlockError(f"step budget of {self.max_steps} exhausted")
            r = rng.choice(sorted(runnable)) if rng else min(runnable)
            ctx = ctxs[r]
            ctx._t0 = time.perf_counter()
            try:
                req = gens[r].send(resume[r])
            except StopIteration as stop:
                results[r] = stop.value
                runnable.discard(r)
                req = None
            finally:
                self.timings[r][ctx.phase] += time.perf_counter() - ctx._t0
            resume[r] = None
            if req is None:
                pass
            elif isinstance(req, _Recv):
                runnable.discard(r)
                waiting[r] = req
            elif isinstance(req, _Collective):
                if r not in req.group:
                    raise ProtocolError(f"worker {r} called {req.kind} on a group it is not in")
                runnable.discard(r)
                blocked[r] = req
                self._arrive(r, req, blocked, runnable, resume)
            else:
                raise ProtocolError(f"worker {r} yielded {req!r}, expected a runtime request")

            for w, rq in list(waiting.items()):
                box = self._mail.get((rq.source, w, rq.tag))
                if box:
                    resume[w] = box.popleft()
                    del waiting[w]
                    runnable.add(w)
        return results

    def _arrive(self, r, req, blocked, runnable, resume):
        g = req.group
        slot = self._pending.setdefault(g.ident, {"kind": req.kind, "values": {}})
        if slot["kind"] != req.kind:
            raise ProtocolError(
                f"collective mismatch on group {g.members}: {slot['kind']} vs {req.kind}"
            )
        slot["values"][r] = req.value
        if len(slot["values"]) < g.size:
            return
        del self._pending[g.ident]
        values = slot["values"]
        kind = req.kind
        if kind == "barrier":
            out = {m: None for m in g.members}
            for m in g.members:
                self.counters.add("barriers", m)
        elif kind == "allreduce":
            total = sum(values[m] for m in g.members)
            out = {m: total for m in g.members}
            for m in g.members:
                self.counters.add("allreduces", m)
        elif kind == "split":
            chosen = tuple(m for m in g.members if values[m])
            sub = WorkerGroup(chosen, parent=g) if chosen else None
            out = {m: (sub if values[m] else None) for m in g.members}
        elif kind == "win_create":
            names = {values[m][0] for m in g.members}
            if len(names) != 1:
                raise ProtocolError(f"inconsistent window names: {sorted(names)}")
            win = Window(self, g, names.pop(), {m: values[m][1] for m in g.members})
            self.windows.append(win)
            out = {m: WindowHandle(win, m) for m in g.members}
        else:  # pragma: no cover
            raise ProtocolError(kind)
        if kind in ("barrier", "allreduce"):
            for win in self.windows:
                if win.group is g:
                    win.epoch += 1
        for m in g.members:
            del blocked[m]
            resume[m] = out[m]
            runnable.add(m)

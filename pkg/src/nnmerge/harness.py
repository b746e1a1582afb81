"""Run configuration, the merge-cycle driver, verification runs and reports."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .domain import Decomposition, Domain
from .engine import ParallelResult, distribute, run_parallel, run_stores
from .oracle import Reference
from .parcels import ParcelStore, read_snapshot, sample_artificial
from .partition import MergePartition
from .resolve import FAULTS

log = logging.getLogger(__name__)

MODES = ("verify", "cycles", "stats", "bench", "trace")
PHASES = ("build", "resolve", "merge")


class ConfigError(ValueError):
    pass


class CounterLawError(RuntimeError):
    """Barrier and all-reduce totals disagree with the loop structure."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_optional(conv):
    def parse(text):
        if isinstance(text, str) and text.strip().lower() in ("", "none", "null"):
            return None
        return conv(text)

    return parse


def _parse_ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


@dataclass
class RunConfig:
    """Everything one invocation needs. Keys match the ``key=value`` file format."""

    lx: float = 1.0
    ly: float = 1.0
    lz: float = 1.0
    nx: int = 8
    ny: int = 8
    nz: int = 8
    workers: int = 1
    parcels_per_cell: int = 40
    cycles: int = 1
    seed: int = 0
    mode: str = "cycles"
    output: str | None = None  # JSON report
    csv: str | None = None  # per-cycle rows
    snapshot: str | None = None  # PCLS input population
    checking: bool = False
    schedule_seed: int | None = None
    worker_counts: tuple[int, ...] = (1, 2, 4, 8, 16)
    configs: int = 1000  # verify: number of random populations
    diff: str | None = "verify_diff.json"
    fault: str | None = None

    _PARSERS = {
        "lx": float,
        "ly": float,
        "lz": float,
        "nx": int,
        "ny": int,
        "nz": int,
        "workers": int,
        "parcels_per_cell": int,
        "cycles": int,
        "seed": int,
        "mode": str,
        "output": _parse_optional(str),
        "csv": _parse_optional(str),
        "snapshot": _parse_optional(str),
        "checking": _parse_bool,
        "schedule_seed": _parse_optional(int),
        "worker_counts": _parse_ints,
        "configs": int,
        "diff": _parse_optional(str),
        "fault": _parse_optional(str),
    }

    def __post_init__(self):
        self.worker_counts = _parse_ints(self.worker_counts)
        self.validate()

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, mapping) -> "RunConfig":
        values = {}
        for key, raw in mapping.items():
            key = key.strip().replace("-", "_")
            if key not in cls._PARSERS:
                raise ConfigError(f"unknown configuration key {key!r}")
            conv = cls._PARSERS[key]
            try:
                values[key] = conv(raw) if isinstance(raw, str) or conv is _parse_ints else raw
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
        return cls(**values)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        """``key = value`` lines; ``#`` starts a comment."""
        mapping = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in mapping:
                raise ConfigError(f"line {n}: duplicate key {key!r}")
            mapping[key] = value
        return cls.from_mapping(mapping)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cycles < 1:
            raise ConfigError("cycles must be at least 1")
        if self.workers < 1 or any(w < 1 for w in self.worker_counts):
            raise ConfigError("worker counts must be at least 1")
        if self.parcels_per_cell < 1:
            raise ConfigError("parcels_per_cell must be at least 1")
        if self.configs < 0:
            raise ConfigError("configs must be non-negative")
        if self.fault not in FAULTS:
            raise ConfigError(f"unknown fault {self.fault!r}")
        try:
            dom = self.domain
            for w in {self.workers, *self.worker_counts}:
                Decomposition.for_workers(dom, w)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def domain(self) -> Domain:
        return Domain(extent=(self.lx, self.ly, self.lz), shape=(self.nx, self.ny, self.nz))

    def decomposition(self, workers: int | None = None) -> Decomposition:
        return Decomposition.for_workers(self.domain, workers or self.workers)

    def to_text(self) -> str:
        lines = []
        for key in self.keys():
            v = getattr(self, key)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif v is None:
                v = "none"
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


# -- cycles ------------------------------------------------------------------


def _spread(values) -> dict[str, float]:
    a = np.asarray(list(values), dtype=float)
    return {"min": float(a.min()), "avg": float(a.mean()), "max": float(a.max())}


def _relative_errors(before: dict, after: dict, scale: dict) -> dict[str, float]:
    return {k: abs(after[k] - before[k]) / scale[k] if scale[k] else 0.0 for k in before}


def _magnitudes(store: ParcelStore) -> dict[str, float]:
    """Sum of absolute contributions; the denominator for relative drift of signed totals."""
    n = store.n_local
    v = store.volume[:n]
    w = np.abs(v[:, None] * store.vorticity[:n])
    return {
        "volume": float(v.sum()),
        "buoyancy": float(np.abs(v * store.buoyancy[:n]).sum()),
        "xi": float(w[:, 0].sum()),
        "eta": float(w[:, 1].sum()),
        "zeta": float(w[:, 2].sum()),
    }


@dataclass
class CycleReport:
    cycle: int
    n_before: int
    n_after: int
    n_small: int
    histogram: dict[int, int]
    resolved: bool  # whether any worker took part in resolution
    participants: int
    iterations: int
    barriers: int
    allreduces: int
    rma_puts: int  # summed over workers
    rma_gets: int
    rma_max: int  # largest per-worker put+get count
    msgs: int
    evaluations: int
    migrated: int
    conservation: dict[str, float]
    timings: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def removed(self) -> int:
        return self.n_before - self.n_after

    @property
    def reduction(self) -> float:
        return self.removed / self.n_before if self.n_before else 0.0

    def histogram_removed(self) -> int:
        return sum((n - 1) * c for n, c in self.histogram.items())

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        d["histogram"] = {str(k): v for k, v in self.histogram.items()}
        d["reduction"] = self.reduction
        if not timings:
            d.pop("timings")
        return d

    @classmethod
    def from_result(cls, cycle: int, before: ParcelStore, result: ParallelResult) -> "CycleReport":
        after = result.store
        outcomes = result.outcomes
        part = [o for o in outcomes if o.participated]
        resolved = bool(part)
        if resolved:
            laws = {(o.counters.n_barrier, o.counters.n_allreduce, o.counters.n_iterations) for o in part}
            if len(laws) != 1:
                raise CounterLawError(f"participants disagree on collective counts: {sorted(laws)}")
            barriers, allreduces, iterations = laws.pop()
        else:
            barriers = allreduces = iterations = 0
        board = result.runtime.counters
        rma = board["puts"] + board["gets"]
        timings = {
            ph: _spread(t.get(ph, 0.0) for t in result.runtime.timings) for ph in PHASES
        }
        return cls(
            cycle=cycle,
            n_before=before.n_local,
            n_after=after.n_local,
            n_small=sum(o.n_small for o in outcomes),
            histogram=result.partition.histogram(),
            resolved=resolved,
            participants=len(part),
            iterations=iterations,
            barriers=barriers,
            allreduces=allreduces,
            rma_puts=int(board["puts"].sum()),
            rma_gets=int(board["gets"].sum()),
            rma_max=int(rma.max()),
            msgs=int(board["msgs"].sum()),
            evaluations=result.evaluations,
            migrated=sum(o.n_migrated for o in outcomes),
            conservation=_relative_errors(before.totals(), after.totals(), _magnitudes(before)),
            timings=timings,
        )


def initial_population(config: RunConfig, cycle: int = 0) -> ParcelStore:
    if config.snapshot:
        try:
            return read_snapshot(config.snapshot)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load snapshot: {exc}") from None
    return sample_artificial(config.domain, config.parcels_per_cell, config.seed + cycle)


def run_cycles(config: RunConfig, population: ParcelStore | None = None) -> list[CycleReport]:
    """Build, resolve, merge and redistribute ``config.cycles`` times.

    In ``stats`` and ``bench`` mode without a snapshot every cycle samples a
    fresh population (seed ``seed + cycle``); otherwise the merged
    population of one cycle is the input of the next.
    """
    domain = config.domain
    dec = config.decomposition()
    resample = config.mode in ("stats", "bench") and not config.snapshot and population is None
    pop = population if population is not None else initial_population(config)
    reports = []
    for c in range(config.cycles):
        if resample and c > 0:
            pop = sample_artificial(domain, config.parcels_per_cell, config.seed + c)
        stores = distribute(pop, dec)
        result = run_stores(
            stores,
            dec,
            checking=config.checking,
            schedule_seed=None if config.schedule_seed is None else config.schedule_seed + c,
            apply=True,
            fault=config.fault,
        )
        rep = CycleReport.from_result(c, pop, result)
        if rep.histogram_removed() != rep.removed:
            raise RuntimeError(f"cycle {c}: histogram accounts for {rep.histogram_removed()} merges, {rep.removed} parcels removed")
        log.info("cycle %d: %d -> %d parcels (%.1f%%)", c, rep.n_before, rep.n_after, 100 * rep.reduction)
        reports.append(rep)
        pop = result.store
    return reports


# -- counters ----------------------------------------------------------------


def expected_barriers(allreduces: int, calls: int) -> int:
    """Barrier total implied by the loop structure: three per pass plus two per call."""
    return 3 * allreduces + 2 * calls


@dataclass
class CounterSummary:
    calls: int
    barriers: int
    allreduces: int
    iterations: int
    rma_puts: int
    rma_gets: int
    rma_max: int

    @property
    def expected_barriers(self) -> int:
        return expected_barriers(self.allreduces, self.calls)

    @property
    def law_holds(self) -> bool:
        return self.barriers == self.expected_barriers and self.allreduces == self.iterations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["expected_barriers"] = self.expected_barriers
        d["law_holds"] = self.law_holds
        return d


def report_counters(reports, *, strict: bool = True) -> CounterSummary:
    """Totals over cycles; raises :class:`CounterLawError` on a violated law when ``strict``."""
    reports = list(reports)
    if not reports:
        raise ValueError("no cycle reports to summarise")
    s = CounterSummary(
        calls=sum(r.resolved for r in reports),
        barriers=sum(r.barriers for r in reports),
        allreduces=sum(r.allreduces for r in reports),
        iterations=sum(r.iterations for r in reports),
        rma_puts=sum(r.rma_puts for r in reports),
        rma_gets=sum(r.rma_gets for r in reports),
        rma_max=max(r.rma_max for r in reports),
    )
    if strict and not s.law_holds:
        raise CounterLawError(
            f"{s.barriers} barriers over {s.calls} calls and {s.allreduces} all-reduces; "
            f"expected {s.expected_barriers}"
        )
    return s


# -- statistics --------------------------------------------------------------


def merge_statistics(reports) -> dict:
    hist: dict[int, int] = {}
    for r in reports:
        for n, c in r.histogram.items():
            hist[n] = hist.get(n, 0) + c
    clusters = sum(hist.values())
    red = [r.reduction for r in reports]
    return {
        "cycles": len(reports),
        "mean_reduction": float(np.mean(red)) if red else 0.0,
        "min_reduction": float(np.min(red)) if red else 0.0,
        "max_reduction": float(np.max(red)) if red else 0.0,
        "histogram": {str(k): v for k, v in sorted(hist.items())},
        "clusters": clusters,
        "two_way_fraction": hist.get(2, 0) / clusters if clusters else 0.0,
        "max_n": max(hist) if hist else 0,
        "max_conservation_error": max(
            (max(r.conservation.values()) for r in reports), default=0.0
        ),
    }


def report_document(config: RunConfig, reports, *, timings: bool = True) -> dict:
    return {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
        "cycles": [r.to_dict(timings=timings) for r in reports],
        "counters": report_counters(reports, strict=False).to_dict(),
        "statistics": merge_statistics(reports),
    }


def write_json(path, document: dict) -> None:
    Path(path).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")


CSV_FIELDS = (
    "cycle",
    "n_before",
    "n_after",
    "reduction",
    "n_small",
    "participants",
    "iterations",
    "barriers",
    "allreduces",
    "rma_puts",
    "rma_gets",
    "evaluations",
    "migrated",
)


def write_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        sizes = sorted({n for r in reports for n in r.histogram})
        w.writerow(list(CSV_FIELDS) + [f"n{n}" for n in sizes] + [f"{p}_{s}" for p in PHASES for s in ("min", "avg", "max")])
        for r in reports:
            d = r.to_dict()
            row = [d[k] for k in CSV_FIELDS] + [r.histogram.get(n, 0) for n in sizes]
            row += [r.timings[p][s] for p in PHASES for s in ("min", "avg", "max")]
            w.writerow(row)


# -- verification ------------------------------------------------------------


@dataclass
class VerifyResult:
    passed: bool
    configs: int
    worker_counts: tuple[int, ...]
    merges: int  # merges checked, summed over populations and worker counts
    mismatch: dict | None = None
    warning: str | None = None

    def summary(self) -> str:
        if self.mismatch:
            m = self.mismatch
            return f"FAIL: seed {m['seed']} with {m['workers']} workers differs from the reference ({m['detail']})"
        text = f"pass, {self.merges} merges verified over {self.configs} configs x workers {list(self.worker_counts)}"
        if self.warning:
            text += f" (warning: {self.warning})"
        return text


def partition_diff(engine: MergePartition, reference: MergePartition) -> dict:
    a = {g.members: g.root for g in engine.groups}
    b = {g.members: g.root for g in reference.groups}
    return {
        "only_engine": [{"root": a[k], "members": list(k)} for k in sorted(set(a) - set(b))],
        "only_reference": [{"root": b[k], "members": list(k)} for k in sorted(set(b) - set(a))],
        "root_differs": [
            {"members": list(k), "engine_root": a[k], "reference_root": b[k]}
            for k in sorted(set(a) & set(b))
            if a[k] != b[k]
        ],
    }


def verify(config: RunConfig, *, progress=None) -> VerifyResult:
    """Compare the engine with the serial reference on ``config.configs`` random populations.

    Population ``k`` uses seed ``config.seed + k``. The first disagreement
    stops the run and, if ``config.diff`` is set, is written there.
    """
    counts = tuple(config.worker_counts)
    if config.configs == 0:
        msg = "no configurations requested; nothing was checked"
        warnings.warn(msg, stacklevel=2)
        return VerifyResult(True, 0, counts, 0, warning=msg)
    domain = config.domain
    merges = 0
    for k in range(config.configs):
        seed = config.seed + k
        pop = sample_artificial(domain, config.parcels_per_cell, seed)
        ref = Reference(pop, domain)
        for w in counts:
            dec = Decomposition.for_workers(domain, w)
            expected = ref.partition(dec)
            got = run_parallel(
                pop,
                domain,
                w,
                apply=False,
                checking=config.checking,
                schedule_seed=config.schedule_seed,
                fault=config.fault,
            ).partition
            if got != expected:
                diff = partition_diff(got, expected)
                detail = (
                    f"{len(diff['only_engine'])} groups only in engine, "
                    f"{len(diff['only_reference'])} only in reference, "
                    f"{len(diff['root_differs'])} with another root"
                )
                mismatch = {"seed": seed, "workers": w, "detail": detail, **diff}
                if config.diff:
                    write_json(config.diff, mismatch)
                return VerifyResult(False, k + 1, counts, merges, mismatch)
            merges += got.n_merges
        if progress:
            progress(k + 1, merges)
    return VerifyResult(True, config.configs, counts, merges)

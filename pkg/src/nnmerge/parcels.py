"""Parcel attributes, smallness, artificial sampling and cluster merging."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import Decomposition, Domain, cell_of, minimum_image_delta

# columns of ParcelStore.shape
LAM1, LAM2, THETA, PHI = range(4)


@dataclass(frozen=True)
class Parcel:
    gid: int
    position: tuple[float, float, float]
    volume: float
    buoyancy: float = 0.0
    vorticity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lam1: float = 1.0
    lam2: float = 1.0
    theta: float = 0.0
    phi: float = 0.0


def is_small(parcel: Parcel, domain: Domain) -> bool:
    return parcel.volume < domain.vmin


@dataclass
class ParcelStore:
    """Columnar parcel storage for one worker.

    Rows ``[0, n_local)`` are owned. Rows after that are copies of small
    parcels owned elsewhere; for those only ``gid``, ``position`` and
    ``volume`` are meaningful and ``remote_owner``/``remote_index`` record
    where the original lives.
    """

    gid: np.ndarray
    position: np.ndarray
    volume: np.ndarray
    buoyancy: np.ndarray
    vorticity: np.ndarray
    shape: np.ndarray
    n_local: int = -1
    remote_owner: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    remote_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __post_init__(self):
        self.gid = np.asarray(self.gid, dtype=np.int64)
        n = len(self.gid)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(n, 3)
        self.volume = np.asarray(self.volume, dtype=np.float64)
        self.buoyancy = np.asarray(self.buoyancy, dtype=np.float64)
        self.vorticity = np.asarray(self.vorticity, dtype=np.float64).reshape(n, 3)
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(n, 4)
        if self.n_local < 0:
            self.n_local = n
        if len(self.remote_owner) != n - self.n_local:
            raise ValueError("remote provenance does not match the remote row count")

    @classmethod
    def empty(cls) -> "ParcelStore":
        return cls(
            gid=np.zeros(0, np.int64),
            position=np.zeros((0, 3)),
            volume=np.zeros(0),
            buoyancy=np.zeros(0),
            vorticity=np.zeros((0, 3)),
            shape=np.zeros((0, 4)),
        )

    @classmethod
    def from_parcels(cls, parcels) -> "ParcelStore":
        parcels = list(parcels)
        if not parcels:
            return cls.empty()
        return cls(
            gid=[p.gid for p in parcels],
            position=[p.position for p in parcels],
            volume=[p.volume for p in parcels],
            buoyancy=[p.buoyancy for p in parcels],
            vorticity=[p.vorticity for p in parcels],
            shape=[(p.lam1, p.lam2, p.theta, p.phi) for p in parcels],
        )

    @classmethod
    def concat(cls, stores) -> "ParcelStore":
        """Join local rows of several stores (remote rows are dropped)."""
        stores = [s.local() for s in stores]
        if not stores:
            return cls.empty()
        return cls(
            gid=np.concatenate([s.gid for s in stores]),
            position=np.concatenate([s.position for s in stores]),
            volume=np.concatenate([s.volume for s in stores]),
            buoyancy=np.concatenate([s.buoyancy for s in stores]),
            vorticity=np.concatenate([s.vorticity for s in stores]),
            shape=np.concatenate([s.shape for s in stores]),
        )

    def __len__(self) -> int:
        return len(self.gid)

    @property
    def n_remote(self) -> int:
        return len(self.gid) - self.n_local

    def parcel(self, i: int) -> Parcel:
        lam1, lam2, theta, phi = self.shape[i]
        return Parcel(
            gid=int(self.gid[i]),
            position=tuple(self.position[i]),
            volume=float(self.volume[i]),
            buoyancy=float(self.buoyancy[i]),
            vorticity=tuple(self.vorticity[i]),
            lam1=float(lam1),
            lam2=float(lam2),
            theta=float(theta),
            phi=float(phi),
        )

    def take(self, rows) -> "ParcelStore":
        """New all-local store holding ``rows`` (which must be local rows)."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size and rows.max() >= self.n_local:
            raise IndexError("take() only accepts local rows")
        return ParcelStore(
            gid=self.gid[rows],
            position=self.position[rows],
            volume=self.volume[rows],
            buoyancy=self.buoyancy[rows],
            vorticity=self.vorticity[rows],
            shape=self.shape[rows],
        )

    def local(self) -> "ParcelStore":
        if self.n_remote == 0:
            return self
        return self.take(np.arange(self.n_local))

    def sorted_by_gid(self) -> "ParcelStore":
        return self.local().take(np.argsort(self.gid[: self.n_local], kind="stable"))

    def append_remote(self, gid, position, volume, owner, owner_index) -> "ParcelStore":
        gid = np.asarray(gid, dtype=np.int64)
        m = len(gid)
        return ParcelStore(
            gid=np.concatenate([self.gid, gid]),
            position=np.concatenate([self.position, np.asarray(position).reshape(m, 3)]),
            volume=np.concatenate([self.volume, volume]),
            buoyancy=np.concatenate([self.buoyancy, np.zeros(m)]),
            vorticity=np.concatenate([self.vorticity, np.zeros((m, 3))]),
            shape=np.concatenate([self.shape, np.zeros((m, 4))]),
            n_local=self.n_local,
            remote_owner=np.concatenate([self.remote_owner, np.asarray(owner, np.int64)]),
            remote_index=np.concatenate([self.remote_index, np.asarray(owner_index, np.int64)]),
        )

    def rows(self, idx) -> dict:
        """Attribute bundle for shipping local rows to another worker."""
        idx = np.asarray(idx, dtype=np.int64)
        return {
            "gid": self.gid[idx],
            "position": self.position[idx],
            "volume": self.volume[idx],
            "buoyancy": self.buoyancy[idx],
            "vorticity": self.vorticity[idx],
            "shape": self.shape[idx],
        }

    @classmethod
    def from_rows(cls, bundles) -> "ParcelStore":
        bundles = [b for b in bundles if len(b["gid"])]
        if not bundles:
            return cls.empty()
        return cls(**{k: np.concatenate([b[k] for b in bundles]) for k in bundles[0]})

    def totals(self) -> dict[str, float]:
        """Volume and volume-integrated buoyancy/vorticity of the local rows."""
        n = self.n_local
        v = self.volume[:n]
        w = v[:, None] * self.vorticity[:n]
        return {
            "volume": float(np.sum(v)),
            "buoyancy": float(np.sum(v * self.buoyancy[:n])),
            "xi": float(np.sum(w[:, 0])),
            "eta": float(np.sum(w[:, 1])),
            "zeta": float(np.sum(w[:, 2])),
        }


# -- sampling -------------------------------------------------------------


def sample_artificial(
    domain: Domain,
    n_per_cell: int,
    seed: int,
    decomposition: Decomposition | None = None,
    rank: int = 0,
) -> ParcelStore:
    """Uniform artificial population, ``n_per_cell`` parcels in every cell.

    Each z column draws from its own stream keyed by ``(seed, i, j)``, so the
    global population does not depend on how columns are split between
    workers. With a decomposition only the columns owned by ``rank`` are
    generated.
    """
    if n_per_cell < 1:
        raise ValueError("n_per_cell must be at least 1")
    nx, ny, nz = domain.shape
    if decomposition is None:
        xr, yr = (0, nx), (0, ny)
    else:
        xr, yr = decomposition.owned_range(rank)
    dx, dy, dz = domain.spacing
    ox, oy, oz = domain.origin
    vmin = domain.vmin
    m = nz * n_per_cell
    k = np.repeat(np.arange(nz), n_per_cell)

    chunks = []
    for i in range(*xr):
        for j in range(*yr):
            rng = np.random.default_rng([seed, i, j])
            u = rng.random((m, 3))
            pos = np.empty((m, 3))
            pos[:, 0] = ox + (i + u[:, 0]) * dx
            pos[:, 1] = oy + (j + u[:, 1]) * dy
            pos[:, 2] = oz + (k + u[:, 2]) * dz
            vort = rng.uniform(-10.0, 10.0, (m, 3))
            buoy = rng.uniform(-1.0, 1.0, m)
            vol = rng.uniform(0.5 * vmin, 1.5 * vmin, m)
            shape = np.empty((m, 4))
            shape[:, LAM1] = rng.uniform(1.0, 4.0, m)
            shape[:, LAM2] = rng.uniform(1.0, 4.0, m)
            shape[:, THETA] = rng.uniform(0.0, 2 * np.pi, m)
            shape[:, PHI] = rng.uniform(0.0, np.pi, m)
            gid = ((i * ny + j) * nz) * n_per_cell + np.arange(m, dtype=np.int64)
            chunks.append((gid, pos, vol, buoy, vort, shape, i, j, k))

    if not chunks:
        return ParcelStore.empty()
    gid = np.concatenate([c[0] for c in chunks])
    pos = np.concatenate([c[1] for c in chunks])
    expect = np.concatenate(
        [np.stack([np.full(m, c[6]), np.full(m, c[7]), c[8]], axis=1) for c in chunks]
    )
    # (i + u) * dx may round onto the upper face; pull such points back inside
    for _ in range(4):
        bad = np.any(cell_of(domain, pos) != expect, axis=1)
        if not bad.any():
            break
        pos[bad] = np.nextafter(pos[bad], -np.inf)
    return ParcelStore(
        gid=gid,
        position=pos,
        volume=np.concatenate([c[2] for c in chunks]),
        buoyancy=np.concatenate([c[3] for c in chunks]),
        vorticity=np.concatenate([c[4] for c in chunks]),
        shape=np.concatenate([c[5] for c in chunks]),
    )


# -- merging --------------------------------------------------------------


def merge_clusters(domain: Domain, label, rows: dict) -> tuple[np.ndarray, dict]:
    """Merge rows sharing a label into one parcel per label.

    Positions are averaged with minimum-image displacements measured from
    the lowest-gid member, so the result does not depend on row order beyond
    floating-point summation order. Returns the sorted unique labels and a
    bundle of merged attributes aligned with them.
    """
    label = np.asarray(label)
    gid = rows["gid"]
    labels, inv = np.unique(label, return_inverse=True)
    ng = len(labels)
    order = np.lexsort((gid, inv))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inv[order][1:] != inv[order][:-1]
    ref_row = np.empty(ng, dtype=np.int64)
    ref_row[inv[order][first]] = order[first]

    vol = rows["volume"]
    vsum = np.bincount(inv, weights=vol, minlength=ng)

    def wmean(values):
        return np.bincount(inv, weights=vol * values, minlength=ng) / vsum

    ref_pos = rows["position"][ref_row]
    delta = minimum_image_delta(domain, rows["position"], ref_pos[inv])
    pos = ref_pos + np.stack([wmean(delta[:, d]) for d in range(3)], axis=1)
    oz, lz = domain.origin[2], domain.extent[2]
    pos[:, 2] = np.clip(pos[:, 2], oz, oz + lz)
    pos = domain.normalise(pos)

    merged = {
        "gid": gid[ref_row],
        "position": pos,
        "volume": vsum,
        "buoyancy": wmean(rows["buoyancy"]),
        "vorticity": np.stack([wmean(rows["vorticity"][:, d]) for d in range(3)], axis=1),
        "shape": np.stack([wmean(rows["shape"][:, d]) for d in range(4)], axis=1),
    }
    return labels, merged


def merge_group(members, domain: Domain) -> Parcel:
    """Collapse one cluster of parcels into a single parcel."""
    members = list(members)
    if not members:
        raise ValueError("cannot merge an empty group")
    if len(members) == 1:
        return members[0]
    store = ParcelStore.from_parcels(members)
    _, merged = merge_clusters(domain, np.zeros(len(members), np.int64), store.rows(np.arange(len(store))))
    out = ParcelStore(**merged)
    return out.parcel(0)


# -- snapshots ------------------------------------------------------------

MAGIC = b"PCLS"
VERSION = 1
_COLUMNS = (
    ("gid", "<i8", None),
    ("x", "<f8", ("position", 0)),
    ("y", "<f8", ("position", 1)),
    ("z", "<f8", ("position", 2)),
    ("volume", "<f8", None),
    ("buoyancy", "<f8", None),
    ("xi", "<f8", ("vorticity", 0)),
    ("eta", "<f8", ("vorticity", 1)),
    ("zeta", "<f8", ("vorticity", 2)),
    ("lam1", "<f8", ("shape", LAM1)),
    ("lam2", "<f8", ("shape", LAM2)),
    ("theta", "<f8", ("shape", THETA)),
    ("phi", "<f8", ("shape", PHI)),
)
_HEADER = struct.Struct("<4sIQI")


def _column(store: ParcelStore, name, src):
    if src is None:
        return getattr(store, name)[: store.n_local]
    attr, col = src
    return getattr(store, attr)[: store.n_local, col]


def write_snapshot(path, store: ParcelStore) -> None:
    """Columnar little-endian dump: header (magic, version, parcel count, column count) then one array per column."""
    n = store.n_local
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, len(_COLUMNS)))
        for name, dtype, src in _COLUMNS:
            fh.write(np.ascontiguousarray(_column(store, name, src), dtype=dtype).tobytes())


def read_snapshot(path) -> ParcelStore:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated snapshot header")
    magic, version, n, ncol = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION or ncol != len(_COLUMNS):
        raise ValueError(f"{path}: unsupported snapshot version {version} with {ncol} columns")
    if len(data) != _HEADER.size + 8 * n * ncol:
        raise ValueError(f"{path}: expected {n} parcels, payload size differs")
    off = _HEADER.size
    cols = {}
    for name, dtype, _ in _COLUMNS:
        cols[name] = np.frombuffer(data, dtype=dtype, count=n, offset=off).copy()
        off += 8 * n
    return _store_from_columns(cols)


def _store_from_columns(cols) -> ParcelStore:
    return ParcelStore(
        gid=cols["gid"],
        position=np.stack([cols["x"], cols["y"], cols["z"]], axis=1),
        volume=cols["volume"],
        buoyancy=cols["buoyancy"],
        vorticity=np.stack([cols["xi"], cols["eta"], cols["zeta"]], axis=1),
        shape=np.stack([cols["lam1"], cols["lam2"], cols["theta"], cols["phi"]], axis=1),
    )


def write_csv(path, store: ParcelStore) -> None:
    names = [c[0] for c in _COLUMNS]
    cols = [_column(store, name, src) for name, _, src in _COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in range(store.n_local):
            w.writerow([int(cols[0][r])] + [repr(float(c[r])) for c in cols[1:]])


def read_csv(path) -> ParcelStore:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    cols = {}
    for name, dtype, _ in _COLUMNS:
        cols[name] = np.array([r[name] for r in rows], dtype=np.int64 if name == "gid" else np.float64)
    return _store_from_columns(cols)

"""Merge partitions stored as flat edge arrays.

A partition is the set of ``member -> root`` edges produced by one merge
cycle; every root also belongs to its own group. Keeping the edges as two
sorted arrays makes comparing partitions with a hundred thousand parcels a
handful of numpy calls.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True, order=True)
class MergeGroup:
    root: int
    members: tuple[int, ...]  # sorted gids, root included

    @property
    def size(self) -> int:
        return len(self.members)


class MergePartition:
    """Edges ``member[i] -> root[i]`` sorted by member gid.

    ``isolated`` lists roots of groups whose root choice depends on the
    worker layout (an isolated dual link); only the reference sets it.
    """

    def __init__(self, member=(), root=(), isolated=()):
        member = np.asarray(member, dtype=np.int64).ravel()
        root = np.asarray(root, dtype=np.int64).ravel()
        if member.shape != root.shape:
            raise ValueError("member and root arrays differ in length")
        order = np.argsort(member, kind="stable")
        self.member = member[order]
        self.root = root[order]
        self.isolated = np.unique(np.asarray(isolated, dtype=np.int64))
        if len(self.member) and np.any(self.member[1:] == self.member[:-1]):
            raise ValueError("a parcel is listed under two roots")
        if np.isin(self.root, self.member).any():
            raise ValueError("a root is itself a member of another group (chain)")

    @classmethod
    def from_groups(cls, groups, isolated=()) -> "MergePartition":
        member, root = [], []
        for g in groups:
            for m in g.members:
                if m != g.root:
                    member.append(m)
                    root.append(g.root)
        return cls(member, root, isolated)

    @classmethod
    def concat(cls, parts) -> "MergePartition":
        parts = list(parts)
        if not parts:
            return cls()
        return cls(
            np.concatenate([p.member for p in parts]),
            np.concatenate([p.root for p in parts]),
            np.concatenate([p.isolated for p in parts]),
        )

    # -- views ----------------------------------------------------------

    @cached_property
    def groups(self) -> list[MergeGroup]:
        order = np.lexsort((self.member, self.root))
        r, m = self.root[order].tolist(), self.member[order].tolist()
        out: dict[int, list[int]] = {}
        for a, b in zip(r, m):
            out.setdefault(a, [a]).append(b)
        return [MergeGroup(k, tuple(sorted(v))) for k, v in out.items()]

    def roots(self) -> np.ndarray:
        return np.unique(self.root)

    def root_map(self) -> tuple[np.ndarray, np.ndarray]:
        """Every grouped gid, ascending, with the root of its group."""
        roots = self.roots()
        gids = np.concatenate([roots, self.member])
        of = np.concatenate([roots, self.root])
        order = np.argsort(gids)
        return gids[order], of[order]

    def labels(self) -> tuple[np.ndarray, np.ndarray]:
        """Every grouped gid, ascending, with the smallest gid of its group."""
        gids, of = self.root_map()
        roots, inv = np.unique(of, return_inverse=True)
        low = np.full(len(roots), np.iinfo(np.int64).max)
        np.minimum.at(low, inv, gids)
        return gids, low[inv]

    def member_sets(self) -> list[tuple[int, ...]]:
        return sorted(g.members for g in self.groups)

    def histogram(self) -> dict[int, int]:
        """Group size (root included) to number of groups."""
        _, counts = np.unique(self.root, return_counts=True)
        sizes, n = np.unique(counts + 1, return_counts=True)
        return {int(s): int(c) for s, c in zip(sizes, n)}

    @property
    def n_merges(self) -> int:
        """Parcels removed by applying the partition."""
        return len(self.member)

    def __len__(self) -> int:
        return len(self.roots())

    # -- comparison -----------------------------------------------------

    def same_members(self, other: "MergePartition") -> bool:
        a, b = self.labels(), other.labels()
        return np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def root_mismatches(self, other: "MergePartition") -> np.ndarray:
        """Grouped gids whose root differs; assumes equal member sets."""
        ga, ra = self.root_map()
        gb, rb = other.root_map()
        if not np.array_equal(ga, gb):
            raise ValueError("partitions group different parcels")
        return ga[ra != rb]

    def matches(self, reference: "MergePartition") -> bool:
        """Equal member sets, and equal roots outside the reference's isolated links."""
        if not self.same_members(reference):
            return False
        bad = self.root_mismatches(reference)
        if len(bad) == 0:
            return True
        gids, of = reference.root_map()
        return bool(np.isin(of[np.searchsorted(gids, bad)], reference.isolated).all())

    def __eq__(self, other) -> bool:
        # exact gid-level equality of the groups and their roots; ``isolated`` is annotation only
        if not isinstance(other, MergePartition):
            return NotImplemented
        return np.array_equal(self.member, other.member) and np.array_equal(self.root, other.root)

    __hash__ = None

    # -- serialisation --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "groups": [{"root": g.root, "members": list(g.members)} for g in self.groups],
            "isolated_roots": self.isolated.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "MergePartition":
        groups = [MergeGroup(int(d["root"]), tuple(int(m) for m in d["members"])) for d in data["groups"]]
        return cls.from_groups(groups, data.get("isolated_roots", ()))

    @classmethod
    def from_json(cls, text: str) -> "MergePartition":
        return cls.from_dict(json.loads(text))

    def __repr__(self) -> str:
        return f"MergePartition(groups={len(self)}, merges={self.n_merges}, isolated={len(self.isolated)})"

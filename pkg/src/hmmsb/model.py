"""Domain types shared across the package.

Paths are stored as an ``(N, K)`` integer array of 1-based branch labels;
branch labels are local to their parent.  Level indicators are stored as two
``(N, N)`` integer arrays (donor and receiver level of every ordered pair)
with a zero diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import betaln


class ConsistencyError(RuntimeError):
    """Internal bookkeeping no longer matches the state it summarises."""


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 1.0
    m: float = 0.5
    pi: float = 0.5
    lambda1: float = 0.5
    lambda2: float = 0.5
    max_depth: int = 2

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0 < self.m < 1:
            raise ValueError(f"m must lie in (0, 1), got {self.m}")
        if not self.pi > 0:
            raise ValueError(f"pi must be positive, got {self.pi}")
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("lambda1 and lambda2 must be positive")
        if int(self.max_depth) != self.max_depth or self.max_depth < 1:
            raise ValueError(f"max_depth must be a positive integer, got {self.max_depth}")

    @property
    def K(self) -> int:
        return int(self.max_depth)

    def replace(self, **changes) -> "Hyperparams":
        values = {**self.as_dict(), **changes}
        return Hyperparams(**values)

    def as_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "m": self.m,
            "pi": self.pi,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "max_depth": int(self.max_depth),
        }


@dataclass
class DirectedNetwork:
    """Binary directed graph without self-edges.

    The diagonal of ``edges`` is forced to zero on construction and is never
    read by any count.
    """

    edges: np.ndarray
    node_labels: Optional[list[str]] = None

    def __post_init__(self):
        e = np.asarray(self.edges)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError("edges must be a square matrix")
        if not np.isin(e, (0, 1)).all():
            raise ValueError("edges must be binary")
        e = e.astype(np.uint8, copy=True)
        np.fill_diagonal(e, 0)
        self.edges = e
        if self.node_labels is not None and len(self.node_labels) != e.shape[0]:
            raise ValueError("node_labels must have one entry per actor")

    @property
    def n_actors(self) -> int:
        return self.edges.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.edges.sum())

    def density(self) -> float:
        n = self.n_actors
        return self.n_edges / (n * (n - 1)) if n > 1 else 0.0

    def subgraph(self, actors: Sequence[int]) -> "DirectedNetwork":
        idx = np.asarray(actors, dtype=np.int64)
        labels = None
        if self.node_labels is not None:
            labels = [self.node_labels[i] for i in idx]
        return DirectedNetwork(self.edges[np.ix_(idx, idx)], labels)

    def __eq__(self, other):
        if not isinstance(other, DirectedNetwork):
            return NotImplemented
        return (np.array_equal(self.edges, other.edges)
                and self.node_labels == other.node_labels)


@dataclass
class LevelAssignments:
    """Donor level ``donor[i, j]`` (actor i's indicator) and receiver level
    ``receiver[i, j]`` (actor j's indicator) of every ordered pair i != j."""

    donor: np.ndarray
    receiver: np.ndarray

    def __post_init__(self):
        self.donor = np.array(self.donor, dtype=np.int64)
        self.receiver = np.array(self.receiver, dtype=np.int64)
        if self.donor.shape != self.receiver.shape:
            raise ValueError("donor and receiver matrices differ in shape")
        np.fill_diagonal(self.donor, 0)
        np.fill_diagonal(self.receiver, 0)

    @property
    def n_actors(self) -> int:
        return self.donor.shape[0]

    def validate(self, max_depth: int) -> None:
        off = ~np.eye(self.n_actors, dtype=bool)
        for name, z in (("donor", self.donor), ("receiver", self.receiver)):
            vals = z[off]
            if vals.size and (vals.min() < 1 or vals.max() > max_depth):
                raise ValueError(f"{name} levels must lie in 1..{max_depth}")

    def actor_counts(self, max_depth: int) -> np.ndarray:
        """Per-actor histogram of its own indicators, shape ``(N, K + 1)``;
        column 0 is unused."""
        n = self.n_actors
        counts = np.zeros((n, max_depth + 1), dtype=np.int64)
        off = ~np.eye(n, dtype=bool)
        rows, cols = np.nonzero(off)
        np.add.at(counts, (rows, self.donor[rows, cols]), 1)
        np.add.at(counts, (cols, self.receiver[rows, cols]), 1)
        return counts

    def copy(self) -> "LevelAssignments":
        return LevelAssignments(self.donor.copy(), self.receiver.copy())

    def __eq__(self, other):
        if not isinstance(other, LevelAssignments):
            return NotImplemented
        return (np.array_equal(self.donor, other.donor)
                and np.array_equal(self.receiver, other.receiver))


class BEntryKey(NamedTuple):
    """One realised entry of the compatibility matrices.

    ``parent`` is the shared path prefix (length ``level - 1``); the two
    children are branch labels under that parent.
    """

    parent: tuple
    donor_child: int
    receiver_child: int

    @property
    def level(self) -> int:
        return len(self.parent) + 1


class _Incompatible:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INCOMPATIBLE"

    def __bool__(self):
        return False


INCOMPATIBLE = _Incompatible()


def resolve_sb(c_i, c_j, z_donor: int, z_recv: int):
    """Return the B entry an interaction uses, or ``INCOMPATIBLE``.

    Both levels are coarsened to their minimum; the interaction is defined
    only when the two paths agree above that level.
    """
    z = min(int(z_donor), int(z_recv))
    if z < 1:
        raise ValueError("levels are 1-based")
    if len(c_i) < z or len(c_j) < z:
        raise ValueError(f"paths shorter than level {z}")
    parent = tuple(int(x) for x in c_i[: z - 1])
    if parent != tuple(int(x) for x in c_j[: z - 1]):
        return INCOMPATIBLE
    return BEntryKey(parent, int(c_i[z - 1]), int(c_j[z - 1]))


class CompatibilityStats:
    """Counts of present / absent edges assigned to each realised B entry."""

    def __init__(self):
        self._counts: dict[BEntryKey, list[int]] = {}

    def add(self, key: BEntryKey, edge_value: int) -> None:
        slot = self._counts.setdefault(key, [0, 0])
        slot[0 if edge_value else 1] += 1

    def remove(self, key: BEntryKey, edge_value: int) -> None:
        slot = self._counts.get(key)
        idx = 0 if edge_value else 1
        if slot is None or slot[idx] < 1:
            raise ConsistencyError(
                f"removing edge_value={edge_value} from {key} below zero")
        slot[idx] -= 1
        if slot[0] == 0 and slot[1] == 0:
            del self._counts[key]

    def ones(self, key: BEntryKey) -> int:
        return self._counts.get(key, (0, 0))[0]

    def zeros(self, key: BEntryKey) -> int:
        return self._counts.get(key, (0, 0))[1]

    def total(self) -> int:
        return sum(a + b for a, b in self._counts.values())

    def point_estimate(self, key: BEntryKey, hyper: Hyperparams) -> float:
        a, b = self.ones(key), self.zeros(key)
        return (a + hyper.lambda1) / (a + b + hyper.lambda1 + hyper.lambda2)

    def log_marginal(self, lambda1: float, lambda2: float) -> float:
        """Log Beta-Bernoulli marginal of all assigned edges."""
        if not self._counts:
            return 0.0
        c = np.array(list(self._counts.values()), dtype=float)
        return float(np.sum(betaln(lambda1 + c[:, 0], lambda2 + c[:, 1])
                            - betaln(lambda1, lambda2)))

    def items(self) -> Iterator[tuple[BEntryKey, tuple[int, int]]]:
        for k, (a, b) in self._counts.items():
            yield k, (a, b)

    def keys(self):
        return self._counts.keys()

    def copy(self) -> "CompatibilityStats":
        out = CompatibilityStats()
        out._counts = {k: list(v) for k, v in self._counts.items()}
        return out

    def __len__(self):
        return len(self._counts)

    def __eq__(self, other):
        if not isinstance(other, CompatibilityStats):
            return NotImplemented
        return self._counts == other._counts

    def __repr__(self):
        return f"CompatibilityStats({len(self)} entries, {self.total()} pairs)"


def recount_stats(network: DirectedNetwork, paths: np.ndarray,
                  levels: LevelAssignments) -> tuple[CompatibilityStats, int]:
    """From-scratch recount; also returns the number of incompatible pairs."""
    stats = CompatibilityStats()
    n_incompatible = 0
    e = network.edges
    n = network.n_actors
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            key = resolve_sb(paths[i], paths[j], levels.donor[i, j], levels.receiver[i, j])
            if key is INCOMPATIBLE:
                n_incompatible += 1
            else:
                stats.add(key, int(e[i, j]))
    return stats, n_incompatible


def incompatible_edges(network: DirectedNetwork, paths: np.ndarray,
                       levels: LevelAssignments) -> list[tuple[int, int]]:
    """Ordered pairs with an observed edge that resolve to ``INCOMPATIBLE``."""
    bad = []
    for i, j in zip(*np.nonzero(network.edges)):
        if i != j and resolve_sb(paths[i], paths[j], levels.donor[i, j],
                                 levels.receiver[i, j]) is INCOMPATIBLE:
            bad.append((int(i), int(j)))
    return bad


def canonicalize_paths(paths) -> np.ndarray:
    """Relabel children of every node to 1..d in order of first appearance
    when actors are scanned by index."""
    p = np.asarray(paths, dtype=np.int64)
    if p.ndim != 2:
        raise ValueError("paths must be an (N, K) array")
    out = np.empty_like(p)
    labels: dict[tuple, dict[int, int]] = {}
    for i, row in enumerate(p):
        prefix: tuple = ()
        for k, x in enumerate(row):
            x = int(x)
            if x < 1:
                raise ValueError("branch labels must be positive integers")
            children = labels.setdefault(prefix, {})
            if x not in children:
                children[x] = len(children) + 1
            out[i, k] = children[x]
            prefix = prefix + (x,)
    return out


def prefix_ids(paths: np.ndarray) -> np.ndarray:
    """Integer id of every actor's length-k prefix, shape ``(N, K + 1)``.

    Ids are only comparable within a column; column 0 is all zeros (root).
    """
    p = np.asarray(paths, dtype=np.int64)
    n, depth = p.shape
    ids = np.zeros((n, depth + 1), dtype=np.int64)
    for k in range(1, depth + 1):
        _, inv = np.unique(p[:, :k], axis=0, return_inverse=True)
        ids[:, k] = inv.ravel()
    return ids


@dataclass
class HierarchyTree:
    """Occupancy view of a path assignment: prefix -> number of actors."""

    max_depth: int
    occupancy: dict = field(default_factory=dict)
    members: dict = field(default_factory=dict)

    @classmethod
    def from_paths(cls, paths) -> "HierarchyTree":
        p = np.asarray(paths, dtype=np.int64)
        tree = cls(max_depth=p.shape[1] if p.ndim == 2 else 0)
        tree.occupancy[()] = 0
        tree.members[()] = []
        for i, row in enumerate(p):
            tree.add(i, row)
        return tree

    def add(self, actor: int, path) -> None:
        prefix: tuple = ()
        self.occupancy[prefix] = self.occupancy.get(prefix, 0) + 1
        self.members.setdefault(prefix, []).append(actor)
        for x in path:
            prefix = prefix + (int(x),)
            self.occupancy[prefix] = self.occupancy.get(prefix, 0) + 1
            self.members.setdefault(prefix, []).append(actor)

    def remove(self, actor: int, path) -> None:
        prefixes = [tuple(int(x) for x in path[:k]) for k in range(len(path) + 1)]
        for prefix in prefixes:
            count = self.occupancy.get(prefix, 0)
            if count < 1:
                raise ConsistencyError(f"node {prefix} already empty")
            if count == 1 and prefix != ():
                del self.occupancy[prefix]
                del self.members[prefix]
            else:
                self.occupancy[prefix] = count - 1
                self.members[prefix].remove(actor)

    def children(self, prefix: tuple) -> list[int]:
        d = len(prefix)
        return sorted(p[-1] for p in self.occupancy
                      if len(p) == d + 1 and p[:d] == prefix)

    def nodes_at_depth(self, depth: int) -> list[tuple]:
        return sorted(p for p in self.occupancy if len(p) == depth)

    def branch_sizes(self, prefix: tuple = ()) -> dict[int, int]:
        return {c: self.occupancy[prefix + (c,)] for c in self.children(prefix)}

    def __eq__(self, other):
        if not isinstance(other, HierarchyTree):
            return NotImplemented
        return self.occupancy == other.occupancy


def count_branches(paths, min_size: int = 5, prefix: tuple = ()) -> int:
    """Number of children of ``prefix`` holding at least ``min_size`` actors."""
    sizes = HierarchyTree.from_paths(paths).branch_sizes(prefix)
    return sum(1 for s in sizes.values() if s >= min_size)


def log_beta_bernoulli(ones, zeros, lambda1: float, lambda2: float):
    """Log marginal probability of ``ones`` present and ``zeros`` absent edges
    sharing one Beta(lambda1, lambda2) probability."""
    return betaln(lambda1 + np.asarray(ones, dtype=float),
                  lambda2 + np.asarray(zeros, dtype=float)) - betaln(lambda1, lambda2)

"""Forward simulation: nCRP paths, stick-breaking memberships, Beta
compatibility entries and the resulting directed network."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .levels import LevelCountSampler
from .model import (BEntryKey, DirectedNetwork, Hyperparams, LevelAssignments,
                    canonicalize_paths, prefix_ids)


# ---------------------------------------------------------------------------
# stick breaking
# ---------------------------------------------------------------------------

def gem_from_sticks(sticks) -> np.ndarray:
    """Membership vector from stick fractions, renormalised over 1..K."""
    v = np.asarray(sticks, dtype=float)
    remainder = np.concatenate(([1.0], np.cumprod(1.0 - v)[:-1]))
    theta = v * remainder
    total = theta.sum()
    if total <= 0:
        # every stick fraction was zero; all mass beyond K
        raise ValueError("stick fractions leave no mass on levels 1..K")
    return theta / total


def sample_gem(hyper: Hyperparams, rng: np.random.Generator,
               return_sticks: bool = False):
    a, b = hyper.m * hyper.pi, (1.0 - hyper.m) * hyper.pi
    while True:
        v = rng.beta(a, b, size=hyper.K)
        # with tiny Beta shapes every fraction can underflow to zero
        if v.any():
            break
    theta = gem_from_sticks(v)
    return (theta, v) if return_sticks else theta


# ---------------------------------------------------------------------------
# nested Chinese restaurant process
# ---------------------------------------------------------------------------

def _child_counts(paths: np.ndarray, prefix: Sequence[int]) -> dict[int, int]:
    k = len(prefix)
    counts: dict[int, int] = {}
    mask = np.all(paths[:, :k] == np.asarray(prefix, dtype=np.int64), axis=1)
    for x in paths[mask, k]:
        counts[int(x)] = counts.get(int(x), 0) + 1
    return counts


def crp_probs(child_counts: dict[int, int], gamma: float) -> tuple[list[int], np.ndarray]:
    """Existing children in increasing label order followed by the fresh
    label (smallest positive integer not in use), with their probabilities."""
    if any(c < 0 for c in child_counts.values()):
        raise ValueError("negative child count")
    labels = sorted(x for x, c in child_counts.items() if c > 0)
    n = sum(child_counts[x] for x in labels)
    fresh = 1
    used = set(labels)
    while fresh in used:
        fresh += 1
    probs = np.array([child_counts[x] for x in labels] + [gamma], dtype=float) / (n + gamma)
    return labels + [fresh], probs


def ncrp_conditional(existing_paths, prefix: Sequence[int], gamma: float):
    """Distribution of the next branch below ``prefix`` given the other
    actors' paths.  Returns ``(labels, probs)``; the last label is fresh."""
    paths = np.asarray(existing_paths, dtype=np.int64)
    if paths.size == 0:
        return crp_probs({}, gamma)
    return crp_probs(_child_counts(paths, prefix), gamma)


class _CountTree:
    """Children counts per prefix, for fast sequential nCRP draws."""

    def __init__(self):
        self.children: dict[tuple, dict[int, int]] = {}

    def add(self, path) -> None:
        prefix: tuple = ()
        for x in path:
            d = self.children.setdefault(prefix, {})
            d[int(x)] = d.get(int(x), 0) + 1
            prefix = prefix + (int(x),)

    def conditional(self, prefix: tuple, gamma: float):
        return crp_probs(self.children.get(prefix, {}), gamma)


def sample_path(existing_paths, hyper: Hyperparams, rng: np.random.Generator) -> np.ndarray:
    """Draw one path of length K given the others' paths."""
    tree = _CountTree()
    for p in np.asarray(existing_paths, dtype=np.int64).reshape(-1, hyper.K):
        tree.add(p)
    return _draw_path(tree, hyper, rng)


def _draw_path(tree: _CountTree, hyper: Hyperparams, rng) -> np.ndarray:
    prefix: tuple = ()
    for _ in range(hyper.K):
        labels, probs = tree.conditional(prefix, hyper.gamma)
        x = labels[min(int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(),
                                           side="right")), len(labels) - 1)]
        prefix = prefix + (x,)
    return np.array(prefix, dtype=np.int64)


def sample_paths(n_actors: int, hyper: Hyperparams, rng: np.random.Generator) -> np.ndarray:
    """Sequential nCRP draws for ``n_actors`` actors, canonically labelled."""
    tree = _CountTree()
    paths = np.zeros((n_actors, hyper.K), dtype=np.int64)
    for i in range(n_actors):
        paths[i] = _draw_path(tree, hyper, rng)
        tree.add(paths[i])
    return canonicalize_paths(paths) if n_actors else paths


def ncrp_sequence_log_prob(paths, gamma: float, order: Optional[Sequence[int]] = None) -> float:
    """Log probability of seating actors one at a time in ``order``."""
    p = np.asarray(paths, dtype=np.int64)
    order = range(len(p)) if order is None else order
    children: dict[tuple, dict[int, int]] = {}
    totals: dict[tuple, int] = {}
    lp = 0.0
    for i in order:
        prefix: tuple = ()
        for x in p[i]:
            x = int(x)
            d = children.setdefault(prefix, {})
            n = totals.get(prefix, 0)
            c = d.get(x, 0)
            lp += np.log((c if c else gamma) / (n + gamma))
            d[x] = c + 1
            totals[prefix] = n + 1
            prefix = prefix + (x,)
    return float(lp)


def ncrp_log_prob(paths, gamma: float) -> float:
    """Closed-form log probability of the (unlabelled) hierarchy."""
    p = np.asarray(paths, dtype=np.int64)
    if p.size == 0:
        return 0.0
    n, depth = p.shape
    lp = 0.0
    groups = {(): np.arange(n)}
    for k in range(depth):
        next_groups = {}
        for prefix, members in groups.items():
            labels, sizes = np.unique(p[members, k], return_counts=True)
            lp += (len(labels) * np.log(gamma) + gammaln(gamma) - gammaln(gamma + len(members))
                   + float(np.sum(gammaln(sizes))))
            for x in labels:
                next_groups[prefix + (int(x),)] = members[p[members, k] == x]
        groups = next_groups
    return float(lp)


# ---------------------------------------------------------------------------
# levels and edges
# ---------------------------------------------------------------------------

def _categorical_rows(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """1-based category of each uniform ``u[..]`` under row cdfs ``cdf[.., K]``."""
    z = (u[..., None] >= cdf[..., :-1]).sum(axis=-1) + 1
    return z.astype(np.int64)


def sample_levels_from_theta(theta: np.ndarray, rng: np.random.Generator) -> LevelAssignments:
    theta = np.asarray(theta, dtype=float)
    n = theta.shape[0]
    cdf = np.cumsum(theta, axis=1)
    cdf /= cdf[:, -1:]
    donor = _categorical_rows(cdf[:, None, :].repeat(n, axis=1), rng.random((n, n)))
    receiver = _categorical_rows(cdf[None, :, :].repeat(n, axis=0), rng.random((n, n)))
    return LevelAssignments(donor, receiver)


def sample_prior_levels(n_actors: int, hyper: Hyperparams, rng: np.random.Generator,
                        sampler: Optional[LevelCountSampler] = None) -> LevelAssignments:
    """Exact draw of all indicators from the collapsed level prior the Gibbs
    sampler targets (sticks integrated out, every indicator within 1..K)."""
    n = n_actors
    donor = np.zeros((n, n), dtype=np.int64)
    receiver = np.zeros((n, n), dtype=np.int64)
    if n < 2:
        return LevelAssignments(donor, receiver)
    if sampler is None:
        sampler = LevelCountSampler(2 * (n - 1), hyper.K, hyper.m, hyper.pi)
    others = np.arange(n)
    for i in range(n):
        z = sampler.sample_levels(rng)
        js = others[others != i]
        donor[i, js] = z[: n - 1]
        receiver[js, i] = z[n - 1:]
    return LevelAssignments(donor, receiver)


def sample_prior_state(n_actors: int, hyper: Hyperparams, rng: np.random.Generator):
    """``(paths, levels)`` drawn from the prior the sampler targets."""
    paths = sample_paths(n_actors, hyper, rng)
    return paths, sample_prior_levels(n_actors, hyper, rng)


@dataclass(frozen=True)
class BRegime:
    """Fixed compatibility values by level: same-child entries use
    ``on_diagonal[k - 1]``, all others ``off_diagonal[k - 1]``."""

    on_diagonal: tuple
    off_diagonal: tuple

    def __post_init__(self):
        for v in (*self.on_diagonal, *self.off_diagonal):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"regime probability {v} outside [0, 1]")
        if len(self.on_diagonal) != len(self.off_diagonal):
            raise ValueError("on- and off-diagonal vectors differ in length")


REGIMES = {
    1: BRegime((0.4, 0.8), (0.02, 0.02)),   # on-diagonal, low noise
    2: BRegime((0.3, 0.6), (0.1, 0.1)),     # on-diagonal, high noise
    3: BRegime((0.02, 0.02), (0.4, 0.8)),   # off-diagonal, low noise
    4: BRegime((0.1, 0.1), (0.3, 0.6)),     # off-diagonal, high noise
}
BENCHMARK_THETA = (0.25, 0.75)


def _pair_keys(paths: np.ndarray, levels: LevelAssignments):
    """For every ordered pair: coarse level, compatibility and key columns."""
    n, depth = paths.shape
    pid = prefix_ids(paths)
    rows, cols = np.nonzero(~np.eye(n, dtype=bool))
    zc = np.minimum(levels.donor[rows, cols], levels.receiver[rows, cols])
    compatible = pid[rows, zc - 1] == pid[cols, zc - 1]
    keys = np.stack([zc, pid[rows, zc - 1], paths[rows, zc - 1], paths[cols, zc - 1]], axis=1)
    return rows, cols, zc, compatible, keys


def sample_edges(paths, levels: LevelAssignments, hyper: Hyperparams,
                 rng: np.random.Generator, regime: Optional[BRegime] = None):
    """Draw every edge given paths and levels.

    B entries are realised lazily: only entries some pair resolves to are
    drawn, in sorted key order.  Returns ``(edges, b_values)``.
    """
    paths = np.asarray(paths, dtype=np.int64)
    n = paths.shape[0]
    edges = np.zeros((n, n), dtype=np.uint8)
    b_values: dict[BEntryKey, float] = {}
    if n < 2:
        return edges, b_values
    rows, cols, zc, compatible, keys = _pair_keys(paths, levels)
    ck = keys[compatible]
    uniq, first, inv = np.unique(ck, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    if regime is None:
        values = rng.beta(hyper.lambda1, hyper.lambda2, size=len(uniq))
    else:
        if len(regime.on_diagonal) < hyper.K:
            raise ValueError("regime defines fewer levels than max_depth")
        on = np.asarray(regime.on_diagonal, dtype=float)
        off = np.asarray(regime.off_diagonal, dtype=float)
        lvl = uniq[:, 0] - 1
        values = np.where(uniq[:, 2] == uniq[:, 3], on[lvl], off[lvl])
    prob = np.zeros(len(rows))
    prob[compatible] = values[inv]
    draws = rng.random(len(rows)) < prob
    edges[rows[draws], cols[draws]] = 1
    rep_rows = rows[compatible][first]
    for (level, _, dc, rc), r, val in zip(uniq, rep_rows, values):
        key = BEntryKey(tuple(int(x) for x in paths[r, : level - 1]), int(dc), int(rc))
        b_values[key] = float(val)
    return edges, b_values


@dataclass
class SimulationConfig:
    n_actors: int
    hyper: Hyperparams = field(default_factory=Hyperparams)
    fixed_theta: Optional[tuple] = None
    fixed_b: Optional[BRegime] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.n_actors < 1:
            raise ValueError("n_actors must be positive")
        if self.fixed_theta is not None:
            t = np.asarray(self.fixed_theta, dtype=float)
            if t.shape != (self.hyper.K,):
                raise ValueError(f"fixed_theta must have {self.hyper.K} entries")
            if (t < 0).any() or (t > 1).any() or t.sum() <= 0:
                raise ValueError("fixed_theta entries must lie in [0, 1]")


@dataclass
class SimulatedNetwork:
    network: DirectedNetwork
    paths: np.ndarray
    theta: np.ndarray
    levels: LevelAssignments
    b_values: dict
    seed: Optional[int] = None


def generate_network(config: SimulationConfig,
                     rng: Optional[np.random.Generator] = None) -> SimulatedNetwork:
    if rng is None:
        rng = np.random.default_rng(config.seed)
    hyper = config.hyper
    n = config.n_actors
    paths = sample_paths(n, hyper, rng)
    if config.fixed_theta is not None:
        t = np.asarray(config.fixed_theta, dtype=float)
        theta = np.tile(t / t.sum(), (n, 1))
    else:
        theta = np.array([sample_gem(hyper, rng) for _ in range(n)]).reshape(n, hyper.K)
    levels = sample_levels_from_theta(theta, rng)
    edges, b_values = sample_edges(paths, levels, hyper, rng, config.fixed_b)
    return SimulatedNetwork(DirectedNetwork(edges), paths, theta, levels, b_values, config.seed)

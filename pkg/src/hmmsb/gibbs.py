"""Collapsed Gibbs sampler over interaction levels and community paths.

Stick weights and compatibility entries are integrated out, so the chain
state is just (paths, levels) plus incrementally maintained B-entry counts.
The heavy lifting happens in :mod:`hmmsb._kernels`; the functions in the
"reference" section recompute the same conditionals in plain Python on
labelled paths and are used to cross-check the kernels.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import gammaln

from . import _kernels as kern
from .generative import crp_probs, ncrp_log_prob, sample_prior_state
from .levels import level_prior_weights, log_level_prior, log_truncation_table
from .model import (INCOMPATIBLE, BEntryKey, CompatibilityStats, ConsistencyError,
                    DirectedNetwork, Hyperparams, LevelAssignments,
                    canonicalize_paths, recount_stats, resolve_sb)

log = logging.getLogger(__name__)

DONOR, RECEIVER = 0, 1


def _side(side) -> int:
    if side in (DONOR, "donor"):
        return DONOR
    if side in (RECEIVER, "receiver"):
        return RECEIVER
    raise ValueError(f"side must be 'donor' or 'receiver', got {side!r}")


class SamplerState:
    """Mutable chain state for one network.

    Build with :meth:`from_assignment` or :meth:`from_prior`.  ``paths``,
    ``levels`` and ``stats`` are exported snapshots, not live views.
    """

    def __init__(self, network: DirectedNetwork, hyper: Hyperparams):
        self.network = network
        self.hyper = hyper
        self.iteration = 0
        n, K = network.n_actors, hyper.K
        self.n_actors = n
        self.E = network.edges
        M = 1 + K * n + 1
        self.tree_parent = np.full(M, -1, dtype=np.int64)
        self.tree_depth = np.zeros(M, dtype=np.int64)
        self.tree_count = np.zeros(M, dtype=np.int64)
        self.first_child = np.full(M, -1, dtype=np.int64)
        self.next_sib = np.full(M, -1, dtype=np.int64)
        self.prev_sib = np.full(M, -1, dtype=np.int64)
        self.free_stack = np.arange(M - 1, 0, -1).astype(np.int64)
        self.n_free = np.array([M - 1], dtype=np.int64)
        self.node_of = np.zeros((n, K + 1), dtype=np.int64)
        self.donor = np.zeros((n, n), dtype=np.int64)
        self.recv = np.zeros((n, n), dtype=np.int64)
        self.lc = np.zeros((n, K + 1), dtype=np.int64)
        self.ones = np.zeros((M, M), dtype=np.int64)
        self.zeros = np.zeros((M, M), dtype=np.int64)
        size = n * max(n - 1, 1) + 2
        grid = np.arange(size, dtype=float)
        self.lg1 = gammaln(hyper.lambda1 + grid)
        self.lg2 = gammaln(hyper.lambda2 + grid)
        self.lg12 = gammaln(hyper.lambda1 + hyper.lambda2 + grid)
        self._work = self._make_work(n, M)
        self._w = np.zeros(K + 1)
        self._log_level_norm = float(
            log_truncation_table(2 * max(n - 1, 0), K, hyper.m, hyper.pi)[1, 2 * max(n - 1, 0)])
        off = ~np.eye(n, dtype=bool)
        self._pair_i, self._pair_j = (a.astype(np.int64) for a in np.nonzero(off))

    @staticmethod
    def _make_work(n, M):
        P = max(2 * (n - 1), 1)
        i64 = np.int64
        return (np.full(M, -1, dtype=i64),   # bucket heads
                np.empty(P, dtype=i64),      # bucket links
                np.empty(P, dtype=i64),      # counterpart child node
                np.empty(P, dtype=i64),      # direction
                np.empty(P, dtype=i64),      # edge value
                np.zeros(M, dtype=i64),      # present edges per bucket
                np.zeros(M, dtype=i64), np.zeros(M, dtype=i64),
                np.zeros(M, dtype=i64), np.zeros(M, dtype=i64),
                np.zeros(M, dtype=i64),      # marks
                np.empty(M, dtype=i64),      # distinct children
                np.empty(M, dtype=i64), np.empty(M, dtype=i64),
                np.zeros(M), np.zeros(M),
                np.zeros(M, dtype=i64))

    # -- construction -------------------------------------------------------

    @classmethod
    def from_assignment(cls, network: DirectedNetwork, hyper: Hyperparams,
                        paths, levels: LevelAssignments) -> "SamplerState":
        state = cls(network, hyper)
        paths = np.asarray(paths, dtype=np.int64)
        n, K = state.n_actors, hyper.K
        if paths.shape != (n, K):
            raise ValueError(f"paths must have shape {(n, K)}, got {paths.shape}")
        if levels.n_actors != n:
            raise ValueError("levels do not match the network size")
        levels.validate(K)
        if (paths < 1).any():
            raise ValueError("branch labels must be positive")
        node_for: dict[tuple, int] = {(): 0}
        for i in range(n):
            prefix: tuple = ()
            for k in range(1, K + 1):
                prefix = prefix + (int(paths[i, k - 1]),)
                if prefix not in node_for:
                    node_for[prefix] = kern.new_node(
                        node_for[prefix[:-1]], state.tree_parent, state.tree_depth,
                        state.tree_count, state.first_child, state.next_sib,
                        state.prev_sib, state.free_stack, state.n_free)
            kern.attach_along(i, K, node_for[prefix], 0, state.node_of, state.tree_parent,
                              state.tree_depth, state.tree_count, state.first_child,
                              state.next_sib, state.prev_sib, state.free_stack, state.n_free)
        state.donor[:] = levels.donor
        state.recv[:] = levels.receiver
        state.lc[:] = levels.actor_counts(K)
        kern.rebuild_stats(state.E, state.donor, state.recv, state.node_of,
                           state.ones, state.zeros)
        return state

    @classmethod
    def from_prior(cls, network: DirectedNetwork, hyper: Hyperparams,
                   rng: np.random.Generator) -> "SamplerState":
        paths, levels = sample_prior_state(network.n_actors, hyper, rng)
        return cls.from_assignment(network, hyper, paths, levels)

    def copy(self) -> "SamplerState":
        return SamplerState.from_assignment(self.network, self.hyper, self.paths, self.levels)

    # -- exported views -----------------------------------------------------

    def _labels(self) -> np.ndarray:
        """Canonical branch label of every live node."""
        label = np.zeros(len(self.tree_parent), dtype=np.int64)
        n_children: dict[int, int] = {}
        for i in range(self.n_actors):
            for k in range(1, self.hyper.K + 1):
                v = self.node_of[i, k]
                if label[v] == 0:
                    p = self.tree_parent[v]
                    n_children[p] = n_children.get(p, 0) + 1
                    label[v] = n_children[p]
        return label

    @property
    def paths(self) -> np.ndarray:
        label = self._labels()
        return label[self.node_of[:, 1:]]

    @property
    def levels(self) -> LevelAssignments:
        return LevelAssignments(self.donor.copy(), self.recv.copy())

    @property
    def stats(self) -> CompatibilityStats:
        label = self._labels()
        stats = CompatibilityStats()
        prefix_of = {0: ()}
        for i in range(self.n_actors):
            for k in range(1, self.hyper.K + 1):
                v = self.node_of[i, k]
                if v not in prefix_of:
                    prefix_of[v] = prefix_of[self.tree_parent[v]] + (int(label[v]),)
        a_idx, b_idx = np.nonzero(self.ones + self.zeros)
        for a, b in zip(a_idx, b_idx):
            parent = prefix_of[int(self.tree_parent[a])]
            key = BEntryKey(parent, int(label[a]), int(label[b]))
            stats._counts[key] = [int(self.ones[a, b]), int(self.zeros[a, b])]
        return stats

    def n_incompatible_edges(self) -> int:
        return int(kern.count_incompatible_edges(self.E, self.donor, self.recv, self.node_of))

    def check_consistency(self) -> None:
        """Raise :class:`ConsistencyError` unless the maintained counts equal
        a from-scratch recount."""
        expected, _ = recount_stats(self.network, self.paths, self.levels)
        if self.stats != expected:
            raise ConsistencyError("B-entry counts differ from a full recount")
        if not np.array_equal(self.lc, self.levels.actor_counts(self.hyper.K)):
            raise ConsistencyError("per-actor level counts differ from a recount")
        occupancy = np.zeros_like(self.tree_count)
        np.add.at(occupancy, self.node_of.ravel(), 1)
        if not np.array_equal(occupancy, self.tree_count):
            raise ConsistencyError("node occupancy differs from a recount")

    # -- kernel plumbing ----------------------------------------------------

    def _level_args(self):
        h = self.hyper
        return (h.K, h.m, h.pi, h.lambda1, h.lambda2, self.E, self.donor, self.recv,
                self.lc, self.node_of, self.ones, self.zeros)

    def _path_args(self):
        return (self.hyper.K, self.hyper.gamma, self.E, self.donor, self.recv, self.node_of,
                self.tree_parent, self.tree_depth, self.tree_count, self.first_child,
                self.next_sib, self.prev_sib, self.free_stack, self.n_free,
                self.ones, self.zeros, self.lg1, self.lg2, self.lg12, self._work)

    def complete_log_likelihood(self) -> float:
        return complete_log_likelihood(self)


def _fault(exc: Exception) -> ConsistencyError:
    return ConsistencyError(str(exc))


# ---------------------------------------------------------------------------
# single-site updates and sweeps
# ---------------------------------------------------------------------------

def sample_level(state: SamplerState, i: int, j: int, side, rng: np.random.Generator) -> int:
    """Resample one donor or receiver indicator of pair (i, j)."""
    if i == j:
        raise ValueError("self-pairs carry no level indicators")
    try:
        return int(kern.sample_level_site(i, j, _side(side), rng.random(),
                                          *state._level_args(), state._w))
    except RuntimeError as exc:
        raise _fault(exc) from exc


def sample_path(state: SamplerState, i: int, rng: np.random.Generator) -> None:
    """Resample actor i's path from its full conditional."""
    try:
        kern.sample_path_site(i, rng.random(), *state._path_args())
    except RuntimeError as exc:
        raise _fault(exc) from exc


def sweep(state: SamplerState, rng: np.random.Generator, scan: str = "fixed") -> SamplerState:
    """Resample every donor level, every receiver level, then every path.

    ``scan="fixed"`` visits pairs lexicographically and actors by index;
    ``scan="random"`` permutes each block independently.
    """
    pi_, pj = state._pair_i, state._pair_j
    order = np.arange(state.n_actors, dtype=np.int64)
    if scan == "random":
        perm_d = rng.permutation(len(pi_))
        perm_r = rng.permutation(len(pi_))
        order = rng.permutation(state.n_actors).astype(np.int64)
    elif scan != "fixed":
        raise ValueError(f"unknown scan order {scan!r}")
    kern.seed_rng(int(rng.integers(2**63 - 1)))
    try:
        if scan == "random":
            kern.sweep_levels(pi_[perm_d], pj[perm_d], DONOR, *state._level_args())
            kern.sweep_levels(pi_[perm_r], pj[perm_r], RECEIVER, *state._level_args())
        else:
            kern.sweep_levels(pi_, pj, DONOR, *state._level_args())
            kern.sweep_levels(pi_, pj, RECEIVER, *state._level_args())
        kern.sweep_paths(order, *state._path_args())
    except RuntimeError as exc:
        raise _fault(exc) from exc
    state.iteration += 1
    return state


def complete_log_likelihood(state: SamplerState) -> float:
    """log p(E, paths, levels | hyperparameters) with stick weights and
    compatibility entries integrated out."""
    h = state.hyper
    edge = kern.edge_log_marginal(state.tree_parent, state.tree_count, state.first_child,
                                  state.next_sib, state.ones, state.zeros,
                                  state.lg1, state.lg2, state.lg12)
    tree = kern.tree_log_prior(h.K, h.gamma, state.tree_parent, state.tree_depth,
                               state.tree_count, state.first_child, state.next_sib)
    lev = kern.levels_log_prior(h.K, h.m, h.pi, state.lc, state._log_level_norm) \
        if state.n_actors > 1 else 0.0
    return float(edge + tree + lev)


def regenerate_edges(state: SamplerState, rng: np.random.Generator) -> None:
    """Replace the network by a draw from p(E | paths, levels) and rebuild
    the counts (used by joint-distribution tests)."""
    M = len(state.tree_parent)
    if not hasattr(state, "_bval"):
        state._bval = np.full((M, M), -1.0)
    kern.seed_rng(int(rng.integers(2**63 - 1)))
    kern.regenerate_edges(state.hyper.lambda1, state.hyper.lambda2, state.E, state.donor,
                          state.recv, state.node_of, state._bval)
    kern.rebuild_stats(state.E, state.donor, state.recv, state.node_of,
                       state.ones, state.zeros)


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------

@dataclass
class ChainConfig:
    burn_in: int = 1000
    n_samples: int = 100
    lag: int = 5
    seed: Optional[int] = None
    scan: str = "fixed"
    check_every: int = 0  # recount the statistics every n sweeps (0 = never)

    def __post_init__(self):
        if self.burn_in < 0 or self.n_samples < 1 or self.lag < 1:
            raise ValueError("burn_in must be >= 0, n_samples and lag >= 1")

    @property
    def total_iterations(self) -> int:
        return self.burn_in + self.n_samples * self.lag


@dataclass
class Sample:
    iteration: int
    paths: np.ndarray
    levels: LevelAssignments
    log_likelihood: float


@dataclass
class ChainResult:
    samples: list
    trace: np.ndarray          # complete log-likelihood after every sweep
    hyper: Hyperparams
    config: ChainConfig
    final_state: Optional[SamplerState] = field(default=None, repr=False)


def run_chain(network: DirectedNetwork, hyper: Hyperparams, config: ChainConfig,
              rng: Optional[np.random.Generator] = None,
              init: Optional[tuple] = None,
              progress: Optional[Callable[[int, float], None]] = None) -> ChainResult:
    """Initialise from the prior (or ``init=(paths, levels)``), sweep
    ``burn_in + n_samples * lag`` times and keep every ``lag``-th state
    after burn-in."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if init is None:
        state = SamplerState.from_prior(network, hyper, rng)
    else:
        state = SamplerState.from_assignment(network, hyper, *init)
    trace = np.empty(config.total_iterations)
    samples = []
    for t in range(1, config.total_iterations + 1):
        sweep(state, rng, config.scan)
        trace[t - 1] = ll = complete_log_likelihood(state)
        if config.check_every and t % config.check_every == 0:
            state.check_consistency()
        if t > config.burn_in and (t - config.burn_in) % config.lag == 0:
            if state.n_incompatible_edges():
                raise ConsistencyError("retained state has an edge with zero probability")
            samples.append(Sample(t, state.paths, state.levels, ll))
        if progress is not None:
            progress(t, ll)
    log.debug("chain finished: %d sweeps, final log-likelihood %.3f",
              config.total_iterations, trace[-1] if len(trace) else float("nan"))
    return ChainResult(samples, trace, hyper, config, state)


# ---------------------------------------------------------------------------
# reference computations on labelled paths
# ---------------------------------------------------------------------------

def level_likelihood_term(stats: CompatibilityStats, hyper: Hyperparams, c_i, c_j,
                          z_donor: int, z_recv: int, edge: int) -> float:
    """Predictive probability of the observed edge value; ``stats`` must
    already exclude the pair."""
    key = resolve_sb(c_i, c_j, z_donor, z_recv)
    if key is INCOMPATIBLE:
        return 0.0 if edge else 1.0
    a, b = stats.ones(key), stats.zeros(key)
    num = (a + hyper.lambda1) if edge else (b + hyper.lambda2)
    return num / (a + b + hyper.lambda1 + hyper.lambda2)


def level_prior_term(counts_excluding, k: int, hyper: Hyperparams) -> float:
    """Unnormalised prior weight of level k given the actor's other
    indicators (``counts_excluding[k - 1]`` at level k)."""
    if not 1 <= k <= hyper.K:
        raise ValueError(f"level {k} outside 1..{hyper.K}")
    return float(level_prior_weights(counts_excluding, hyper.m, hyper.pi)[k - 1])


def level_conditional(state: SamplerState, i: int, j: int, side) -> np.ndarray:
    """Normalised full conditional of one indicator, computed from scratch."""
    side = _side(side)
    h = state.hyper
    paths, levels = state.paths, state.levels
    e = int(state.E[i, j])
    stats = state.stats
    key = resolve_sb(paths[i], paths[j], levels.donor[i, j], levels.receiver[i, j])
    if key is not INCOMPATIBLE:
        stats.remove(key, e)
    actor = i if side == DONOR else j
    current = levels.donor[i, j] if side == DONOR else levels.receiver[i, j]
    counts = levels.actor_counts(h.K)[actor, 1:].copy()
    counts[current - 1] -= 1
    w = np.empty(h.K)
    for k in range(1, h.K + 1):
        zd, zr = (k, levels.receiver[i, j]) if side == DONOR else (levels.donor[i, j], k)
        w[k - 1] = (level_prior_term(counts, k, h)
                    * level_likelihood_term(stats, h, paths[i], paths[j], zd, zr, e))
    if w.sum() <= 0:
        raise ConsistencyError("all level weights are zero")
    return w / w.sum()


def enumerate_candidate_paths(other_paths, max_depth: int) -> list[tuple]:
    """Every path an actor can take given the others: existing paths plus,
    below each existing node, a fresh branch continued by fresh branches.
    A fresh branch is labelled by the smallest unused positive integer."""
    others = [tuple(int(x) for x in p) for p in np.asarray(other_paths).reshape(-1, max_depth)]
    out: list[tuple] = []

    def visit(prefix: tuple):
        depth = len(prefix)
        if depth == max_depth:
            out.append(prefix)
            return
        children = sorted({p[depth] for p in others if p[:depth] == prefix})
        for c in children:
            visit(prefix + (c,))
        fresh = 1
        while fresh in children:
            fresh += 1
        out.append(prefix + (fresh,) + (1,) * (max_depth - depth - 1))

    visit(())
    return out


def path_prior_term(other_paths, candidate, gamma: float) -> float:
    """nCRP probability of ``candidate`` given the other actors' paths."""
    others = [tuple(int(x) for x in p) for p in np.asarray(other_paths).reshape(-1, len(candidate))]
    prob = 1.0
    prefix: tuple = ()
    for x in candidate:
        depth = len(prefix)
        counts: dict[int, int] = {}
        for p in others:
            if p[:depth] == prefix:
                counts[p[depth]] = counts.get(p[depth], 0) + 1
        labels, probs = crp_probs(counts, gamma)
        if x in counts:
            prob *= probs[labels.index(x)]
        else:
            prob *= probs[-1]
            # below a fresh branch every later choice is forced
            break
        prefix = prefix + (int(x),)
    return float(prob)


def path_likelihood_term(network: DirectedNetwork, paths, levels: LevelAssignments,
                         stats_excluding: CompatibilityStats, hyper: Hyperparams,
                         i: int, candidate) -> float:
    """Log collapsed likelihood of actor i's incident edges with i on
    ``candidate``; ``stats_excluding`` must exclude every pair touching i."""
    p = np.array(paths, dtype=np.int64, copy=True)
    p[i] = candidate
    tallies: dict[BEntryKey, list[int]] = {}
    n = network.n_actors
    for j in range(n):
        if j == i:
            continue
        for x, y in ((i, j), (j, i)):
            e = int(network.edges[x, y])
            key = resolve_sb(p[x], p[y], levels.donor[x, y], levels.receiver[x, y])
            if key is INCOMPATIBLE:
                if e:
                    return -math.inf
                continue
            slot = tallies.setdefault(key, [0, 0])
            slot[0 if e else 1] += 1
    l1, l2 = hyper.lambda1, hyper.lambda2
    total = 0.0
    for key, (r, s) in tallies.items():
        g, h = stats_excluding.ones(key), stats_excluding.zeros(key)
        total += (gammaln(g + h + l1 + l2) - gammaln(g + l1) - gammaln(h + l2)
                  + gammaln(g + r + l1) + gammaln(h + s + l2)
                  - gammaln(g + h + r + s + l1 + l2))
    return float(total)


def path_conditional(state: SamplerState, i: int) -> list[tuple[tuple, float]]:
    """Normalised full conditional of actor i's path over every candidate,
    computed from scratch on labelled paths."""
    h = state.hyper
    paths, levels = state.paths, state.levels
    others = np.delete(paths, i, axis=0)
    stats = state.stats
    for j in range(state.n_actors):
        if j == i:
            continue
        for x, y in ((i, j), (j, i)):
            key = resolve_sb(paths[x], paths[y], levels.donor[x, y], levels.receiver[x, y])
            if key is not INCOMPATIBLE:
                stats.remove(key, int(state.E[x, y]))
    cands = enumerate_candidate_paths(others, h.K)
    logw = np.array([
        math.log(path_prior_term(others, c, h.gamma))
        + path_likelihood_term(state.network, paths, levels, stats, h, i, c)
        for c in cands])
    if not np.isfinite(logw).any():
        raise ConsistencyError("every candidate path has zero probability")
    w = np.exp(logw - logw.max())
    w /= w.sum()
    return list(zip(cands, w))


def joint_log_prob(network: DirectedNetwork, paths, levels: LevelAssignments,
                   hyper: Hyperparams) -> float:
    """From-scratch log p(E, paths, levels); -inf if some present edge is
    incompatible."""
    paths = canonicalize_paths(paths)
    stats, _ = recount_stats(network, paths, levels)
    for i, j in zip(*np.nonzero(network.edges)):
        if resolve_sb(paths[i], paths[j], levels.donor[i, j], levels.receiver[i, j]) is INCOMPATIBLE:
            return -math.inf
    n = network.n_actors
    lp = stats.log_marginal(hyper.lambda1, hyper.lambda2) + ncrp_log_prob(paths, hyper.gamma)
    if n > 1:
        counts = levels.actor_counts(hyper.K)[:, 1:]
        norm = float(log_truncation_table(2 * (n - 1), hyper.K, hyper.m, hyper.pi)[1, 2 * (n - 1)])
        lp += sum(log_level_prior(c, hyper.m, hyper.pi, norm) for c in counts)
    return float(lp)

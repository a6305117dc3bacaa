"""Scoring and post-processing of sampler output.

* pair-counting F1 between two hierarchies, per level and averaged;
* consensus hierarchy from posterior samples, level modes, small-community
  merging;
* importance-sampled log marginal likelihood with the prior as proposal,
  hyperparameter grid search and the train/test held-out protocol.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.special import gammaln, logsumexp

from . import _kernels as kern
from .levels import LevelCountSampler
from .model import (DirectedNetwork, Hyperparams, LevelAssignments,
                    canonicalize_paths, prefix_ids)

log = logging.getLogger(__name__)

GAMMA_GRID = (0.01, 0.1, 0.5, 1.0, 1.5, 2.0)
LAMBDA_GRID = tuple(itertools.product((0.1, 0.3, 0.5, 0.7, 0.9), repeat=2))


# ---------------------------------------------------------------------------
# F1
# ---------------------------------------------------------------------------

@dataclass
class F1Components:
    level: int
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float


@dataclass
class F1Report:
    per_level: list

    @property
    def scores(self) -> list[float]:
        return [c.f1 for c in self.per_level]

    @property
    def total(self) -> float:
        return float(np.mean(self.scores))


def _shared_prefix(paths: np.ndarray, k: int) -> np.ndarray:
    """Upper-triangle vector: does each unordered pair share its length-k prefix."""
    ids = prefix_ids(paths)[:, k]
    iu = np.triu_indices(len(paths), 1)
    return ids[iu[0]] == ids[iu[1]]


def f1_at_level(predicted, truth, k: int) -> F1Components:
    pred = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape[0] != true.shape[0]:
        raise ValueError("predicted and truth cover different actor sets")
    depth = min(pred.shape[1], true.shape[1])
    if not 1 <= k <= depth:
        raise ValueError(f"level {k} outside 1..{depth}")
    p = _shared_prefix(pred, k)
    t = _shared_prefix(true, k)
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    if tp + fn == 0:
        # truth has no co-clustered pairs at this level
        score = 1.0 if tp + fp == 0 else 0.0
        return F1Components(k, tp, fp, fn, tn, score, score, score)
    recall = tp / (tp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return F1Components(k, tp, fp, fn, tn, precision, recall, f1)


def f1_report(predicted, truth) -> F1Report:
    depth = min(np.shape(predicted)[1], np.shape(truth)[1])
    return F1Report([f1_at_level(predicted, truth, k) for k in range(1, depth + 1)])


def total_f1(predicted, truth) -> float:
    return f1_report(predicted, truth).total


# ---------------------------------------------------------------------------
# consensus and post-processing
# ---------------------------------------------------------------------------

@dataclass
class ConsensusResult:
    consensus_paths: np.ndarray
    coassignment: np.ndarray
    level_modes: Optional[LevelAssignments] = None


def coassignment(samples: Sequence) -> np.ndarray:
    """``C[i, j, k - 1]``: fraction of samples in which actors i and j share
    their length-k path prefix."""
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    first = np.asarray(samples[0])
    n, depth = first.shape
    out = np.zeros((n, n, depth))
    for p in samples:
        ids = prefix_ids(np.asarray(p, dtype=np.int64))
        for k in range(1, depth + 1):
            out[:, :, k - 1] += ids[:, k][:, None] == ids[:, k][None, :]
    return out / len(samples)


def consensus_paths(samples: Sequence, threshold: float = 0.5) -> ConsensusResult:
    """Group actors level by level: within each consensus group from the
    level above, link pairs co-assigned in more than ``threshold`` of the
    samples and take connected components."""
    co = coassignment(samples)
    n, _, depth = co.shape
    paths = np.zeros((n, depth), dtype=np.int64)
    groups = [np.arange(n)]
    for k in range(depth):
        next_groups = []
        for members in groups:
            linked = co[np.ix_(members, members, [k])][:, :, 0] > threshold
            _, comp = connected_components(linked, directed=False)
            for c in np.unique(comp):
                sub = members[comp == c]
                paths[sub, k] = c + 1
                next_groups.append(sub)
        groups = next_groups
    return ConsensusResult(canonicalize_paths(paths), co)


def merge_small_communities(paths, min_size: int = 5) -> np.ndarray:
    """Under every parent, fold all bottom-level children holding at most
    ``min_size`` actors into one fresh child."""
    p = np.array(paths, dtype=np.int64, copy=True)
    depth = p.shape[1]
    if p.size == 0:
        return p
    ids = prefix_ids(p)
    fresh = p[:, -1].max() + 1
    for parent in np.unique(ids[:, depth - 1]):
        under = ids[:, depth - 1] == parent
        labels, sizes = np.unique(p[under, -1], return_counts=True)
        small = labels[sizes <= min_size]
        if len(small) == 0:
            continue
        mask = under & np.isin(p[:, -1], small)
        p[mask, -1] = fresh
    return canonicalize_paths(p)


def mode_levels(samples: Sequence[LevelAssignments]) -> LevelAssignments:
    """Per-indicator most frequent level; ties go to the coarser level."""
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    donor = np.stack([s.donor for s in samples])
    receiver = np.stack([s.receiver for s in samples])
    top = int(max(donor.max(), receiver.max(), 1))

    def _mode(z):
        counts = np.stack([(z == k).sum(axis=0) for k in range(1, top + 1)])
        return counts.argmax(axis=0) + 1   # argmax returns the first maximum

    return LevelAssignments(_mode(donor), _mode(receiver))


# ---------------------------------------------------------------------------
# marginal likelihood
# ---------------------------------------------------------------------------

@dataclass
class MarginalLikelihood:
    log_ml: float
    se: float                 # delta-method standard error of log_ml
    n_samples: int
    log_weights: np.ndarray = field(repr=False, default=None)

    @property
    def ess(self) -> float:
        w = self.log_weights
        if w is None or not np.isfinite(w).any():
            return 0.0
        s = np.exp(w - w.max())
        return float(s.sum() ** 2 / np.sum(s ** 2))


def summarize_log_weights(log_weights: np.ndarray) -> tuple[float, float]:
    w = np.asarray(log_weights, dtype=float)
    n = len(w)
    if not np.isfinite(w).any():
        return -math.inf, math.inf
    log_ml = float(logsumexp(w) - math.log(n))
    if n < 2:
        return log_ml, math.inf
    s = np.exp(w - w.max())
    se = float(s.std(ddof=1) / (math.sqrt(n) * s.mean()))
    return log_ml, se


def is_log_weights(network: DirectedNetwork, hyper: Hyperparams, n_samples: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Collapsed edge log-likelihood of ``n_samples`` joint prior draws of
    (paths, levels)."""
    n = network.n_actors
    sampler = LevelCountSampler(2 * max(n - 1, 0), hyper.K, hyper.m, hyper.pi)
    size = n * max(n - 1, 1) + 2
    grid = np.arange(size, dtype=float)
    lg1 = gammaln(hyper.lambda1 + grid)
    lg2 = gammaln(hyper.lambda2 + grid)
    lg12 = gammaln(hyper.lambda1 + hyper.lambda2 + grid)
    kern.seed_rng(int(rng.integers(2**63 - 1)))
    return kern.is_log_weights(int(n_samples), hyper.K, hyper.gamma, network.edges,
                               sampler.cdf, lg1, lg2, lg12)


def marginal_likelihood_is(network: DirectedNetwork, hyper: Hyperparams,
                           n_is_samples: int, rng: np.random.Generator) -> MarginalLikelihood:
    """Importance-sampling estimate of log p(E | hyperparameters) with the
    prior over (paths, levels) as proposal."""
    if n_is_samples < 1:
        raise ValueError("need at least one importance sample")
    w = is_log_weights(network, hyper, n_is_samples, rng)
    log_ml, se = summarize_log_weights(w)
    return MarginalLikelihood(log_ml, se, int(n_is_samples), w)


@dataclass
class GridCell:
    hyper: Hyperparams
    estimate: MarginalLikelihood


def _selection_key(cell: GridCell):
    h = cell.hyper
    est = cell.estimate.log_ml
    return (-est if not math.isnan(est) else math.inf, h.gamma, h.lambda1, h.lambda2)


def grid_search(network: DirectedNetwork, candidates: Sequence[Hyperparams],
                n_is_samples: int, seed, threads: int = 1) -> tuple[Hyperparams, list[GridCell]]:
    """Estimate the marginal likelihood of every candidate and return the
    best one.  Ties go to the smaller gamma, then the smaller lambda1.
    Each cell draws from its own child of ``seed``."""
    seqs = as_seed_sequence(seed).spawn(len(candidates))

    def run(args):
        h, ss = args
        return GridCell(h, marginal_likelihood_is(network, h, n_is_samples,
                                                  np.random.default_rng(ss)))

    jobs = list(zip(candidates, seqs))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(run, jobs))
    else:
        cells = [run(j) for j in jobs]
    best = min(cells, key=_selection_key)
    return best.hyper, cells


def gamma_candidates(base: Hyperparams, grid: Sequence[float] = GAMMA_GRID) -> list[Hyperparams]:
    return [base.replace(gamma=g) for g in grid]


def lambda_candidates(base: Hyperparams, grid=LAMBDA_GRID) -> list[Hyperparams]:
    return [base.replace(lambda1=a, lambda2=b) for a, b in grid]


# ---------------------------------------------------------------------------
# held-out protocol
# ---------------------------------------------------------------------------

@dataclass
class SplitResult:
    split: int
    train_actors: np.ndarray
    test_actors: np.ndarray
    selected: Hyperparams
    train_cells: list
    test: MarginalLikelihood


@dataclass
class HeldoutResult:
    splits: list

    @property
    def mean_test_log_ml(self) -> float:
        return float(np.mean([s.test.log_ml for s in self.splits]))


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def split_actors(n_actors: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n_actors)
    half = n_actors // 2
    # odd N: the extra actor goes to training
    test = np.sort(perm[:half])
    train = np.sort(perm[half:])
    return train, test


def heldout_protocol(network: DirectedNetwork, base: Hyperparams, splits: int = 5,
                     candidates: Optional[Sequence[Hyperparams]] = None,
                     n_is_samples: int = 10_000, seed=0, threads: int = 1) -> HeldoutResult:
    """Random half/half actor splits; select hyperparameters on the training
    subgraph, then score the test subgraph under the selection.

    Every split owns three independent seed streams (partition, training
    grid, test estimate), so test edges can never reach the selection.
    """
    if splits < 1:
        raise ValueError("need at least one split")
    if candidates is None:
        candidates = lambda_candidates(base)
    results = []
    for s, ss in enumerate(as_seed_sequence(seed).spawn(splits)):
        part_ss, train_ss, test_ss = ss.spawn(3)
        train, test = split_actors(network.n_actors, np.random.default_rng(part_ss))
        selected, cells = grid_search(network.subgraph(train), candidates, n_is_samples,
                                      train_ss, threads)
        est = marginal_likelihood_is(network.subgraph(test), selected, n_is_samples,
                                     np.random.default_rng(test_ss))
        log.info("split %d: selected lambda=(%.1f, %.1f) gamma=%.2f, test log ML %.3f",
                 s, selected.lambda1, selected.lambda2, selected.gamma, est.log_ml)
        results.append(SplitResult(s, train, test, selected, cells, est))
    return HeldoutResult(results)

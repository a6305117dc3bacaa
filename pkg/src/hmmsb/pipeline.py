"""End-to-end inference: optional hyperparameter search, one chain, and
post-processing of its samples into a single summary hierarchy."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .evaluation import (ConsensusResult, GridCell, consensus_paths, grid_search,
                         merge_small_communities, mode_levels, as_seed_sequence)
from .gibbs import ChainConfig, ChainResult, run_chain
from .model import DirectedNetwork, Hyperparams

log = logging.getLogger(__name__)


@dataclass
class InferenceResult:
    hyper: Hyperparams                 # hyperparameters the chain ran with
    grid: Optional[list]               # GridCell per candidate, if searched
    chain: ChainResult
    consensus: ConsensusResult
    summary_paths: np.ndarray          # consensus after small-community merging

    @property
    def final_paths(self) -> np.ndarray:
        return self.chain.samples[-1].paths


def infer(network: DirectedNetwork, hyper: Hyperparams, chain_config: ChainConfig,
          seed=None, candidates: Optional[Sequence[Hyperparams]] = None,
          n_is_samples: int = 10_000, threads: int = 1,
          min_community_size: int = 5, progress=None) -> InferenceResult:
    """Run the sampler on ``network``.

    With ``candidates``, the hyperparameters are first chosen by estimated
    marginal likelihood.  The grid search and the chain draw from independent
    children of ``seed``.
    """
    grid_ss, chain_ss = as_seed_sequence(seed).spawn(2)
    cells: Optional[list[GridCell]] = None
    if candidates:
        hyper, cells = grid_search(network, candidates, n_is_samples, grid_ss, threads)
        log.info("grid search selected %s", hyper)
    chain = run_chain(network, hyper, chain_config, rng=np.random.default_rng(chain_ss),
                      progress=progress)
    consensus = consensus_paths([s.paths for s in chain.samples])
    consensus.level_modes = mode_levels([s.levels for s in chain.samples])
    if min_community_size > 0:
        summary = merge_small_communities(consensus.consensus_paths, min_community_size)
    else:
        summary = consensus.consensus_paths
    return InferenceResult(hyper, cells, chain, consensus, summary)

"""Hierarchical mixed membership stochastic blockmodel: simulation, collapsed
Gibbs inference and evaluation for directed networks."""

__version__ = "0.1.0"

from .model import (BEntryKey, CompatibilityStats, ConsistencyError, DirectedNetwork,
                    Hyperparams, LevelAssignments, resolve_sb)
from .generative import SimulationConfig, generate_network
from .gibbs import ChainConfig, SamplerState, run_chain, sweep
from .evaluation import marginal_likelihood_is, total_f1

__all__ = [
    "BEntryKey", "ChainConfig", "CompatibilityStats", "ConsistencyError",
    "DirectedNetwork", "Hyperparams", "LevelAssignments", "SamplerState",
    "SimulationConfig", "generate_network", "marginal_likelihood_is",
    "resolve_sb", "run_chain", "sweep", "total_f1",
]

"""Stick-breaking prior over interaction levels with the sticks integrated out.

The level sampler uses the posterior predictive of an (untruncated) GEM(m, pi)
restricted to levels 1..K and renormalised.  That is exactly the full
conditional of the GEM level prior *conditioned on every indicator landing in
1..K*.  This module provides the pieces of that conditioned prior:

* ``level_prior_weights``  - the unnormalised predictive for one indicator,
* ``log_truncation_table`` - log P(n indicators all fall in levels k..K),
* ``log_level_prior``      - log probability of an actor's level counts,
* ``LevelCountSampler``    - exact forward draws of an actor's indicators.
"""
from __future__ import annotations

import numpy as np
from scipy.special import betaln, gammaln, logsumexp


def level_prior_weights(counts, m: float, pi: float) -> np.ndarray:
    """Unnormalised predictive weight of each level 1..K.

    ``counts[k - 1]`` is the number of the actor's other indicators at level
    ``k``.  Weight of level k is
    ``E[V_k] * prod_{u<k} E[1 - V_u]`` under the Beta posteriors of the sticks.
    """
    c = np.asarray(counts, dtype=float)
    # number of indicators at level >= k, and strictly deeper than k
    ge = np.cumsum(c[::-1])[::-1]
    gt = ge - c
    stop = (m * pi + c) / (pi + ge)
    go_on = ((1.0 - m) * pi + gt) / (pi + ge)
    w = stop.copy()
    w[1:] *= np.cumprod(go_on)[:-1]
    return w


def level_prior_probs(counts, m: float, pi: float) -> np.ndarray:
    w = level_prior_weights(counts, m, pi)
    return w / w.sum()


def _log_binom(n, k):
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def log_truncation_table(n_max: int, max_depth: int, m: float, pi: float) -> np.ndarray:
    """``T[k, n]`` = log P(n exchangeable indicators that reached level k
    all stop at some level in k..K), for k = 1..K (row 0 unused) and
    n = 0..n_max.  ``T[1, n]`` is the normaliser of the conditioned prior.
    """
    a, b = m * pi, (1.0 - m) * pi
    n = np.arange(n_max + 1, dtype=float)
    table = np.full((max_depth + 2, n_max + 1), -np.inf)
    table[max_depth + 1, 0] = 0.0
    table[max_depth] = betaln(a + n, b) - betaln(a, b)
    for k in range(max_depth - 1, 0, -1):
        deeper = table[k + 1]
        for r in range(n_max + 1):
            j = np.arange(r + 1, dtype=float)
            terms = (_log_binom(r, j) + betaln(a + j, b + r - j) - betaln(a, b)
                     + deeper[r - np.arange(r + 1)])
            table[k, r] = logsumexp(terms)
    return table[: max_depth + 1]


def log_level_prior(counts, m: float, pi: float, log_norm: float | None = None) -> float:
    """Log probability of one particular sequence of an actor's indicators
    with per-level counts ``counts`` (length K) under the conditioned prior."""
    c = np.asarray(counts, dtype=float)
    a, b = m * pi, (1.0 - m) * pi
    gt = np.cumsum(c[::-1])[::-1] - c
    lp = float(np.sum(betaln(a + c, b + gt) - betaln(a, b)))
    if log_norm is None:
        log_norm = float(log_truncation_table(int(c.sum()), len(c), m, pi)[1, int(c.sum())])
    return lp - log_norm


class LevelCountSampler:
    """Exact draws from the conditioned level prior for actors with ``n``
    indicators each.

    Level counts are drawn top-down: given ``r`` indicators still unresolved
    at level k, the number stopping at k is drawn from its exact conditional;
    indicators are then assigned to levels by a uniform shuffle.
    """

    def __init__(self, n: int, max_depth: int, m: float, pi: float):
        self.n = int(n)
        self.max_depth = int(max_depth)
        self.m, self.pi = m, pi
        self.log_table = log_truncation_table(self.n, self.max_depth, m, pi)
        # cdf[k - 1, r, j]: P(at most j of r stop at level k | all r in k..K)
        self.cdf = self._build_cdf()

    def _build_cdf(self) -> np.ndarray:
        K, n = self.max_depth, self.n
        a, b = self.m * self.pi, (1.0 - self.m) * self.pi
        cdf = np.ones((max(K - 1, 1), n + 1, n + 1))
        for k in range(1, K):
            deeper = self.log_table[k + 1] if k + 1 <= K else None
            rows = [n] if k == 1 else range(n + 1)
            for r in rows:
                j = np.arange(r + 1, dtype=float)
                logp = (_log_binom(r, j) + betaln(a + j, b + r - j) - betaln(a, b)
                        + deeper[r - np.arange(r + 1)] - self.log_table[k, r])
                p = np.exp(logp - logsumexp(logp))
                cdf[k - 1, r, : r + 1] = np.cumsum(p)
                cdf[k - 1, r, r:] = 1.0
        return cdf

    def sample_counts(self, rng: np.random.Generator) -> np.ndarray:
        counts = np.zeros(self.max_depth, dtype=np.int64)
        remaining = self.n
        for k in range(1, self.max_depth):
            if remaining == 0:
                break
            j = int(np.searchsorted(self.cdf[k - 1, remaining, : remaining + 1],
                                    rng.random(), side="right"))
            j = min(j, remaining)
            counts[k - 1] = j
            remaining -= j
        counts[self.max_depth - 1] += remaining
        return counts

    def sample_levels(self, rng: np.random.Generator) -> np.ndarray:
        """Levels (1-based) of the actor's ``n`` indicators in a random order."""
        counts = self.sample_counts(rng)
        z = np.repeat(np.arange(1, self.max_depth + 1), counts)
        rng.shuffle(z)
        return z

    def log_normalizer(self) -> float:
        return float(self.log_table[1, self.n])

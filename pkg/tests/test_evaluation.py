import itertools
import math

import numpy as np
import pytest
from scipy.special import logsumexp

from hmmsb.evaluation import (GAMMA_GRID, LAMBDA_GRID, coassignment, consensus_paths,
                              f1_at_level, f1_report, gamma_candidates, grid_search,
                              heldout_protocol, lambda_candidates, marginal_likelihood_is,
                              merge_small_communities, mode_levels, split_actors,
                              summarize_log_weights, total_f1)
from hmmsb.generative import sample_paths
from hmmsb.gibbs import joint_log_prob
from hmmsb.model import DirectedNetwork, Hyperparams, LevelAssignments, canonicalize_paths

from conftest import random_network


def _exact_log_ml(net, h):
    """Sum the joint over every canonical tree and level assignment."""
    n, K = net.n_actors, h.K
    trees = set()
    for flat in itertools.product(range(1, n + 1), repeat=n * K):
        trees.add(tuple(map(tuple, canonicalize_paths(np.array(flat).reshape(n, K)))))
    off = [(i, j) for i in range(n) for j in range(n) if i != j]
    terms = []
    for t in trees:
        paths = np.array(t)
        for zs in itertools.product(range(1, K + 1), repeat=2 * len(off)):
            d = np.zeros((n, n), dtype=int)
            r = np.zeros((n, n), dtype=int)
            for (i, j), a, b in zip(off, zs[::2], zs[1::2]):
                d[i, j], r[i, j] = a, b
            terms.append(joint_log_prob(net, paths, LevelAssignments(d, r), h))
    return float(logsumexp(terms))


def _brute_f1(pred, truth, k):
    tp = fp = fn = 0
    for i, j in itertools.combinations(range(len(pred)), 2):
        p = tuple(pred[i][:k]) == tuple(pred[j][:k])
        t = tuple(truth[i][:k]) == tuple(truth[j][:k])
        tp += p and t
        fp += p and not t
        fn += t and not p
    if tp + fn == 0:
        return 1.0 if tp + fp == 0 else 0.0
    if tp == 0:
        return 0.0
    prec, rec = tp / (tp + fp), tp / (tp + fn)
    return 2 * prec * rec / (prec + rec)


class TestF1:
    def test_four_actor_case(self):
        truth = [[1], [1], [1], [2]]
        pred = [[1], [1], [2], [2]]
        c = f1_at_level(pred, truth, 1)
        assert (c.tp, c.fp, c.fn) == (1, 1, 2)
        assert c.f1 == pytest.approx(0.4)

    def test_identical(self, rng):
        p = sample_paths(12, Hyperparams(max_depth=3), rng)
        assert total_f1(p, p) == 1.0

    def test_label_permutation(self):
        truth = np.array([[1, 1], [1, 2], [2, 1], [2, 1]])
        relabelled = np.array([[5, 3], [5, 9], [4, 1], [4, 1]])
        assert f1_report(relabelled, truth).scores == [1.0, 1.0]

    def test_truth_without_pairs(self):
        truth = [[1], [2], [3]]
        assert f1_at_level([[1], [2], [3]], truth, 1).f1 == 1.0
        assert f1_at_level([[1], [1], [3]], truth, 1).f1 == 0.0

    def test_level_out_of_range(self):
        with pytest.raises(ValueError):
            f1_at_level([[1, 1]], [[1, 1]], 3)

    def test_matches_pair_counting_oracle(self, rng):
        h = Hyperparams(gamma=1.2, max_depth=3)
        for _ in range(5):
            pred, truth = sample_paths(20, h, rng), sample_paths(20, h, rng)
            for k in (1, 2, 3):
                assert f1_at_level(pred, truth, k).f1 == pytest.approx(_brute_f1(pred, truth, k))


class TestConsensus:
    def test_single_sample_is_its_own_consensus(self, rng):
        p = sample_paths(10, Hyperparams(max_depth=2), rng)
        np.testing.assert_array_equal(consensus_paths([p]).consensus_paths, p)

    def test_majority_grouping(self):
        a = np.array([[1, 1], [1, 1], [1, 2], [2, 1]])
        b = np.array([[1, 1], [1, 1], [2, 1], [2, 1]])
        c = np.array([[1, 1], [1, 2], [1, 2], [2, 1]])
        res = consensus_paths([a, b, c])
        np.testing.assert_allclose(res.coassignment[0, 1], [1.0, 2 / 3])
        np.testing.assert_allclose(res.coassignment[0, 2], [2 / 3, 0.0])
        np.testing.assert_array_equal(res.consensus_paths, [[1, 1], [1, 1], [1, 2], [2, 1]])

    def test_coassignment_diagonal_and_monotone(self, rng):
        samples = [sample_paths(8, Hyperparams(max_depth=3), rng) for _ in range(6)]
        co = coassignment(samples)
        assert (co[np.arange(8), np.arange(8)] == 1).all()
        assert (np.diff(co, axis=2) <= 0).all()

    def test_empty_samples(self):
        with pytest.raises(ValueError):
            coassignment([])


class TestPostProcessing:
    def test_merge_small_children(self):
        sizes = {1: 6, 2: 2, 3: 1, 4: 9}
        paths = np.array([[1, c] for c, s in sizes.items() for _ in range(s)])
        merged = merge_small_communities(paths, 5)
        _, counts = np.unique(merged[:, 1], return_counts=True)
        assert sorted(counts) == [3, 6, 9]

    def test_merge_can_stay_small(self):
        paths = np.array([[1, 1]] * 2 + [[1, 2]] * 3)
        merged = merge_small_communities(paths, 5)
        assert (merged == [1, 1]).all()

    def test_merge_is_per_parent(self):
        paths = np.array([[1, 1]] * 2 + [[2, 1]] * 2)
        np.testing.assert_array_equal(merge_small_communities(paths, 5), paths)

    def test_mode_levels_ties_coarse(self):
        z1 = np.array([[0, 1], [2, 0]])
        z2 = np.array([[0, 2], [1, 0]])
        lv = mode_levels([LevelAssignments(z1, z1), LevelAssignments(z2, z2)])
        np.testing.assert_array_equal(lv.donor, [[0, 1], [1, 0]])
        lv = mode_levels([LevelAssignments(z2, z2)] * 2 + [LevelAssignments(z1, z1)])
        np.testing.assert_array_equal(lv.receiver, z2)


class TestMarginalLikelihood:
    @pytest.mark.parametrize("edges", [[[0, 1], [0, 0]], [[0, 1], [1, 0]]])
    def test_two_actors_within_three_se(self, edges, rng):
        h = Hyperparams(gamma=0.7, m=0.5, pi=0.5, lambda1=0.5, lambda2=0.5, max_depth=2)
        net = DirectedNetwork(np.array(edges))
        est = marginal_likelihood_is(net, h, 20_000, rng)
        exact = _exact_log_ml(net, h)
        assert abs(est.log_ml - exact) < 3 * est.se + 1e-3

    def test_k1_all_weights_equal_case(self, rng):
        # one actor: no pairs, marginal likelihood is exactly 1
        est = marginal_likelihood_is(DirectedNetwork(np.zeros((1, 1))), Hyperparams(), 10, rng)
        assert est.log_ml == pytest.approx(0.0)
        assert est.se == pytest.approx(0.0)

    def test_summary_of_degenerate_weights(self):
        assert summarize_log_weights(np.full(4, -np.inf)) == (-math.inf, math.inf)
        log_ml, se = summarize_log_weights(np.log([1.0, 3.0]))
        assert log_ml == pytest.approx(math.log(2.0))

    def test_rejects_zero_samples(self, rng):
        with pytest.raises(ValueError):
            marginal_likelihood_is(DirectedNetwork(np.zeros((2, 2))), Hyperparams(), 0, rng)

    def test_reproducible(self):
        net = random_network(6, 0.3, np.random.default_rng(1))
        a = marginal_likelihood_is(net, Hyperparams(), 500, np.random.default_rng(4))
        b = marginal_likelihood_is(net, Hyperparams(), 500, np.random.default_rng(4))
        np.testing.assert_array_equal(a.log_weights, b.log_weights)


class TestGridSearch:
    def test_grids(self):
        assert len(gamma_candidates(Hyperparams())) == len(GAMMA_GRID)
        assert len(lambda_candidates(Hyperparams())) == len(LAMBDA_GRID) == 25

    def test_selects_maximum_and_threads_agree(self, rng):
        net = random_network(8, 0.2, rng)
        cands = gamma_candidates(Hyperparams(), (0.1, 1.0, 2.0))
        best, cells = grid_search(net, cands, 300, 9)
        assert best == max(cells, key=lambda c: c.estimate.log_ml).hyper
        best2, cells2 = grid_search(net, cands, 300, 9, threads=3)
        assert best2 == best
        assert [c.estimate.log_ml for c in cells2] == [c.estimate.log_ml for c in cells]

    def test_ties_go_to_smaller_gamma(self):
        # no pairs, every candidate has log ML exactly zero
        net = DirectedNetwork(np.zeros((1, 1)))
        best, _ = grid_search(net, gamma_candidates(Hyperparams(), (2.0, 0.5, 1.0)), 5, 0)
        assert best.gamma == 0.5


class TestHeldout:
    def test_split_sizes(self, rng):
        train, test = split_actors(7, rng)
        assert len(test) == 3 and len(train) == 4
        assert sorted(np.concatenate([train, test])) == list(range(7))

    def test_single_candidate_equals_direct_estimate(self, rng):
        net = random_network(4, 0.4, rng)
        h = Hyperparams()
        res = heldout_protocol(net, h, splits=2, candidates=[h], n_is_samples=200, seed=3)
        for s in res.splits:
            assert s.selected == h
            ss = np.random.SeedSequence(3).spawn(2)[s.split].spawn(3)[2]
            direct = marginal_likelihood_is(net.subgraph(s.test_actors), h, 200,
                                            np.random.default_rng(ss))
            assert s.test.log_ml == direct.log_ml

    def test_deterministic(self, rng):
        net = random_network(10, 0.3, rng)
        cands = lambda_candidates(Hyperparams(), ((0.1, 0.9), (0.5, 0.5)))
        a = heldout_protocol(net, Hyperparams(), 3, cands, 200, seed=5)
        b = heldout_protocol(net, Hyperparams(), 3, cands, 200, seed=5)
        assert a.mean_test_log_ml == b.mean_test_log_ml
        assert [s.selected for s in a.splits] == [s.selected for s in b.splits]

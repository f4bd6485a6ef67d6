import math

import numpy as np
import pytest

from critvae.metrics import explanation_metrics, rank_metrics, rank_order


def naive_ranking(scores):
    """Independent oracle: sort by (-score, index) with plain Python."""
    return [i for i, _ in sorted(enumerate(scores), key=lambda t: (-t[1], t[0]))]


def naive_metrics(scores, relevant, k):
    """Brute-force metric oracle straight from the definitions."""
    order = naive_ranking(scores)
    rel = set(relevant)

    rp = sum(1 for i in order[: len(rel)] if i in rel) / len(rel)

    dcg = 0.0
    for pos, i in enumerate(order):
        if i in rel:
            dcg += 1.0 / math.log2(pos + 2)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(len(rel)))

    topk = order[:k]
    hits_k = sum(1 for i in topk if i in rel)
    p_at_k = hits_k / k
    r_at_k = hits_k / len(rel)

    ap = 0.0
    hits = 0
    for pos, i in enumerate(topk, start=1):
        if i in rel:
            hits += 1
            ap += hits / pos
    ap /= min(len(rel), k)

    return rp, dcg / idcg, ap, p_at_k, r_at_k


class TestRankOrder:
    def test_ties_broken_by_ascending_index(self):
        assert rank_order([1.0, 3.0, 3.0, 2.0]).tolist() == [1, 2, 3, 0]

    def test_matches_naive(self):
        g = np.random.default_rng(0)
        for _ in range(50):
            scores = g.integers(0, 4, size=8).astype(float)  # many ties
            assert rank_order(scores).tolist() == naive_ranking(scores)


class TestRankMetrics:
    def test_ideal_ranking(self):
        scores = np.array([5.0, 4.0, 3.0, 0.1, 0.2])
        m = rank_metrics(scores, {0, 1, 2}, k=10)
        assert m.ndcg == 1.0
        assert m.r_precision == 1.0

    def test_single_relevant_rank_three(self):
        # relevant item at 0-indexed rank 2 -> NDCG = 1/log2(4) = 0.5
        scores = np.array([9.0, 8.0, 7.0, 1.0])
        m = rank_metrics(scores, {2}, k=10)
        assert m.ndcg == pytest.approx(1.0 / math.log2(4), abs=1e-12)

    def test_empty_relevant_rejected(self):
        with pytest.raises(ValueError):
            rank_metrics(np.ones(4), set())

    def test_matches_naive_oracle_exactly(self):
        g = np.random.default_rng(42)
        for _ in range(300):
            n = int(g.integers(4, 9))
            scores = np.round(g.normal(size=n), 2)  # rounded -> frequent ties
            n_rel = int(g.integers(1, n))
            relevant = set(g.choice(n, size=n_rel, replace=False).tolist())
            k = int(g.integers(1, 11))
            m = rank_metrics(scores, relevant, k=k)
            rp, ndcg, ap, p, r = naive_metrics(scores, relevant, k)
            assert abs(m.r_precision - rp) < 1e-12
            assert abs(m.ndcg - ndcg) < 1e-12
            assert abs(m.map_at_k - ap) < 1e-12
            assert abs(m.precision_at_k - p) < 1e-12
            assert abs(m.recall_at_k - r) < 1e-12

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            rank_metrics(np.array([1.0, np.nan]), {0})


class TestExplanationMetrics:
    def test_perfect_prefix(self):
        k_hat = np.array([0.9, 0.8, 0.1, 0.05])
        m = explanation_metrics(k_hat, {0, 1}, k=2)
        assert m.precision_at_k == 1.0

    def test_empty_true_set_rejected(self):
        with pytest.raises(ValueError):
            explanation_metrics(np.ones(3), set())

    def test_oracle_equivalence(self):
        g = np.random.default_rng(7)
        for _ in range(100):
            scores = g.normal(size=6)
            rel = set(g.choice(6, size=2, replace=False).tolist())
            m = explanation_metrics(scores, rel, k=3)
            rp, ndcg, ap, p, r = naive_metrics(scores, rel, 3)
            assert abs(m.ndcg - ndcg) < 1e-12 and abs(m.map_at_k - ap) < 1e-12

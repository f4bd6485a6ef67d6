"""Top-N ranking and keyphrase-explanation metrics.

Ranking convention everywhere: descending score, ties broken by ascending
index. Gains are binary; NDCG uses log2 discounts over the full ranking with
ideal normalization; MAP/Precision/Recall are truncated at k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricReport:
    r_precision: float
    ndcg: float
    map_at_k: float
    precision_at_k: float
    recall_at_k: float
    k: int

    def to_dict(self):
        return {
            "r_precision": self.r_precision,
            "ndcg": self.ndcg,
            "map_at_k": self.map_at_k,
            "precision_at_k": self.precision_at_k,
            "recall_at_k": self.recall_at_k,
            "k": self.k,
        }


def rank_order(scores):
    """Indices sorted by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def rank_metrics(scores, relevant, k=10):
    """Score a ranking against a nonempty relevant set."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise ValueError("rank_metrics: scores contain NaN")
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("rank_metrics: relevant set is empty")

    order = rank_order(scores)
    hit = np.fromiter((int(i) in relevant for i in order), dtype=bool, count=len(order))
    n_rel = len(relevant)

    r_precision = hit[:n_rel].sum() / n_rel

    positions = np.flatnonzero(hit)  # 0-based ranks of the relevant items
    dcg = float(np.sum(1.0 / np.log2(positions + 2.0)))
    idcg = float(np.sum(1.0 / np.log2(np.arange(n_rel) + 2.0)))
    ndcg = dcg / idcg

    top_k_hits = hit[:k]
    precision_at_k = top_k_hits.sum() / k
    recall_at_k = top_k_hits.sum() / n_rel

    cum_hits = np.cumsum(top_k_hits)
    ranks = np.arange(1, len(top_k_hits) + 1)
    ap = float(np.sum(top_k_hits * cum_hits / ranks)) / min(n_rel, k)

    return MetricReport(
        r_precision=float(r_precision),
        ndcg=float(ndcg),
        map_at_k=ap,
        precision_at_k=float(precision_at_k),
        recall_at_k=float(recall_at_k),
        k=k,
    )


def explanation_metrics(k_hat, k_true, k=10):
    """Same machinery, applied to keyphrase scores vs. the user's true likes."""
    if not set(k_true):
        raise ValueError("explanation_metrics: true keyphrase set is empty")
    return rank_metrics(k_hat, k_true, k=k)

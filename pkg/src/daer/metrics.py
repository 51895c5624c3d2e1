"""Ranking metrics. Rankings are sequences of ids, best first."""

from __future__ import annotations

import logging
import math
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


def recall_at_k(ranked: Sequence, relevant: Iterable, k: int) -> float:
    """1.0 if any relevant id is in the top-k, else 0.0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ranked) == 0:
        log.debug("empty ranking scored as 0")
        return 0.0
    rel = set(relevant)
    return 1.0 if any(r in rel for r in list(ranked)[:k]) else 0.0


# Under the single-relevant-item convention RR@K and Recall@K coincide.
rr_at_k = recall_at_k


def mean_recall_at_k(rankings: Sequence[Sequence], relevants: Sequence[Iterable], k: int) -> float:
    if not rankings:
        return 0.0
    return float(np.mean([recall_at_k(r, rel, k) for r, rel in zip(rankings, relevants)]))


def set_recall_at_k(ranked: Sequence, truth: Sequence, k: int) -> float:
    """|top-k(ranked) & top-k(truth)| / |top-k(truth)|."""
    t = set(list(truth)[:k])
    if not t:
        return 0.0
    return len(t & set(list(ranked)[:k])) / len(t)


def dcg_at_k(gains: Sequence[float], k: int) -> float:
    g = np.asarray(list(gains)[:k], dtype=np.float64)
    return float(np.sum(g / np.log2(np.arange(2, g.size + 2))))


def ndcg_at_k(ranked: Sequence, relevance: Mapping, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if any(v < 0 for v in relevance.values()):
        raise ValueError("relevance values must be non-negative")
    gains = [float(relevance.get(r, 0.0)) for r in ranked]
    ideal = sorted((float(v) for v in relevance.values()), reverse=True)
    idcg = dcg_at_k(ideal, k)
    if idcg == 0.0:
        return 0.0
    return dcg_at_k(gains, k) / idcg


def average_precision(ranked: Sequence, relevant: Iterable) -> float:
    rel = set(relevant)
    if not rel:
        return 0.0
    hits = 0
    total = 0.0
    for i, r in enumerate(ranked, start=1):
        if r in rel:
            hits += 1
            total += hits / i
    return total / len(rel)


def mean_ap(rankings: Sequence[Sequence], relevants: Sequence[Iterable]) -> float:
    if not rankings:
        return 0.0
    return float(np.mean([average_precision(r, rel) for r, rel in zip(rankings, relevants)]))


def diagonal_ranks(similarity: np.ndarray) -> np.ndarray:
    """1-based rank of column i in row i, ties resolved toward lower column index."""
    s = np.asarray(similarity, dtype=np.float64)
    diag = np.diag(s)[:, None]
    cols = np.arange(s.shape[1])[None, :]
    rows = np.arange(s.shape[0])[:, None]
    better = (s > diag) | ((s == diag) & (cols < rows))
    return 1 + better.sum(axis=1)


def in_batch_retrieval(similarity: np.ndarray) -> dict:
    """R@1, R@5 and mAP for in-batch retrieval where pair i matches i."""
    ranks = diagonal_ranks(similarity)
    return {
        "r1": float(np.mean(ranks <= 1)),
        "r5": float(np.mean(ranks <= 5)),
        "map": float(np.mean(1.0 / ranks)),
    }


def percentile(values: Sequence[float], q: float) -> float:
    if len(values) == 0:
        return math.nan
    return float(np.percentile(np.asarray(values, dtype=np.float64), q))

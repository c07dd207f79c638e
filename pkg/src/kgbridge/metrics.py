"""Ranking and correlation metrics."""
from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata


def _ranks(ranks: Sequence[int]) -> np.ndarray:
    r = np.asarray(ranks, dtype=np.int64)
    if r.size == 0:
        raise ValueError("empty rank list")
    if np.any(r < 1):
        raise ValueError("ranks are 1-based")
    return r


def mrr(ranks: Sequence[int]) -> float:
    return float(np.mean(1.0 / _ranks(ranks)))


def hit_at_k(ranks: Sequence[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(np.mean(_ranks(ranks) <= k))


def precision_recall_at_k(retrieved: Sequence, relevant: Iterable, k: int) -> tuple[float, float]:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = len(set(list(retrieved)[:k]) & relevant)
    return hits / k, hits / len(relevant)


def ndcg_at_k(retrieved: Sequence, relevance: Mapping, k: int) -> float:
    """Normalized DCG with log2(i + 1) discount; 0 when no gain is attainable."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if any(g < 0 for g in relevance.values()):
        raise ValueError("gains must be nonnegative")
    dcg = sum(relevance.get(item, 0.0) / math.log2(i + 2) for i, item in enumerate(list(retrieved)[:k]))
    ideal = sorted(relevance.values(), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
    return 0.0 if idcg == 0 else dcg / idcg


def manhattan_similarity_matrix(x) -> np.ndarray:
    """S[i, j] = -sum_k |x_ik - x_jk| (negative L1 distance)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected an (n, d) matrix")
    if not np.isfinite(x).all():
        raise ValueError("non-finite embedding rows")
    return -cdist(x, x, metric="cityblock")


def upper_triangle(m) -> np.ndarray:
    """Entries strictly above the diagonal, row-major."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("expected a square matrix")
    return m[np.triu_indices(m.shape[0], k=1)]


class UndefinedCorrelation(ValueError):
    pass


def spearman(pred: Sequence[float], gold: Sequence[float]) -> float:
    """Pearson correlation of average-tied ranks."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gold, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 1:
        raise ValueError("pred and gold must be 1-D and of equal length")
    if p.size < 2:
        raise ValueError("need at least two observations")
    rp, rg = rankdata(p), rankdata(g)
    rp -= rp.mean()
    rg -= rg.mean()
    denom = math.sqrt(float(rp @ rp) * float(rg @ rg))
    if denom == 0:
        raise UndefinedCorrelation("correlation undefined for constant input")
    return float(np.clip((rp @ rg) / denom, -1.0, 1.0))

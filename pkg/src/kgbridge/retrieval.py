"""Exact inner-product retrieval over unit-norm candidate matrices."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bridge import BridgeModel, l2_normalize
from .encoders import EmbeddingCache

@dataclass
class EmbeddingIndex:
    modality: str
    matrix: np.ndarray  # (|C|, d), unit rows
    ids: list[str]
    filters: Mapping[object, frozenset] | None = None
    _pos: dict[str, int] = field(default_factory=dict, repr=False)
    _id_order: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in index")
        if len(self.ids) != self.matrix.shape[0]:
            raise ValueError("id count does not match row count")
        self._pos = {nid: i for i, nid in enumerate(self.ids)}
        # rank of each row's id in lexicographic order, used for tie-breaks
        self._id_order = id_order_of(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, node_id: str) -> int:
        try:
            return self._pos[node_id]
        except KeyError:
            raise KeyError(f"{node_id!r} is not in the {self.modality!r} index") from None

    def scores(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        return self.matrix.astype(np.float64) @ q.T


def build_index(node_ids: Iterable[str], cache: EmbeddingCache, model: BridgeModel | None = None) -> EmbeddingIndex:
    """Rows are normalize(project(raw)), or normalize(raw) when ``model`` is None."""
    node_ids = list(node_ids)
    if len(set(node_ids)) != len(node_ids):
        raise ValueError("duplicate node ids")
    try:
        modality, raw = cache.rows(node_ids)
    except ValueError as exc:
        raise ValueError(f"mixed-modality index: {exc}") from None
    if model is None:
        mat = l2_normalize(raw.astype(np.float32))
    else:
        mat = model.encode_candidates(raw, modality).data
    return EmbeddingIndex(modality, mat, node_ids)


@dataclass
class RankedResult:
    items: list[tuple[str, float]]
    truncated: bool = False  # k exceeded the candidate count
    meta: dict = field(default_factory=dict)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.items]

    def to_dict(self) -> dict:
        return {
            "results": [{"id": i, "score": s} for i, s in self.items],
            "k_exceeds_candidates": self.truncated,
            "query": self.meta,
        }


def _order(scores: np.ndarray, id_order: np.ndarray) -> np.ndarray:
    return np.lexsort((id_order, -scores))


def _check_query(query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError("query must be a vector")
    if abs(np.linalg.norm(q) - 1.0) > 1e-4:
        raise ValueError("query must be unit-norm")
    return q


def top_k(index: EmbeddingIndex, query, k: int, meta: dict | None = None) -> RankedResult:
    """Exact top-k by inner product; ties broken by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    s = index.scores(_check_query(query))
    n = len(s)
    truncated = k > n
    k = min(k, n)
    if k < n:
        # everything scoring at least the k-th best, then an exact ordering
        kth = np.partition(s, n - k)[n - k]
        cand = np.nonzero(s >= kth)[0]
    else:
        cand = np.arange(n)
    picked = cand[_order(s[cand], index._id_order[cand])][:k]
    items = [(index.ids[i], float(s[i])) for i in picked]
    return RankedResult(items, truncated, dict(meta or {}))


def rank_of_target(
    index: EmbeddingIndex,
    query,
    target_id: str,
    filter_ids: Iterable[str] | None = None,
    raw: bool = False,
) -> int:
    """1-based rank of the target; filtered mode drops other known positives."""
    s = index.scores(_check_query(query))
    t = index.position(target_id)
    return int(ranks_against(index, s[None, :], np.array([t]), None if raw else [filter_ids])[0])


def ranks_against(
    index: EmbeddingIndex,
    scores: np.ndarray,
    targets: np.ndarray,
    filters: Sequence[Iterable[str] | None] | None = None,
) -> np.ndarray:
    """Ranks of ``targets`` (row positions) for each row of ``scores`` (n_queries, |C|)."""
    drops = None
    if filters is not None:
        drops = [[index._pos[n] for n in (f or ()) if n in index._pos] for f in filters]
    return ranks_from_scores(scores, targets, index._id_order, drops)


def id_order_of(ids: Sequence[str]) -> np.ndarray:
    """Position of each id in lexicographic order (tie-break key)."""
    order = sorted(range(len(ids)), key=ids.__getitem__)
    out = np.empty(len(ids), dtype=np.int64)
    out[order] = np.arange(len(ids))
    return out


def ranks_from_scores(
    scores: np.ndarray,
    targets: np.ndarray,
    id_order: np.ndarray,
    drops: Sequence[Sequence[int]] | None = None,
) -> np.ndarray:
    """1-based ranks under (score desc, id asc) ordering, ignoring dropped columns.

    The target column itself is never dropped.
    """
    scores = np.atleast_2d(scores)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    st = scores[rows, targets][:, None]
    ahead = (scores > st) | ((scores == st) & (id_order[None, :] < id_order[targets][:, None]))
    if drops is not None:
        for qi, cols in enumerate(drops):
            cols = [c for c in cols if c != targets[qi]]
            if cols:
                ahead[qi, cols] = False
    return 1 + ahead.sum(axis=1)

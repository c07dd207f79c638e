"""Link-prediction and semantic-similarity evaluation pipelines."""
from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import no_record
from .bridge import BridgeModel
from .encoders import EmbeddingCache
from .kg import DataError, KnowledgeGraph, Triple
from .kge import KgeModel
from .metrics import hit_at_k, manhattan_similarity_matrix, mrr, ndcg_at_k, precision_recall_at_k, spearman, upper_triangle
from .retrieval import id_order_of, ranks_from_scores

TaskKey = tuple[str, str, str]  # (relation, head modality, tail modality)


def task_label(key: TaskKey) -> str:
    rel, hm, tm = key
    return f"{hm} -[{rel}]-> {tm}"


@dataclass
class EvalReport:
    tasks: dict[str, dict]
    overall: dict
    mode: str
    ks: tuple[int, ...]
    k_retrieval: int
    model_kind: str
    per_triple: list[dict] = field(default_factory=list)

    def to_dict(self, include_triples: bool = False) -> dict:
        out = {
            "model": self.model_kind,
            "ranking": self.mode,
            "ks": list(self.ks),
            "k_retrieval": self.k_retrieval,
            "overall": self.overall,
            "tasks": self.tasks,
        }
        if include_triples:
            out["per_triple"] = self.per_triple
        return out

    def to_json(self, include_triples: bool = False) -> str:
        return json.dumps(self.to_dict(include_triples), sort_keys=True, indent=2)

    def write_ranks_tsv(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("head_id\trelation\ttail_id\trank\n")
            for rec in self.per_triple:
                fh.write(f"{rec['head']}\t{rec['relation']}\t{rec['tail']}\t{rec['rank']}\n")


def _bridge_scores(model: BridgeModel, cache: EmbeddingCache, heads, key: TaskKey, candidates) -> np.ndarray:
    rel, hm, tm = key
    with no_record():
        _, cand_raw = cache.rows(candidates)
        h_c = model.encode_candidates(cand_raw, tm).data.astype(np.float64)
        _, head_raw = cache.rows(heads)
        q = model.transform(model.project(head_raw, hm), hm, tm, rel).data.astype(np.float64)
    return q @ h_c.T


def score_queries(model, cache: EmbeddingCache | None, heads: Sequence[str], key: TaskKey, candidates: Sequence[str]) -> np.ndarray:
    if isinstance(model, BridgeModel):
        if cache is None:
            raise ValueError("bridge evaluation needs an embedding cache")
        return _bridge_scores(model, cache, heads, key, candidates)
    if isinstance(model, KgeModel):
        return model.score_matrix(list(heads), key[0], candidates)
    raise TypeError(f"cannot evaluate {type(model).__name__}")


def _metrics(ranks: list[int], ks: Sequence[int]) -> dict:
    out = {"count": len(ranks), "mrr": mrr(ranks)}
    for k in ks:
        out[f"hit@{k}"] = hit_at_k(ranks, k)
    return out


def known_from_split(kg: KnowledgeGraph, split) -> KnowledgeGraph:
    """Filter graph holding the train and valid triples of a split."""
    return kg.with_triples(list(split.train) + list(split.valid))


def evaluate_link_prediction(
    model,
    triples: Sequence[Triple],
    kg: KnowledgeGraph,
    cache: EmbeddingCache | None = None,
    ks: Sequence[int] = (1, 3, 10),
    filtered: bool = True,
    k_retrieval: int = 10,
    known: KnowledgeGraph | None = None,
    tasks: Iterable[TaskKey] | None = None,
) -> EvalReport:
    """Tail ranking against every node of the tail modality.

    Filtered mode removes the other known tails of (head, relation), taken
    from ``known``. Pass ``known_from_split(kg, split)`` for train/valid
    filtering; without it every triple in ``kg`` counts as known.
    """
    known = known or kg
    by_task: dict[TaskKey, list[Triple]] = defaultdict(list)
    for t in triples:
        by_task[kg.stratum(t)].append(t)
    wanted = set(tasks) if tasks is not None else None
    mod_pos = {m: i for i, m in enumerate(kg.modality_vocab)}
    rel_pos = {r: i for i, r in enumerate(kg.relation_vocab)}
    keys = sorted(by_task, key=lambda k: (mod_pos[k[1]], rel_pos[k[0]], mod_pos[k[2]]))
    if wanted is not None:
        keys = [k for k in keys if k in wanted]
        if not keys:
            raise DataError(f"no test triples for the requested task(s) {sorted(wanted)}")
    if not keys:
        raise DataError("nothing to evaluate")

    report_tasks: dict[str, dict] = {}
    all_ranks: list[int] = []
    all_p, all_r, all_n = [], [], []
    per_triple: list[dict] = []
    for key in keys:
        items = by_task[key]
        rel = key[0]
        candidates = kg.nodes_of(key[2])
        pos = {c: i for i, c in enumerate(candidates)}
        id_order = id_order_of(candidates)
        heads = sorted({t.head_id for t in items})
        head_row = {h: i for i, h in enumerate(heads)}
        scores = score_queries(model, cache, heads, key, candidates)

        rows = scores[[head_row[t.head_id] for t in items]]
        targets = np.array([pos[t.tail_id] for t in items])
        drops = None
        if filtered:
            drops = [[pos[n] for n in known.adjacency.get((t.head_id, rel), ()) if n in pos] for t in items]
        ranks = [int(r) for r in ranks_from_scores(rows, targets, id_order, drops)]
        for t, r in zip(items, ranks):
            per_triple.append({"head": t.head_id, "relation": rel, "tail": t.tail_id, "rank": r})

        # set-based retrieval metrics per (head, relation) query
        relevant: dict[str, set[str]] = defaultdict(set)
        for t in items:
            relevant[t.head_id].add(t.tail_id)
        ps, rs, ns = [], [], []
        for h in heads:
            s = scores[head_row[h]]
            keep = np.ones(len(candidates), dtype=bool)
            if filtered:
                for n in known.adjacency.get((h, rel), ()):
                    if n in pos and n not in relevant[h]:
                        keep[pos[n]] = False
            idx = np.nonzero(keep)[0]
            order = idx[np.lexsort((id_order[idx], -s[idx]))][:k_retrieval]
            retrieved = [candidates[i] for i in order]
            p, r = precision_recall_at_k(retrieved, relevant[h], k_retrieval)
            ps.append(p)
            rs.append(r)
            ns.append(ndcg_at_k(retrieved, {x: 1.0 for x in relevant[h]}, k_retrieval))
        m = _metrics(ranks, ks)
        m.update({
            f"precision@{k_retrieval}": float(np.mean(ps)),
            f"recall@{k_retrieval}": float(np.mean(rs)),
            f"ndcg@{k_retrieval}": float(np.mean(ns)),
            "queries": len(heads),
            "candidates": len(candidates),
        })
        report_tasks[task_label(key)] = m
        all_ranks.extend(ranks)
        all_p.extend(ps)
        all_r.extend(rs)
        all_n.extend(ns)

    overall = _metrics(all_ranks, ks)
    overall.update({
        f"precision@{k_retrieval}": float(np.mean(all_p)),
        f"recall@{k_retrieval}": float(np.mean(all_r)),
        f"ndcg@{k_retrieval}": float(np.mean(all_n)),
    })
    kind = "bridge" if isinstance(model, BridgeModel) else f"kge:{model.family}"
    return EvalReport(report_tasks, overall, "filtered" if filtered else "raw", tuple(ks), k_retrieval, kind, per_triple)


# ---------------------------------------------------------------------------
# semantic similarity


def transformed_embeddings(
    model: BridgeModel,
    cache: EmbeddingCache,
    node_ids: Sequence[str],
    tail_modality: str,
    relation: str,
) -> np.ndarray:
    modality, raw = cache.rows(node_ids)
    with no_record():
        return model.transform(model.project(raw, modality), modality, tail_modality, relation).data.astype(np.float64)


def semantic_prediction_matrices(
    node_ids: Sequence[str],
    model: BridgeModel,
    cache: EmbeddingCache,
    aspects: Mapping[str, str],
    relation: str = "interacts with",
) -> dict[str, np.ndarray]:
    """Manhattan similarity of transformed embeddings per aspect (aspect -> tail modality)."""
    return {
        a: manhattan_similarity_matrix(transformed_embeddings(model, cache, node_ids, tm, relation))
        for a, tm in aspects.items()
    }


def semantic_similarity_eval(
    node_ids: Sequence[str],
    model: BridgeModel,
    cache: EmbeddingCache,
    gold: Mapping[str, np.ndarray],
    aspects: Mapping[str, str] | None = None,
    relation: str = "interacts with",
) -> dict[str, float]:
    """Spearman rho between predicted and gold similarity, upper triangles only.

    ``aspects`` maps each gold key to the tail modality used for the
    transformation; by default the key itself is the modality label.
    """
    node_ids = list(node_ids)
    for nid in node_ids:
        if nid not in cache:
            raise KeyError(f"no cached embedding for {nid!r}")
    aspects = dict(aspects) if aspects is not None else {a: a for a in gold}
    n = len(node_ids)
    for a, g in gold.items():
        if np.shape(g) != (n, n):
            raise ValueError(f"gold matrix for {a!r} must be {n}x{n}")
    preds = semantic_prediction_matrices(node_ids, model, cache, {a: aspects[a] for a in gold}, relation)
    return {a: spearman(upper_triangle(preds[a]), upper_triangle(np.asarray(gold[a]))) for a in gold}


def load_gold_matrix(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    """TSV: first line holds the n ids, then n rows of n values."""
    lines = [ln.rstrip("\n") for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty gold matrix")
    ids = lines[0].split("\t")
    try:
        mat = np.array([[float(v) for v in ln.split("\t")] for ln in lines[1:]])
    except ValueError:
        raise DataError(f"{path}: non-numeric value in gold matrix") from None
    if mat.shape != (len(ids), len(ids)):
        raise DataError(f"{path}: expected {len(ids)}x{len(ids)} values, got {mat.shape}")
    return ids, mat


def write_gold_matrix(path: str | os.PathLike, ids: Sequence[str], mat: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(ids) + "\n")
        for row in np.asarray(mat):
            fh.write("\t".join(repr(float(v)) for v in row) + "\n")

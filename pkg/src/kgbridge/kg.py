"""Multimodal knowledge graphs: typed nodes and relation-labelled triples.

File formats (UTF-8, tab separated)::

    #nodes v1
    [#modalities<TAB>protein<TAB>drug ...]      optional declared vocabulary
    node_id<TAB>modality<TAB>feature

    #triples v1
    [#relations<TAB>ppi<TAB>target ...]         optional declared vocabulary
    head_id<TAB>relation<TAB>tail_id
"""
from __future__ import annotations

import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

NODES_HEADER = "#nodes v1"
TRIPLES_HEADER = "#triples v1"


class DataError(ValueError):
    """Invalid input data (malformed files, inconsistent graphs, bad caches)."""


class GraphFormatError(DataError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class DanglingIdError(DataError):
    def __init__(self, node_id: str, where: str = ""):
        super().__init__(f"triple references unknown node id {node_id!r}{where}")
        self.node_id = node_id


class DuplicateNodeError(DataError):
    pass


class UnknownLabelError(DataError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    modality: str
    feature: str


@dataclass(frozen=True)
class Triple:
    head_id: str
    relation: str
    tail_id: str


StratumKey = tuple[str, str, str]  # (relation, head modality, tail modality)


class KnowledgeGraph:
    """Validated, immutable graph. Build with :meth:`build` or :func:`load_graph`."""

    def __init__(
        self,
        nodes: Mapping[str, Node],
        triples: Sequence[Triple],
        modality_vocab: Sequence[str],
        relation_vocab: Sequence[str],
    ):
        self.nodes: Mapping[str, Node] = MappingProxyType(dict(nodes))
        self.triples: tuple[Triple, ...] = tuple(triples)
        self.modality_vocab: tuple[str, ...] = tuple(modality_vocab)
        self.relation_vocab: tuple[str, ...] = tuple(relation_vocab)
        adj: dict[tuple[str, str], set[str]] = defaultdict(set)
        for t in self.triples:
            adj[(t.head_id, t.relation)].add(t.tail_id)
        self.adjacency: Mapping[tuple[str, str], frozenset[str]] = MappingProxyType(
            {k: frozenset(v) for k, v in adj.items()}
        )
        self._by_modality: dict[str, list[str]] = {m: [] for m in self.modality_vocab}
        for node in self.nodes.values():
            self._by_modality[node.modality].append(node.id)
        for ids in self._by_modality.values():
            ids.sort()

    @classmethod
    def build(
        cls,
        nodes: Iterable[Node],
        triples: Iterable[Triple],
        modality_vocab: Sequence[str] | None = None,
        relation_vocab: Sequence[str] | None = None,
    ) -> "KnowledgeGraph":
        node_map: dict[str, Node] = {}
        modalities: list[str] = list(modality_vocab) if modality_vocab is not None else []
        _check_unique(modalities, "modality")
        for n in nodes:
            if not n.id:
                raise DataError("empty node id")
            if not n.feature:
                raise DataError(f"node {n.id!r} has an empty feature")
            if n.id in node_map:
                raise DuplicateNodeError(f"duplicate node id {n.id!r}")
            if n.modality not in modalities:
                if modality_vocab is not None:
                    raise UnknownLabelError(f"node {n.id!r}: modality {n.modality!r} not in declared vocabulary")
                modalities.append(n.modality)
            node_map[n.id] = n
        relations: list[str] = list(relation_vocab) if relation_vocab is not None else []
        _check_unique(relations, "relation")
        kept: list[Triple] = []
        for t in triples:
            _validate_triple(t, node_map)
            if t.relation not in relations:
                if relation_vocab is not None:
                    raise UnknownLabelError(f"relation {t.relation!r} not in declared vocabulary")
                relations.append(t.relation)
            kept.append(t)
        return cls(node_map, kept, modalities, relations)

    def nodes_of(self, modality: str) -> list[str]:
        """Node ids of one modality, lexicographically sorted."""
        if modality not in self._by_modality:
            raise UnknownLabelError(f"unknown modality {modality!r}")
        return list(self._by_modality[modality])

    def stratum(self, t: Triple) -> StratumKey:
        return (t.relation, self.nodes[t.head_id].modality, self.nodes[t.tail_id].modality)

    def with_triples(self, triples: Iterable[Triple]) -> "KnowledgeGraph":
        """Same nodes and vocabularies, different edge set."""
        triples = list(triples)
        for t in triples:
            _validate_triple(t, self.nodes)
        return KnowledgeGraph(self.nodes, triples, self.modality_vocab, self.relation_vocab)

    def __repr__(self) -> str:
        return f"KnowledgeGraph({len(self.nodes)} nodes, {len(self.triples)} triples)"


def _check_unique(items: Sequence[str], what: str) -> None:
    dup = [k for k, c in Counter(items).items() if c > 1]
    if dup:
        raise DataError(f"duplicate {what} labels in vocabulary: {dup}")


def _validate_triple(t: Triple, nodes: Mapping[str, Node]) -> None:
    for nid in (t.head_id, t.tail_id):
        if nid not in nodes:
            raise DanglingIdError(nid)
    if t.head_id == t.tail_id:
        raise DataError(f"self-loop on {t.head_id!r} ({t.relation!r}) is not allowed")
    if not t.relation:
        raise DataError("empty relation label")


# ---------------------------------------------------------------------------
# TSV I/O


def _read_table(path: Path, header: str, vocab_tag: str) -> tuple[list[tuple[int, list[str]]], list[str] | None]:
    rows: list[tuple[int, list[str]]] = []
    vocab: list[str] | None = None
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n").rstrip("\r")
        if first != header:
            raise GraphFormatError(path, 1, f"expected header {header!r}, got {first!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            if line.startswith("#"):
                parts = line.split("\t")
                if parts[0] == vocab_tag and vocab is None and not rows:
                    vocab = [p for p in parts[1:] if p]
                    continue
                raise GraphFormatError(path, lineno, f"unexpected directive {parts[0]!r}")
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise GraphFormatError(path, lineno, f"expected 3 non-empty tab-separated fields, got {len(parts)}")
            rows.append((lineno, parts))
    return rows, vocab


def load_graph(nodes_path: str | os.PathLike, triples_path: str | os.PathLike) -> KnowledgeGraph:
    nodes_path, triples_path = Path(nodes_path), Path(triples_path)
    node_rows, modality_vocab = _read_table(nodes_path, NODES_HEADER, "#modalities")
    nodes: list[Node] = []
    seen: set[str] = set()
    for lineno, (nid, modality, feature) in node_rows:
        if nid in seen:
            raise GraphFormatError(nodes_path, lineno, f"duplicate node id {nid!r}")
        if modality_vocab is not None and modality not in modality_vocab:
            raise GraphFormatError(nodes_path, lineno, f"unknown modality {modality!r}")
        seen.add(nid)
        nodes.append(Node(nid, modality, feature))
    triple_rows, relation_vocab = _read_table(triples_path, TRIPLES_HEADER, "#relations")
    triples: list[Triple] = []
    for lineno, (h, r, t) in triple_rows:
        for nid in (h, t):
            if nid not in seen:
                raise DanglingIdError(nid, f" at {triples_path}:{lineno}")
        if h == t:
            raise GraphFormatError(triples_path, lineno, f"self-loop on {h!r}")
        if relation_vocab is not None and r not in relation_vocab:
            raise GraphFormatError(triples_path, lineno, f"unknown relation {r!r}")
        triples.append(Triple(h, r, t))
    return KnowledgeGraph.build(nodes, triples, modality_vocab, relation_vocab)


def _check_field(value: str, what: str) -> None:
    if "\t" in value or "\n" in value or "\r" in value:
        raise DataError(f"{what} {value!r} contains a tab or newline")


def write_nodes(nodes: Iterable[Node], path: str | os.PathLike, modality_vocab: Sequence[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(NODES_HEADER + "\n")
        if modality_vocab is not None:
            fh.write("\t".join(["#modalities", *modality_vocab]) + "\n")
        for n in nodes:
            _check_field(n.feature, "feature")
            fh.write(f"{n.id}\t{n.modality}\t{n.feature}\n")


def write_triples(triples: Iterable[Triple], path: str | os.PathLike, relation_vocab: Sequence[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRIPLES_HEADER + "\n")
        if relation_vocab is not None:
            fh.write("\t".join(["#relations", *relation_vocab]) + "\n")
        for t in triples:
            fh.write(f"{t.head_id}\t{t.relation}\t{t.tail_id}\n")


def save_graph(kg: KnowledgeGraph, nodes_path, triples_path, declare_vocab: bool = True) -> None:
    write_nodes(kg.nodes.values(), nodes_path, kg.modality_vocab if declare_vocab else None)
    write_triples(kg.triples, triples_path, kg.relation_vocab if declare_vocab else None)


# ---------------------------------------------------------------------------
# splitting


@dataclass
class TripleSplit:
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    ratios: tuple[float, float, float]
    seed: int
    stratum_counts: dict[StratumKey, tuple[int, int, int]] = field(default_factory=dict)
    warnings: list[dict] = field(default_factory=list)

    def stratification_key(self, kg: KnowledgeGraph) -> dict[Triple, StratumKey]:
        return {t: kg.stratum(t) for t in (*self.train, *self.valid, *self.test)}


def split_triples(kg: KnowledgeGraph, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> TripleSplit:
    """Stratified random split by (relation, head modality, tail modality)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    strata: dict[StratumKey, list[Triple]] = defaultdict(list)
    for t in kg.triples:
        strata[kg.stratum(t)].append(t)
    rng = np.random.default_rng(seed)
    train: list[Triple] = []
    valid: list[Triple] = []
    test: list[Triple] = []
    counts: dict[StratumKey, tuple[int, int, int]] = {}
    warnings: list[dict] = []
    for key in sorted(strata):
        members = strata[key]
        n = len(members)
        if n < 3:
            train.extend(members)
            counts[key] = (n, 0, 0)
            warnings.append({"stratum": list(key), "size": n, "message": "fewer than 3 triples; kept in train"})
            log.warning("stratum %s has %d triple(s); placed wholly in train", key, n)
            continue
        order = rng.permutation(n)
        n_valid = int(round(ratios[1] * n))
        n_test = int(round(ratios[2] * n))
        n_train = n - n_valid - n_test
        shuffled = [members[i] for i in order]
        train.extend(shuffled[:n_train])
        valid.extend(shuffled[n_train : n_train + n_valid])
        test.extend(shuffled[n_train + n_valid :])
        counts[key] = (n_train, n_valid, n_test)
    return TripleSplit(train, valid, test, ratios, seed, counts, warnings)


def write_split(split: TripleSplit, out_dir: str | os.PathLike) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for part in ("train", "valid", "test"):
        paths[part] = out_dir / f"{part}.tsv"
        write_triples(getattr(split, part), paths[part])
    meta = {
        "ratios": list(split.ratios),
        "seed": split.seed,
        "strata": [
            {"relation": k[0], "head_modality": k[1], "tail_modality": k[2], "train": c[0], "valid": c[1], "test": c[2]}
            for k, c in split.stratum_counts.items()
        ],
        "warnings": split.warnings,
    }
    paths["meta"] = out_dir / "split.json"
    paths["meta"].write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return paths


def _read_triples_file(path: Path, kg: KnowledgeGraph) -> list[Triple]:
    rows, _ = _read_table(path, TRIPLES_HEADER, "#relations")
    out = []
    for lineno, (h, r, t) in rows:
        triple = Triple(h, r, t)
        try:
            _validate_triple(triple, kg.nodes)
        except DataError as exc:
            raise GraphFormatError(path, lineno, str(exc)) from None
        out.append(triple)
    return out


def load_split(split_dir: str | os.PathLike, kg: KnowledgeGraph) -> TripleSplit:
    split_dir = Path(split_dir)
    meta = json.loads((split_dir / "split.json").read_text(encoding="utf-8"))
    parts = {p: _read_triples_file(split_dir / f"{p}.tsv", kg) for p in ("train", "valid", "test")}
    counts = {
        (s["relation"], s["head_modality"], s["tail_modality"]): (s["train"], s["valid"], s["test"]) for s in meta["strata"]
    }
    return TripleSplit(
        parts["train"], parts["valid"], parts["test"], tuple(meta["ratios"]), meta["seed"], counts, meta.get("warnings", [])
    )


# ---------------------------------------------------------------------------
# statistics


@dataclass
class GraphStats:
    node_counts: dict[str, int]
    triple_counts: dict[tuple[str, str, str], int]  # (head modality, relation, tail modality)

    @property
    def n_nodes(self) -> int:
        return sum(self.node_counts.values())

    @property
    def n_triples(self) -> int:
        return sum(self.triple_counts.values())

    def to_dict(self) -> dict:
        return {
            "nodes": dict(self.node_counts),
            "triples": [
                {"head_modality": h, "relation": r, "tail_modality": t, "count": c}
                for (h, r, t), c in self.triple_counts.items()
            ],
            "total_nodes": self.n_nodes,
            "total_triples": self.n_triples,
        }


def graph_stats(kg: KnowledgeGraph) -> GraphStats:
    node_counts = {m: 0 for m in kg.modality_vocab}
    for n in kg.nodes.values():
        node_counts[n.modality] += 1
    raw = Counter((kg.nodes[t.head_id].modality, t.relation, kg.nodes[t.tail_id].modality) for t in kg.triples)
    mod_pos = {m: i for i, m in enumerate(kg.modality_vocab)}
    rel_pos = {r: i for i, r in enumerate(kg.relation_vocab)}
    keys = sorted(raw, key=lambda k: (mod_pos[k[0]], rel_pos[k[1]], mod_pos[k[2]]))
    return GraphStats(node_counts, {k: raw[k] for k in keys})


# ---------------------------------------------------------------------------
# planted graphs


@dataclass(frozen=True)
class PlantedRelation:
    name: str
    head: str
    tail: str
    map_kind: str = "orthogonal"  # orthogonal | identity | gaussian
    map_seed: int = 0


@dataclass(frozen=True)
class PlantedKgSpec:
    modalities: tuple[tuple[str, int], ...]
    latent_dim: int
    relations: tuple[PlantedRelation, ...]
    edges_per_head: int = 1
    noise_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.edges_per_head < 1:
            raise ValueError("edges_per_head must be >= 1")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        sizes = dict(self.modalities)
        for rel in self.relations:
            if rel.head not in sizes or rel.tail not in sizes:
                raise ValueError(f"relation {rel.name!r} uses an undeclared modality")
            pool = sizes[rel.tail] - (1 if rel.head == rel.tail else 0)
            if pool < self.edges_per_head:
                raise ValueError(f"modality {rel.tail!r} too small for {self.edges_per_head} edges per head")
        for name, size in self.modalities:
            if size < self.edges_per_head:
                raise ValueError(f"modality {name!r} has fewer nodes than edges_per_head")


def _planted_map(rel: PlantedRelation, dim: int) -> np.ndarray:
    if rel.map_kind == "identity":
        return np.eye(dim)
    rng = np.random.default_rng([rel.map_seed, 0x5EED])
    g = rng.standard_normal((dim, dim))
    if rel.map_kind == "gaussian":
        return g / np.sqrt(dim)
    if rel.map_kind == "orthogonal":
        q, r = np.linalg.qr(g)
        return q * np.sign(np.diag(r))
    raise ValueError(f"unknown map kind {rel.map_kind!r}")


def format_vector(v: np.ndarray) -> str:
    return ",".join(repr(float(x)) for x in v)


def generate_planted_kg(spec: PlantedKgSpec) -> tuple[KnowledgeGraph, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Synthesize a graph whose edges follow known linear maps over unit latents.

    For each relation with map A, every head u links to the ``edges_per_head``
    tail-modality latents nearest (Euclidean) to ``A @ u + noise``.
    """
    rng = np.random.default_rng(spec.seed)
    latents: dict[str, np.ndarray] = {}
    ids_by_mod: dict[str, list[str]] = {}
    nodes: list[Node] = []
    for name, size in spec.modalities:
        x = rng.standard_normal((size, spec.latent_dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        ids = [f"{name}_{i:04d}" for i in range(size)]
        ids_by_mod[name] = ids
        for nid, row in zip(ids, x):
            latents[nid] = row
            nodes.append(Node(nid, name, format_vector(row)))
    maps: dict[str, np.ndarray] = {}
    triples: list[Triple] = []
    for rel in spec.relations:
        a = _planted_map(rel, spec.latent_dim)
        maps[rel.name] = a
        tails = ids_by_mod[rel.tail]
        tail_mat = np.stack([latents[t] for t in tails])
        for hid in ids_by_mod[rel.head]:
            target = a @ latents[hid]
            if spec.noise_scale > 0:
                target = target + spec.noise_scale * rng.standard_normal(spec.latent_dim)
            dist = np.linalg.norm(tail_mat - target, axis=1)
            if rel.head == rel.tail:
                dist[tails.index(hid)] = np.inf
            for j in np.argsort(dist, kind="stable")[: spec.edges_per_head]:
                triples.append(Triple(hid, rel.name, tails[j]))
    kg = KnowledgeGraph.build(nodes, triples, [m for m, _ in spec.modalities], [r.name for r in spec.relations])
    return kg, latents, maps

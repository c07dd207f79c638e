"""Regenerate the small six-modality graph used by the integration tests.

python3 tests/fixtures/make_biomed_graph.py tests/fixtures/biomed
"""
import sys
from pathlib import Path

import numpy as np

from kgbridge.kg import KnowledgeGraph, Node, Triple, save_graph

MODALITIES = ["protein", "drug", "disease", "biological_process", "molecular_function", "cellular_component"]

# relation label -> (head modality, tail modality)
RELATIONS = {
    "drug_drug": ("drug", "drug"),
    "protein_protein": ("protein", "protein"),
    "bioprocess_protein": ("protein", "biological_process"),
    "cellcomp_protein": ("protein", "cellular_component"),
    "disease_protein": ("disease", "protein"),
    "molfunc_protein": ("protein", "molecular_function"),
    "bioprocess_bioprocess": ("biological_process", "biological_process"),
    "disease_disease": ("disease", "disease"),
    "contraindication": ("drug", "disease"),
    "drug_protein": ("drug", "protein"),
    "molfunc_molfunc": ("molecular_function", "molecular_function"),
    "indication": ("drug", "disease"),
    "cellcomp_cellcomp": ("cellular_component", "cellular_component"),
    "off-label use": ("drug", "disease"),
}

AMINO = "ACDEFGHIKLMNPQRSTVWY"
SMILES_ATOMS = ["C", "C", "C", "N", "O", "c1ccccc1", "Cl", "F", "S", "C(=O)", "O"]
WORDS = ("cell regulation binding membrane process response activity signal transport kinase "
         "receptor pathway disorder syndrome chronic acute tissue metabolic complex nuclear").split()


def feature(rng, modality):
    if modality == "protein":
        return "M" + "".join(rng.choice(list(AMINO), size=int(rng.integers(30, 60))))
    if modality == "drug":
        return "".join(rng.choice(SMILES_ATOMS, size=int(rng.integers(4, 10))))
    return " ".join(rng.choice(WORDS, size=int(rng.integers(4, 9))))


def build(n_per_modality=8, edges_per_relation=10, seed=5):
    rng = np.random.default_rng(seed)
    nodes, by_mod = [], {}
    for m in MODALITIES:
        ids = [f"{m}:{i:02d}" for i in range(n_per_modality)]
        by_mod[m] = ids
        nodes += [Node(i, m, feature(rng, m)) for i in ids]
    triples = set()
    for rel, (hm, tm) in RELATIONS.items():
        while sum(1 for t in triples if t.relation == rel) < edges_per_relation:
            h, t = rng.choice(by_mod[hm]), rng.choice(by_mod[tm])
            if h != t:
                triples.add(Triple(str(h), rel, str(t)))
    order = {r: i for i, r in enumerate(RELATIONS)}
    triples = sorted(triples, key=lambda t: (order[t.relation], t.head_id, t.tail_id))
    return KnowledgeGraph.build(nodes, triples, MODALITIES, list(RELATIONS))


if __name__ == "__main__":
    out = Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)
    save_graph(build(), out / "nodes.tsv", out / "triples.tsv")

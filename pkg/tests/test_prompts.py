from pathlib import Path

import numpy as np
import pytest

from kgbridge.bridge import BridgeConfig, BridgeModel
from kgbridge.prompts import (
    PromptBundle,
    PromptError,
    RetrievalRole,
    assemble_prompt,
    placeholders,
    retrieve_for_rag,
)
from kgbridge.retrieval import build_index, top_k

GOLDEN = Path(__file__).parent / "fixtures" / "prompts"


def test_molecule_qa_golden():
    bundle = PromptBundle(
        "molecule-qa",
        {"proteins": ["PTGS1", "PTGS2"], "diseases": ["pain", "fever", "rheumatoid arthritis"]},
        {"smiles": "CC(=O)Oc1ccccc1C(=O)O", "input_question": "what is the mechanism of action of this drug?"},
    )
    assert assemble_prompt(bundle).encode() == (GOLDEN / "molecule_qa.txt").read_bytes()


def test_molecule_generation_golden():
    bundle = PromptBundle(
        "molecule-generation",
        {"proteins": ["DRD2", "HTR2A", "ADRA1A"]},
        {"text_guidance": "The drug should treat schizophrenia with few motor side effects."},
    )
    assert assemble_prompt(bundle).encode() == (GOLDEN / "molecule_generation.txt").read_bytes()


def test_protein_qa_assembles():
    text = assemble_prompt(PromptBundle(
        "protein-qa",
        {"go_terms": ["apoptosis"], "diseases": ["glioma"]},
        {"sequence": "MKV", "input_question": "what does it do?"},
    ))
    assert text.startswith("Protein sequence: MKV\n") and text.endswith("what does it do?\n")


def test_placeholders():
    assert placeholders("a {x} b {y}") == ["x", "y"]


def test_empty_list_and_unbound_field():
    with pytest.raises(PromptError, match="empty"):
        assemble_prompt(PromptBundle("molecule-generation", {"proteins": []}, {"text_guidance": "x"}))
    with pytest.raises(PromptError, match="unbound"):
        assemble_prompt(PromptBundle("molecule-generation", {"proteins": ["A"]}, {}))
    with pytest.raises(PromptError, match="unknown template"):
        PromptBundle("haiku")


@pytest.fixture(scope="module")
def bridge(biomed_kg, biomed_cache):
    raw = {m: biomed_cache.raw_dim(m) for m in biomed_kg.modality_vocab}
    return BridgeModel(BridgeConfig(d=8, layers=1, heads=2, seed=2), biomed_kg.modality_vocab, biomed_kg.relation_vocab, raw)


def test_retrieve_for_rag_lists_equal_direct_top_k(bridge, biomed_kg, biomed_cache):
    drug = biomed_kg.nodes_of("drug")[0]
    roles = [
        RetrievalRole("proteins", "protein", "drug_protein", 3),
        RetrievalRole("diseases", "disease", "indication", 2),
    ]
    bundle, results = retrieve_for_rag("molecule-qa", drug, roles, bridge, biomed_cache, biomed_kg,
                                       fields={"input_question": "why?"})
    for role in roles:
        _, raw = biomed_cache.rows([drug])
        q = bridge.transform(bridge.project(raw, "drug"), "drug", role.tail_modality, role.relation).data[0]
        idx = build_index(biomed_kg.nodes_of(role.tail_modality), biomed_cache, bridge)
        want = top_k(idx, np.asarray(q, dtype=np.float64), role.k).ids
        assert bundle.lists[role.role] == want == results[role.role].ids
    assert bundle.fields["smiles"] == biomed_kg.nodes[drug].feature
    text = assemble_prompt(bundle)
    assert "\n   ".join(bundle.lists["proteins"]) in text


def test_retrieve_for_rag_errors(bridge, biomed_kg, biomed_cache):
    with pytest.raises(KeyError):
        retrieve_for_rag("molecule-qa", "ghost", [], bridge, biomed_cache, biomed_kg)
    drug = biomed_kg.nodes_of("drug")[0]
    with pytest.raises(KeyError):
        retrieve_for_rag("molecule-qa", drug, [RetrievalRole("x", "nope", "drug_protein", 1)], bridge, biomed_cache, biomed_kg)

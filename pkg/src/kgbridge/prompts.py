"""Retrieval-augmented prompt assembly. No language model is called here."""
from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import no_record
from .bridge import BridgeModel
from .encoders import EmbeddingCache
from .kg import KnowledgeGraph
from .retrieval import RankedResult, build_index, top_k

MOLECULE_QA = (
    "Drug molecule structure: [START_I_SMILES] {smiles} [END_I_SMILES]\n"
    "\n"
    "Target proteins:\n"
    "   {protein_names}\n"
    "\n"
    "Associated diseases:\n"
    "   {disease_names}\n"
    "\n"
    "Consider the associated diseases and the proteins this molecule targets,  {input_question}\n"
)

MOLECULE_GENERATION = (
    "The drug may be targeting the proteins:\n"
    "\n"
    "    {protein_names}\n"
    "\n"
    "{text_guidance}\n"
    "\n"
    "Generate the most possible SMILES structure of this drug.\n"
)

# Same layout conventions as MOLECULE_QA, for a protein query.
PROTEIN_QA = (
    "Protein sequence: {sequence}\n"
    "\n"
    "Biological processes:\n"
    "   {go_names}\n"
    "\n"
    "Associated diseases:\n"
    "   {disease_names}\n"
    "\n"
    "Consider the associated diseases and the biological processes of this protein,  {input_question}\n"
)

TEMPLATES = {
    "molecule-qa": MOLECULE_QA,
    "molecule-generation": MOLECULE_GENERATION,
    "protein-qa": PROTEIN_QA,
}

# list placeholder -> (role key in the bundle, separator)
_LIST_FIELDS = {
    "molecule-qa": {"protein_names": ("proteins", "\n   "), "disease_names": ("diseases", "\n   ")},
    "molecule-generation": {"protein_names": ("proteins", "\n    ")},
    "protein-qa": {"go_names": ("go_terms", "\n   "), "disease_names": ("diseases", "\n   ")},
}


class PromptError(ValueError):
    pass


def placeholders(template: str) -> list[str]:
    return [name for _, name, _, _ in string.Formatter().parse(template) if name]


@dataclass
class PromptBundle:
    template: str
    lists: dict[str, list[str]] = field(default_factory=dict)
    fields: dict[str, str] = field(default_factory=dict)  # smiles, sequence, input_question, text_guidance

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise PromptError(f"unknown template {self.template!r}; choose from {sorted(TEMPLATES)}")


def assemble_prompt(bundle: PromptBundle) -> str:
    template = TEMPLATES[bundle.template]
    list_fields = _LIST_FIELDS[bundle.template]
    values: dict[str, str] = {}
    for name in placeholders(template):
        if name in list_fields:
            role, sep = list_fields[name]
            items = bundle.lists.get(role)
            if not items:
                raise PromptError(f"{bundle.template}: retrieved list {role!r} is empty or missing")
            values[name] = sep.join(items)
        else:
            value = bundle.fields.get(name)
            if value is None:
                raise PromptError(f"{bundle.template}: placeholder {{{name}}} is unbound")
            values[name] = value
    return template.format(**values)


@dataclass(frozen=True)
class RetrievalRole:
    role: str  # bundle list key, e.g. "proteins"
    tail_modality: str
    relation: str
    k: int


def retrieve_for_rag(
    template: str,
    query_id: str,
    roles: Sequence[RetrievalRole],
    model: BridgeModel,
    cache: EmbeddingCache,
    kg: KnowledgeGraph,
    fields: Mapping[str, str] | None = None,
    label_of: Callable[[str], str] | None = None,
) -> tuple[PromptBundle, dict[str, RankedResult]]:
    """Fill one list per role with the top-k bridged neighbours of the query node.

    The query's own feature string is used for ``smiles``/``sequence`` when
    the template needs it and ``fields`` does not provide it.
    """
    if query_id not in kg.nodes:
        raise KeyError(f"unknown node {query_id!r}")
    head_mod, raw = cache.rows([query_id])
    results: dict[str, RankedResult] = {}
    for role in roles:
        if role.tail_modality not in kg.modality_vocab:
            raise KeyError(f"unknown modality {role.tail_modality!r}")
        with no_record():
            q = model.transform(model.project(raw, head_mod), head_mod, role.tail_modality, role.relation).data[0]
            index = build_index(kg.nodes_of(role.tail_modality), cache, model)
        results[role.role] = top_k(
            index, np.asarray(q, dtype=np.float64), role.k,
            meta={"node": query_id, "relation": role.relation, "tail_modality": role.tail_modality},
        )
    label_of = label_of or (lambda nid: nid)
    lists = {name: [label_of(i) for i in res.ids] for name, res in results.items()}
    values = dict(fields or {})
    feature = kg.nodes[query_id].feature
    needed = placeholders(TEMPLATES.get(template, ""))
    for key in ("smiles", "sequence"):
        if key in needed and key not in values:
            values[key] = feature
    return PromptBundle(template, lists, values), results

"""Planted-graph benchmark: a graph with a known linear bridge, trained end to end."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bridge import BridgeConfig, BridgeModel
from .encoders import EmbeddingCache, EncoderSpec, encode_all
from .evaluation import EvalReport, evaluate_link_prediction, known_from_split, transformed_embeddings
from .kg import KnowledgeGraph, PlantedKgSpec, PlantedRelation, TripleSplit, generate_planted_kg, split_triples
from .metrics import manhattan_similarity_matrix, spearman, upper_triangle
from .trainer import TrainConfig, TrainResult, random_ranking_mrr, train_bridge


@dataclass(frozen=True)
class PlantedPreset:
    graph: PlantedKgSpec
    bridge: BridgeConfig
    train: TrainConfig


PRESETS: dict[str, PlantedPreset] = {
    "small": PlantedPreset(
        graph=PlantedKgSpec(
            modalities=(("alpha", 300), ("beta", 300)),
            latent_dim=8,
            relations=(PlantedRelation("maps to", "alpha", "beta", "orthogonal", map_seed=13),),
            edges_per_head=3,
            noise_scale=0.05,
            seed=13,
        ),
        bridge=BridgeConfig(d=32, layers=6, heads=4, seed=13),
        train=TrainConfig(batch_size=64, epochs=50, lr=1e-3, tau=0.07, M=31, seed=13, validate=False),
    ),
    # a few seconds end to end; used by smoke tests
    "tiny": PlantedPreset(
        graph=PlantedKgSpec(
            modalities=(("alpha", 40), ("beta", 40)),
            latent_dim=4,
            relations=(PlantedRelation("maps to", "alpha", "beta", "orthogonal", map_seed=1),),
            edges_per_head=2,
            noise_scale=0.05,
            seed=1,
        ),
        bridge=BridgeConfig(d=8, layers=2, heads=2, seed=1),
        train=TrainConfig(batch_size=16, epochs=3, lr=1e-3, tau=0.07, M=7, seed=1, validate=False),
    ),
}


@dataclass
class PlantedData:
    kg: KnowledgeGraph
    latents: dict[str, np.ndarray]
    maps: dict[str, np.ndarray]
    split: TripleSplit
    cache: EmbeddingCache


def build_planted(preset: PlantedPreset, split_seed: int | None = None) -> PlantedData:
    kg, latents, maps = generate_planted_kg(preset.graph)
    split = split_triples(kg, seed=preset.graph.seed if split_seed is None else split_seed)
    specs = [EncoderSpec(m, "latent-passthrough", raw_dim=preset.graph.latent_dim) for m, _ in preset.graph.modalities]
    return PlantedData(kg, latents, maps, split, encode_all(kg, specs))


@dataclass
class BenchOutcome:
    variant: str
    result: TrainResult
    report: EvalReport
    final_loss: float
    latent_rho: float
    random_mrr: float
    seconds: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "final_train_loss": self.final_loss,
            "test": self.report.to_dict(),
            "random_mrr": self.random_mrr,
            "latent_spearman": self.latent_rho,
            "seconds": self.seconds,
        }


def latent_similarity_rho(data: PlantedData, model: BridgeModel, relation: str) -> float:
    """Spearman between transformed-space and planted-latent Manhattan similarity of head nodes."""
    t = next(t for t in data.kg.triples if t.relation == relation)
    _, head_mod, tail_mod = data.kg.stratum(t)
    ids = data.kg.nodes_of(head_mod)
    pred = manhattan_similarity_matrix(transformed_embeddings(model, data.cache, ids, tail_mod, relation))
    gold = manhattan_similarity_matrix(np.stack([data.latents[i] for i in ids]))
    return spearman(upper_triangle(pred), upper_triangle(gold))


def run_planted(name_or_preset: str | PlantedPreset, variant: str = "residual-additive", data: PlantedData | None = None) -> BenchOutcome:
    preset = PRESETS[name_or_preset] if isinstance(name_or_preset, str) else name_or_preset
    data = data or build_planted(preset)
    bcfg = replace(preset.bridge, variant=variant)
    t0 = time.perf_counter()
    result = train_bridge(data.kg, data.split, data.cache, preset.train, bcfg)
    model = result.final.model()
    report = evaluate_link_prediction(model, data.split.test, data.kg, data.cache, known=known_from_split(data.kg, data.split))
    n_cand = len(data.kg.nodes_of(preset.graph.relations[0].tail))
    rho = latent_similarity_rho(data, model, preset.graph.relations[0].name)
    return BenchOutcome(
        variant,
        result,
        report,
        result.history[-1]["mean_loss"] if result.history else float("nan"),
        rho,
        random_ranking_mrr(n_cand),
        time.perf_counter() - t0,
    )

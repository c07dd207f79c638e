import sys
from pathlib import Path

import numpy as np
import pytest

from kgbridge.bridge import BridgeConfig, BridgeModel
from kgbridge.encoders import EncoderSpec, encode_all
from kgbridge.kg import load_graph, split_triples

FIXTURES = Path(__file__).parent / "fixtures"
sys.path.insert(0, str(FIXTURES))


@pytest.fixture(scope="session")
def biomed_paths():
    return FIXTURES / "biomed" / "nodes.tsv", FIXTURES / "biomed" / "triples.tsv"


@pytest.fixture(scope="session")
def biomed_kg(biomed_paths):
    return load_graph(*biomed_paths)


@pytest.fixture(scope="session")
def biomed_specs(biomed_kg):
    return [EncoderSpec(m, "hash-ngram", raw_dim=32, ngram_sizes=(2, 3), seed=7) for m in biomed_kg.modality_vocab]


@pytest.fixture(scope="session")
def biomed_cache(biomed_kg, biomed_specs):
    return encode_all(biomed_kg, biomed_specs)


@pytest.fixture(scope="session")
def biomed_split(biomed_kg):
    return split_triples(biomed_kg, seed=3)


def randomize(model: BridgeModel, seed: int = 0, scale: float = 0.3) -> BridgeModel:
    """Move every parameter off its init so no gradient path is structurally zero."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.dtype)
    return model


def small_bridge(d=8, layers=2, heads=2, variant="residual-additive", modalities=("a", "b"),
                 relations=("r0", "r1"), raw_dim=5, seed=0, dtype=np.float64, random_weights=True):
    cfg = BridgeConfig(d=d, layers=layers, heads=heads, variant=variant, seed=seed)
    m = BridgeModel(cfg, modalities, relations, {k: raw_dim for k in modalities}).astype(dtype)
    return randomize(m, seed + 1) if random_weights else m

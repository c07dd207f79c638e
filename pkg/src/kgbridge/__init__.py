"""Bridge frozen unimodal embeddings across the modalities of a knowledge graph."""

from .bridge import BridgeConfig, BridgeModel, bridge_transform, embed_candidates, l2_normalize, project
from .encoders import EmbeddingCache, EncoderSpec, encode, encode_all, load_cache, persist_cache
from .evaluation import EvalReport, evaluate_link_prediction, known_from_split, semantic_similarity_eval
from .kg import (
    DataError,
    KnowledgeGraph,
    Node,
    PlantedKgSpec,
    PlantedRelation,
    Triple,
    generate_planted_kg,
    graph_stats,
    load_graph,
    split_triples,
)
from .kge import KgeModel, KgeTrainConfig, train_kge
from .prompts import PromptBundle, assemble_prompt, retrieve_for_rag
from .retrieval import EmbeddingIndex, RankedResult, build_index, rank_of_target, top_k
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train_bridge

__version__ = "0.1.0"

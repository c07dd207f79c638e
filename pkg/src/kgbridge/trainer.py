"""InfoNCE training of the bridge over knowledge-graph triples."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .autodiff import (
    AdamState,
    NumericalError,
    Tape,
    Tensor,
    adam_step,
    as_tensor,
    backward,
    concat,
    exp,
    getitem,
    logsumexp,
    matmul,
    no_record,
    parameter,
    reshape,
)
from .bridge import BridgeConfig, BridgeModel
from .encoders import EmbeddingCache
from .kg import KnowledgeGraph, Triple, TripleSplit

log = logging.getLogger(__name__)

NEGATIVE_MODES = ("sampled", "in-batch+sampled")
_MASKED = 1e4  # logit offset for excluded in-batch candidates


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 50
    lr: float = 1e-4
    tau: float = 0.07
    M: int = 31
    seed: int = 0
    negative_mode: str = "sampled"
    learnable_tau: bool = False
    variant: str | None = None  # overrides BridgeConfig.variant when set
    validate: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ValueError(f"negative_mode must be one of {NEGATIVE_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# negatives


class NegativeSampler:
    """Filtered same-modality tail corruption with per-query candidate caching."""

    def __init__(self, kg: KnowledgeGraph, known: KnowledgeGraph | None = None):
        self.kg = kg
        self.known = known if known is not None else kg
        self._pools: dict[str, list[str]] = {}
        self._eligible: dict[tuple[str, str, str, int], tuple[list[str], bool]] = {}
        self.warnings: list[dict] = []

    def pool(self, modality: str) -> list[str]:
        if modality not in self._pools:
            self._pools[modality] = self.kg.nodes_of(modality)
        return self._pools[modality]

    def eligible(self, triple: Triple, M: int) -> tuple[list[str], bool]:
        key = (triple.head_id, triple.relation, triple.tail_id, M)
        hit = self._eligible.get(key)
        if hit is None:
            pool = self.pool(self.kg.nodes[triple.tail_id].modality)
            positives = self.known.adjacency.get((triple.head_id, triple.relation), frozenset())
            cands = [n for n in pool if n != triple.tail_id and n not in positives]
            relaxed = False
            if len(cands) < M:
                relaxed = True
                cands = [n for n in pool if n != triple.tail_id]
            if len(cands) < M:
                raise ValueError(
                    f"only {len(cands)} candidate negatives of modality "
                    f"{self.kg.nodes[triple.tail_id].modality!r} for M={M}"
                )
            hit = (cands, relaxed)
            self._eligible[key] = hit
        return hit

    def sample(self, triple: Triple, M: int, rng: np.random.Generator) -> list[str]:
        cands, relaxed = self.eligible(triple, M)
        if relaxed:
            self.warnings.append({"triple": [triple.head_id, triple.relation, triple.tail_id], "message": "filter relaxed"})
            log.warning("not enough filtered negatives for %s; excluding only the true tail", triple)
        picks = rng.choice(len(cands), size=M, replace=False)
        return [cands[i] for i in picks]


def sample_negatives(triple: Triple, kg: KnowledgeGraph, M: int, rng: np.random.Generator) -> list[str]:
    """M distinct same-modality tails, excluding the true tail and known positives."""
    return NegativeSampler(kg).sample(triple, M, rng)


# ---------------------------------------------------------------------------
# loss


def _check_unit(x: np.ndarray, what: str, tol: float = 1e-4) -> None:
    n = np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        raise ValueError(f"{what} is not unit-norm (max deviation {np.abs(n - 1).max():.2e})")


def info_nce_batch(h_hat, candidates, tau, extra_logits: Tensor | None = None) -> Tensor:
    """Mean InfoNCE; ``candidates`` is (B, K, d) with the positive at index 0.

    ``tau`` may be a float or a scalar Tensor (learnable temperature).
    """
    h_hat = as_tensor(h_hat)
    candidates = as_tensor(candidates, dtype=h_hat.dtype)
    b, d = h_hat.shape
    logits = reshape(matmul(candidates, reshape(h_hat, (b, d, 1))), (b, candidates.shape[1]))
    logits = logits / tau
    full = logits if extra_logits is None else concat([logits, extra_logits / tau], axis=1)
    return (logsumexp(full, axis=-1) - logits[:, 0]).mean()


def info_nce(h_hat, z_pos, z_negs, tau: float) -> Tensor:
    """-log softmax weight of the positive among {positive} + negatives."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    hv = h_hat.data if isinstance(h_hat, Tensor) else np.asarray(h_hat)
    _check_unit(hv, "h_hat")
    _check_unit(z_pos.data if isinstance(z_pos, Tensor) else np.asarray(z_pos), "z_pos")
    negs = z_negs.data if isinstance(z_negs, Tensor) else np.asarray(z_negs)
    _check_unit(negs, "z_negs")
    h = as_tensor(h_hat)
    if isinstance(z_pos, Tensor) or isinstance(z_negs, Tensor):
        cands = concat([reshape(as_tensor(z_pos, h.dtype), (1, -1)), as_tensor(z_negs, h.dtype)], axis=0)
    else:
        cands = as_tensor(np.vstack([np.asarray(z_pos)[None, :], negs]), dtype=h.dtype)
    return info_nce_batch(reshape(h, (1, -1)), reshape(cands, (1, *cands.shape)), tau)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    bridge_config: BridgeConfig
    train_config: TrainConfig
    modality_vocab: list[str]
    relation_vocab: list[str]
    raw_dims: dict[str, int]
    params: dict[str, np.ndarray]
    fingerprint: str
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    extras: dict[str, np.ndarray] = field(default_factory=dict)  # e.g. learnable temperature
    content_hash: str | None = None

    @classmethod
    def from_model(cls, model: BridgeModel, train_config: TrainConfig, fingerprint: str, epoch: int, history, extras=None):
        return cls(
            model.config,
            train_config,
            list(model.modality_vocab),
            list(model.relation_vocab),
            dict(model.raw_dims),
            model.state_dict(),
            fingerprint,
            epoch,
            [dict(h) for h in history],
            {k: v.copy() for k, v in (extras or {}).items()},
        )

    def model(self) -> BridgeModel:
        m = BridgeModel(self.bridge_config, self.modality_vocab, self.relation_vocab, self.raw_dims)
        m.load_state_dict(self.params)
        return m

    def header(self) -> dict:
        return {
            "kind": "bridge",
            "bridge_config": self.bridge_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "modality_vocab": self.modality_vocab,
            "relation_vocab": self.relation_vocab,
            "raw_dims": self.raw_dims,
            "fingerprint": self.fingerprint,
            "epoch": self.epoch,
            "history": self.history,
            "extras": sorted(self.extras),
        }

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update({f"extra.{k}": v for k, v in self.extras.items()})
        return out

    def check_fingerprint(self, cache: EmbeddingCache, strict: bool = True) -> bool:
        ok = cache.fingerprint.hex() == self.fingerprint
        if not ok:
            msg = "checkpoint was trained against a different embedding cache (fingerprint mismatch)"
            if strict:
                raise ckpt_io.CheckpointError(msg)
            log.warning(msg)
        return ok


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> str:
    ckpt.content_hash = ckpt_io.write(path, ckpt.header(), ckpt.tensors())
    return ckpt.content_hash


def checkpoint_from_blob(header: dict, tensors: dict[str, np.ndarray], digest: str) -> Checkpoint:
    if header.get("kind") != "bridge":
        raise ckpt_io.CheckpointError(f"expected a bridge checkpoint, found kind={header.get('kind')!r}")
    extras = {k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")}
    params = {k: v for k, v in tensors.items() if not k.startswith("extra.")}
    return Checkpoint(
        BridgeConfig(**header["bridge_config"]),
        TrainConfig(**header["train_config"]),
        header["modality_vocab"],
        header["relation_vocab"],
        {k: int(v) for k, v in header["raw_dims"].items()},
        params,
        header["fingerprint"],
        header["epoch"],
        header["history"],
        extras,
        digest,
    )


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return checkpoint_from_blob(*ckpt_io.read(path))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    history: list[dict]
    warnings: list[dict] = field(default_factory=list)


def _project_grouped(model: BridgeModel, cache: EmbeddingCache, node_ids: Sequence[str], normalize: bool) -> Tensor:
    """Project nodes of possibly mixed modalities, preserving input order."""
    locs = [cache.locate(n) for n in node_ids]
    groups: dict[str, list[int]] = {}
    for pos, (m, _) in enumerate(locs):
        groups.setdefault(m, []).append(pos)
    parts, order = [], []
    for m, positions in groups.items():
        raw = cache.matrices[m][[locs[p][1] for p in positions]]
        parts.append(model.encode_candidates(raw, m) if normalize else model.project(raw, m))
        order.extend(positions)
    if len(parts) == 1:
        return parts[0]
    inv = np.empty(len(order), dtype=np.int64)
    inv[np.array(order)] = np.arange(len(order))
    return getitem(concat(parts, axis=0), inv)


def batch_loss(
    model: BridgeModel,
    cache: EmbeddingCache,
    triples: Sequence[Triple],
    negatives: Sequence[Sequence[str]],
    kg: KnowledgeGraph,
    tau,
    in_batch: bool = False,
    known: KnowledgeGraph | None = None,
) -> Tensor:
    heads = [t.head_id for t in triples]
    z = _project_grouped(model, cache, heads, normalize=False)
    h_hat = model.transform(
        z,
        [kg.nodes[t.head_id].modality for t in triples],
        [kg.nodes[t.tail_id].modality for t in triples],
        [t.relation for t in triples],
    )
    b = len(triples)
    k = 1 + len(negatives[0])
    cand_ids = [nid for t, negs in zip(triples, negatives) for nid in (t.tail_id, *negs)]
    cands = reshape(_project_grouped(model, cache, cand_ids, normalize=True), (b, k, model.config.d))
    extra = None
    if in_batch and b > 1:
        known = known or kg
        pos = cands[:, 0, :]
        sims = matmul(h_hat, pos.transpose(1, 0))
        mask = np.zeros((b, b), dtype=sims.dtype)
        tail_mod = [kg.nodes[t.tail_id].modality for t in triples]
        for i, ti in enumerate(triples):
            positives = known.adjacency.get((ti.head_id, ti.relation), frozenset())
            for j, tj in enumerate(triples):
                if tail_mod[i] != tail_mod[j] or tj.tail_id == ti.tail_id or tj.tail_id in positives:
                    mask[i, j] = _MASKED
        extra = sims - mask
    return info_nce_batch(h_hat, cands, tau, extra)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, 0xB41D])


def train_bridge(
    kg: KnowledgeGraph,
    split: TripleSplit,
    cache: EmbeddingCache,
    config: TrainConfig,
    bridge_config: BridgeConfig | None = None,
    log_path: str | os.PathLike | None = None,
    model: BridgeModel | None = None,
) -> TrainResult:
    """Adam on mean batch InfoNCE; only projection heads, tables and psi move."""
    from .evaluation import evaluate_link_prediction, known_from_split

    if not split.train:
        raise ValueError("empty train split")
    bridge_config = bridge_config or BridgeConfig()
    if config.variant is not None:
        bridge_config = replace(bridge_config, variant=config.variant)
    for t in split.train:
        for nid in (t.head_id, t.tail_id):
            if nid not in cache:
                raise KeyError(f"cache has no embedding for training node {nid!r}")
    if model is None:
        raw_dims = {m: cache.raw_dim(m) for m in kg.modality_vocab if m in cache.matrices}
        model = BridgeModel(bridge_config, kg.modality_vocab, kg.relation_vocab, raw_dims)
    params = model.parameters()
    extras: dict[str, Tensor] = {}
    tau = config.tau
    if config.learnable_tau:
        extras["log_tau"] = parameter(np.array(np.log(config.tau)), name="loss.log_tau")
        params = params + [extras["log_tau"]]
    opt = AdamState(lr=config.lr)
    train_kg = kg.with_triples(split.train)
    sampler = NegativeSampler(kg, known=train_kg)
    fp = cache.fingerprint.hex()
    history: list[dict] = []
    valid_known = known_from_split(kg, split) if config.validate and split.valid else None

    def snapshot(epoch):
        return Checkpoint.from_model(model, config, fp, epoch, history, {k: v.data for k, v in extras.items()})

    best = snapshot(0)
    best_mrr = -math.inf
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        triples = list(split.train)
        for epoch in range(1, config.epochs + 1):
            rng = _epoch_rng(config.seed, epoch)
            order = rng.permutation(len(triples))
            losses, sizes = [], []
            for bi, start in enumerate(range(0, len(order), config.batch_size)):
                batch = [triples[i] for i in order[start : start + config.batch_size]]
                negs = [sampler.sample(t, config.M, rng) for t in batch]
                try:
                    with Tape() as tape:
                        cur_tau = exp(extras["log_tau"]) if config.learnable_tau else tau
                        loss = batch_loss(
                            model, cache, batch, negs, kg, cur_tau,
                            in_batch=config.negative_mode == "in-batch+sampled", known=train_kg,
                        )
                    grads = backward(tape, loss, params)
                except NumericalError as exc:
                    raise NumericalError(f"epoch {epoch}, batch {bi}: {exc}") from exc
                adam_step(opt, params, [grads[id(p)] for p in params])
                losses.append(float(loss.data))
                sizes.append(len(batch))
            record = {"epoch": epoch, "mean_loss": float(np.average(losses, weights=sizes))}
            if config.validate and split.valid:
                with no_record():
                    report = evaluate_link_prediction(model, split.valid, kg, cache, known=valid_known)
                record["valid_mrr"] = report.overall["mrr"]
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.4f%s", epoch, record["mean_loss"],
                     f" valid_mrr {record['valid_mrr']:.4f}" if "valid_mrr" in record else "")
            score = record.get("valid_mrr", -record["mean_loss"])
            if score > best_mrr:
                best_mrr = score
                best = snapshot(epoch)
    finally:
        if log_fh:
            log_fh.close()
    final = snapshot(config.epochs)
    if config.epochs == 0:
        best = final
    return TrainResult(final, best, history, sampler.warnings)


def random_ranking_mrr(n_candidates: int) -> float:
    """Expected MRR when the target's rank is uniform over 1..N."""
    return sum(1.0 / k for k in range(1, n_candidates + 1)) / n_candidates


def info_nce_uniform(M: int) -> float:
    return math.log(M + 1)

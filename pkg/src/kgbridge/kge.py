"""Classical knowledge-graph embedding baselines for tail-entity ranking.

All scores follow "higher is more plausible". Complex-valued families
(ComplEx, RotatE) store real and imaginary parts as the two halves of each
entity row.
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .autodiff import (
    AdamState,
    NumericalError,
    Tape,
    Tensor,
    adam_step,
    backward,
    cos,
    l2_normalize,
    matmul,
    no_record,
    norm,
    parameter,
    relu,
    reshape,
    sin,
    softplus,
    stack,
    take_rows,
)
from .kg import KnowledgeGraph, Triple, TripleSplit, UnknownLabelError

log = logging.getLogger(__name__)

FAMILIES = ("TransE", "TransH", "TransR", "TransD", "DistMult", "ComplEx", "RotatE")
TRANSLATIONAL = ("TransE", "TransH", "TransR", "TransD")
LOSS_KINDS = ("margin", "logistic", "self-adversarial")
DEFAULT_LOSS = {
    "TransE": "margin",
    "TransH": "margin",
    "TransR": "margin",
    "TransD": "margin",
    "DistMult": "logistic",
    "ComplEx": "logistic",
    "RotatE": "self-adversarial",
}


def canonical_family(name: str) -> str:
    for f in FAMILIES:
        if f.lower() == name.lower():
            return f
    raise ValueError(f"unknown KGE family {name!r}; choose from {FAMILIES}")


@dataclass(frozen=True)
class KgeTrainConfig:
    family: str = "TransE"
    d_e: int = 64
    d_r: int = 64
    lr: float = 0.01
    epochs: int = 100
    negatives: int = 8
    loss_kind: str | None = None  # None -> family default
    margin: float = 4.0
    adv_temperature: float = 1.0
    batch_size: int = 1024
    same_modality: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", canonical_family(self.family))
        if self.d_e < 1 or self.d_r < 1:
            raise ValueError("dimensions must be positive")
        if self.family in ("ComplEx", "RotatE") and self.d_e % 2:
            raise ValueError(f"{self.family} needs an even d_e")
        if self.family in ("TransE", "TransH", "TransD", "DistMult", "ComplEx") and self.d_r != self.d_e:
            raise ValueError(f"{self.family} needs d_r == d_e")
        if self.loss_kind is not None and self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.resolved_loss == "margin" and self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.negatives < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("negatives, batch_size must be >= 1 and epochs >= 0")

    @property
    def resolved_loss(self) -> str:
        return self.loss_kind or DEFAULT_LOSS[self.family]

    def to_dict(self) -> dict:
        return asdict(self)


def wrap_phase(theta: np.ndarray) -> np.ndarray:
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - theta, 2 * np.pi)


class KgeModel:
    def __init__(self, config: KgeTrainConfig, entity_ids: Sequence[str], relation_ids: Sequence[str]):
        self.config = config
        self.family = config.family
        self.margin = config.margin
        self.entity_ids = list(entity_ids)
        self.relation_ids = list(relation_ids)
        self._ent = {e: i for i, e in enumerate(self.entity_ids)}
        self._rel = {r: i for i, r in enumerate(self.relation_ids)}
        self.params: dict[str, Tensor] = {}
        self._init(np.random.default_rng(config.seed))
        for name, p in self.params.items():
            p.name = name

    def _init(self, rng: np.random.Generator) -> None:
        n, r = len(self.entity_ids), len(self.relation_ids)
        de, dr = self.config.d_e, self.config.d_r
        f = self.family
        p = self.params
        if f in TRANSLATIONAL:
            bound = 6.0 / np.sqrt(de)
            ent = rng.uniform(-bound, bound, (n, de))
            p["entity"] = parameter(ent / np.maximum(np.linalg.norm(ent, axis=1, keepdims=True), 1.0))
            rel = rng.uniform(-6.0 / np.sqrt(dr), 6.0 / np.sqrt(dr), (r, dr))
            p["relation"] = parameter(rel / np.linalg.norm(rel, axis=1, keepdims=True))
            if f == "TransH":
                p["normal"] = parameter(rng.normal(0, 1, (r, de)))
            elif f == "TransR":
                p["rel_matrix"] = parameter(np.tile(np.eye(dr, de), (r, 1, 1)) + rng.normal(0, 0.01, (r, dr, de)))
            elif f == "TransD":
                p["entity_proj"] = parameter(rng.normal(0, 0.1, (n, de)))
                p["relation_proj"] = parameter(rng.normal(0, 0.1, (r, dr)))
        elif f in ("DistMult", "ComplEx"):
            p["entity"] = parameter(rng.normal(0, 1.0 / np.sqrt(de), (n, de)))
            p["relation"] = parameter(rng.normal(0, 1.0 / np.sqrt(dr), (r, dr)))
        elif f == "RotatE":
            p["entity"] = parameter(rng.uniform(-1, 1, (n, de)) / np.sqrt(de // 2))
            p["phase"] = parameter(rng.uniform(-np.pi, np.pi, (r, de // 2)))

    # -- ids ------------------------------------------------------------------
    def entity_index(self, ids) -> np.ndarray:
        try:
            return np.array([self._ent[e] for e in np.atleast_1d(ids)], dtype=np.int64)
        except KeyError as exc:
            raise UnknownLabelError(f"unknown entity {exc.args[0]!r}") from None

    def relation_index(self, ids) -> np.ndarray:
        try:
            return np.array([self._rel[r] for r in np.atleast_1d(ids)], dtype=np.int64)
        except KeyError as exc:
            raise UnknownLabelError(f"unknown relation {exc.args[0]!r}") from None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state) -> None:
        if set(state) != set(self.params):
            raise ValueError("state dict does not match model parameters")
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    # -- scoring --------------------------------------------------------------
    def score_idx(self, h: np.ndarray, r: np.ndarray, t: np.ndarray) -> Tensor:
        """Scores for index arrays that broadcast against each other."""
        p = self.params
        f = self.family
        if f in TRANSLATIONAL:
            eh, et = take_rows(p["entity"], h), take_rows(p["entity"], t)
            wr = take_rows(p["relation"], r)
            if f == "TransH":
                nr = l2_normalize(take_rows(p["normal"], r))
                eh = eh - (eh * nr).sum(axis=-1, keepdims=True) * nr
                et = et - (et * nr).sum(axis=-1, keepdims=True) * nr
            elif f == "TransR":
                mt = take_rows(p["rel_matrix"], r).transpose(0, 2, 1)  # (n, d_e, d_r)
                eh = reshape(matmul(reshape(eh, (eh.shape[0], 1, -1)), mt), (-1, self.config.d_r))
                et = reshape(matmul(reshape(et, (et.shape[0], 1, -1)), mt), (-1, self.config.d_r))
            elif f == "TransD":
                rp = take_rows(p["relation_proj"], r)
                hp, tp = take_rows(p["entity_proj"], h), take_rows(p["entity_proj"], t)
                eh = eh + (hp * eh).sum(axis=-1, keepdims=True) * rp
                et = et + (tp * et).sum(axis=-1, keepdims=True) * rp
            return -norm(eh + wr - et, axis=-1)
        if f == "DistMult":
            eh, et = take_rows(p["entity"], h), take_rows(p["entity"], t)
            # (h * t) is commutative bit-for-bit, so the score is exactly symmetric
            return (take_rows(p["relation"], r) * (eh * et)).sum(axis=-1)
        k = self.config.d_e // 2
        eh, et = take_rows(p["entity"], h), take_rows(p["entity"], t)
        hr, hi = eh[:, :k], eh[:, k:]
        tr, ti = et[:, :k], et[:, k:]
        if f == "ComplEx":
            w = take_rows(p["relation"], r)
            rr, ri = w[:, :k], w[:, k:]
            return (hr * rr * tr + hi * rr * ti + hr * ri * ti - hi * ri * tr).sum(axis=-1)
        theta = take_rows(p["phase"], r)
        c, s = cos(theta), sin(theta)
        dr = hr * c - hi * s - tr
        di = hr * s + hi * c - ti
        return -norm(stack([dr, di], axis=-1), axis=-1).sum(axis=-1)

    def score_tails(self, head: str, relation: str, candidates: Sequence[str]) -> np.ndarray:
        with no_record():
            h = self.entity_index(head)
            r = self.relation_index(relation)
            t = self.entity_index(list(candidates))
            return self.score_idx(np.repeat(h, len(t)), np.repeat(r, len(t)), t).data.astype(np.float64)

    def score_matrix(self, heads: Sequence[str], relation: str, candidates: Sequence[str]) -> np.ndarray:
        """(len(heads), len(candidates)) score matrix for one relation."""
        return np.stack([self.score_tails(h, relation, candidates) for h in heads]) if heads else np.zeros((0, len(candidates)))

    # -- constraints ----------------------------------------------------------
    def apply_constraints(self) -> None:
        if self.family in TRANSLATIONAL:
            e = self.params["entity"].data
            n = np.linalg.norm(e, axis=1, keepdims=True)
            self.params["entity"].data = np.where(n > 1.0, e / n, e).astype(e.dtype)
        elif self.family == "RotatE":
            ph = self.params["phase"]
            ph.data = wrap_phase(ph.data).astype(ph.dtype)

    def relation_moduli(self) -> np.ndarray:
        """|w_r| per complex coordinate (RotatE only): cos^2 + sin^2 of the phases."""
        th = self.params["phase"].data.astype(np.float64)
        return np.sqrt(np.cos(th) ** 2 + np.sin(th) ** 2)


def kge_score(model: KgeModel, h: str, r: str, t: str) -> float:
    with no_record():
        return float(model.score_idx(model.entity_index(h), model.relation_index(r), model.entity_index(t)).data[0])


def kge_rank_tails(
    model: KgeModel, h: str, r: str, candidates: Sequence[str], filter: Iterable[str] = ()
) -> list[tuple[str, float]]:
    """Candidates sorted by score (desc), filtered ids removed, ties by ascending id."""
    drop = set(filter)
    cands = [c for c in candidates if c not in drop]
    if not cands:
        return []
    scores = model.score_tails(h, r, cands)
    order = sorted(range(len(cands)), key=lambda i: (-scores[i], cands[i]))
    return [(cands[i], float(scores[i])) for i in order]


# ---------------------------------------------------------------------------
# training


def _loss(model: KgeModel, pos: Tensor, neg: Tensor, cfg: KgeTrainConfig) -> Tensor:
    kind = cfg.resolved_loss
    b, n = neg.shape
    if kind == "margin":
        return relu(cfg.margin - reshape(pos, (b, 1)) + neg).mean()
    if kind == "logistic":
        return softplus(-pos).mean() + softplus(neg).mean()
    # self-adversarial: negative weights are treated as constants
    logits = cfg.adv_temperature * neg.data.astype(np.float64)
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    w = (w / w.sum(axis=1, keepdims=True)).astype(neg.dtype)
    return (softplus(-(pos + cfg.margin)) + (softplus(neg + cfg.margin) * w).sum(axis=1)).mean()


def train_kge(
    kg: KnowledgeGraph,
    split: TripleSplit,
    config: KgeTrainConfig,
    on_epoch: Callable[[int, KgeModel], None] | None = None,
) -> KgeModel:
    """Negative-sampling training; ``on_epoch(epoch, model)`` runs after each epoch."""
    if not split.train:
        raise ValueError("empty train split")
    entities = sorted(kg.nodes)
    model = KgeModel(config, entities, kg.relation_vocab)
    known = kg.with_triples(split.train)
    rng = np.random.default_rng([config.seed, 0x6E6])
    params = model.parameters()
    opt = AdamState(lr=config.lr)
    eligible: dict[Triple, np.ndarray] = {}
    all_idx = np.arange(len(entities))

    def pool_for(t: Triple) -> np.ndarray:
        if t not in eligible:
            base = kg.nodes_of(kg.nodes[t.tail_id].modality) if config.same_modality else entities
            positives = known.adjacency.get((t.head_id, t.relation), frozenset())
            keep = [e for e in base if e != t.tail_id and e not in positives]
            if not keep:
                keep = [e for e in base if e != t.tail_id]
            eligible[t] = model.entity_index(keep) if keep else all_idx
        return eligible[t]

    triples = list(split.train)
    h_all = model.entity_index([t.head_id for t in triples])
    r_all = model.relation_index([t.relation for t in triples])
    t_all = model.entity_index([t.tail_id for t in triples])
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(triples))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            negs = np.stack([rng.choice(pool_for(triples[i]), size=config.negatives) for i in idx])
            b = len(idx)
            try:
                with Tape() as tape:
                    pos = model.score_idx(h_all[idx], r_all[idx], t_all[idx])
                    neg = model.score_idx(
                        np.repeat(h_all[idx], config.negatives),
                        np.repeat(r_all[idx], config.negatives),
                        negs.reshape(-1),
                    )
                    loss = _loss(model, pos, reshape(neg, (b, config.negatives)), config)
                grads = backward(tape, loss, params)
            except NumericalError as exc:
                raise NumericalError(f"{config.family} epoch {epoch}: {exc}") from exc
            adam_step(opt, params, [grads[id(p)] for p in params])
            model.apply_constraints()
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model


# ---------------------------------------------------------------------------
# persistence


def save_kge(model: KgeModel, path: str | os.PathLike) -> str:
    header = {
        "kind": "kge",
        "family": model.family,
        "config": model.config.to_dict(),
        "entity_ids": model.entity_ids,
        "relation_ids": model.relation_ids,
    }
    return ckpt_io.write(path, header, model.state_dict())


def kge_from_blob(header: dict, tensors: dict, digest: str | None = None) -> KgeModel:
    if header.get("kind") != "kge":
        raise ckpt_io.CheckpointError(f"expected a KGE checkpoint, found kind={header.get('kind')!r}")
    model = KgeModel(KgeTrainConfig(**header["config"]), header["entity_ids"], header["relation_ids"])
    model.load_state_dict(tensors)
    return model


def load_kge(path: str | os.PathLike) -> KgeModel:
    header, tensors, digest = ckpt_io.read(path)
    return kge_from_blob(header, tensors, digest)

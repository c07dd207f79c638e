"""Relation-conditioned bridge between frozen encoder spaces.

Pipeline for a head node of modality ``c_h`` heading to modality ``c_t``
through relation ``r``::

    z      = p_{c_h}(h)                          projection head
    Z      = [z, E_mod[c_h], E_mod[c_t], E_rel[r]] + slot_bias     (4 x d)
    psi    = transformer(Z)[0]
    h_hat  = normalize(combine(z, psi))

where ``combine`` is ``z + psi`` (residual-additive, the default),
``psi`` (no-residual) or ``z * psi`` (rotate-multiplicative).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import (
    BlockWeights,
    Tensor,
    as_tensor,
    gelu,
    l2_normalize as _l2_normalize_t,
    matmul,
    parameter,
    stack,
    take_rows,
    transformer_encoder_forward,
    xavier_uniform,
)
from .autodiff.tensor import DegenerateVectorError
from .encoders import EmbeddingCache, RawEmbedding
from .kg import UnknownLabelError

VARIANTS = ("residual-additive", "no-residual", "rotate-multiplicative")
PROJECTION_KINDS = ("linear", "two-layer")


@dataclass(frozen=True)
class BridgeConfig:
    d: int = 128
    layers: int = 6
    heads: int = 4
    variant: str = "residual-additive"
    projection_kind: str = "linear"
    ff_mult: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ValueError("d must be an even integer >= 2")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.projection_kind not in PROJECTION_KINDS:
            raise ValueError(f"unknown projection kind {self.projection_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProjectionHead:
    modality: str
    w: Tensor
    b: Tensor
    w2: Tensor | None = None
    b2: Tensor | None = None

    def __call__(self, h) -> Tensor:
        out = matmul(as_tensor(h, dtype=self.w.dtype), self.w) + self.b
        if self.w2 is not None:
            out = matmul(gelu(out), self.w2) + self.b2
        return out

    def named_parameters(self):
        prefix = f"proj.{self.modality}."
        yield prefix + "w", self.w
        yield prefix + "b", self.b
        if self.w2 is not None:
            yield prefix + "w2", self.w2
            yield prefix + "b2", self.b2


def l2_normalize(v, eps: float = 1e-12) -> np.ndarray:
    """Unit-length copy of ``v`` (last axis). Near-zero vectors are an error."""
    v = np.asarray(v)
    n = np.linalg.norm(v.astype(np.float64), axis=-1, keepdims=True)
    if np.any(n <= eps):
        raise DegenerateVectorError("cannot normalize a near-zero vector")
    return (v / n).astype(v.dtype if v.dtype.kind == "f" else np.float64)


class BridgeModel:
    def __init__(
        self,
        config: BridgeConfig,
        modality_vocab: Sequence[str],
        relation_vocab: Sequence[str],
        raw_dims: Mapping[str, int],
    ):
        self.config = config
        self.modality_vocab = tuple(modality_vocab)
        self.relation_vocab = tuple(relation_vocab)
        self.raw_dims = {m: int(raw_dims[m]) for m in self.modality_vocab if m in raw_dims}
        self._mod_idx = {m: i for i, m in enumerate(self.modality_vocab)}
        self._rel_idx = {r: i for i, r in enumerate(self.relation_vocab)}

        d = config.d
        rng = np.random.default_rng(config.seed)
        self.heads: dict[str, ProjectionHead] = {}
        for m, raw in self.raw_dims.items():
            if config.projection_kind == "linear":
                self.heads[m] = ProjectionHead(m, parameter(xavier_uniform(rng, raw, d)), parameter(np.zeros(d)))
            else:
                self.heads[m] = ProjectionHead(
                    m,
                    parameter(xavier_uniform(rng, raw, d)),
                    parameter(np.zeros(d)),
                    parameter(xavier_uniform(rng, d, d)),
                    parameter(np.zeros(d)),
                )
        scale = 1.0 / np.sqrt(d)
        self.modality_table = parameter(rng.normal(0, scale, (len(self.modality_vocab), d)))
        self.relation_table = parameter(rng.normal(0, scale, (len(self.relation_vocab), d)))
        self.slot_bias = parameter(np.zeros((4, d)))
        self.blocks = [BlockWeights.init(d, rng, config.ff_mult) for _ in range(config.layers)]
        self._name_params()

    # -- parameters -------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for m in self.raw_dims:
            out.extend(self.heads[m].named_parameters())
        out.append(("tables.modality", self.modality_table))
        out.append(("tables.relation", self.relation_table))
        out.append(("psi.slot_bias", self.slot_bias))
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named_parameters(f"psi.layers.{i}."))
        return out

    def _name_params(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype) -> "BridgeModel":
        """Copy of the model with all parameters cast (float64 for gradient checks)."""
        clone = BridgeModel(self.config, self.modality_vocab, self.relation_vocab, self.raw_dims)
        for (_, src), (_, dst) in zip(self.named_parameters(), clone.named_parameters()):
            dst.data = src.data.astype(dtype).copy()
        return clone

    # -- label lookup -----------------------------------------------------
    def modality_index(self, labels) -> np.ndarray:
        try:
            return np.array([self._mod_idx[m] for m in np.atleast_1d(labels)], dtype=np.int64)
        except KeyError as exc:
            raise UnknownLabelError(f"unknown modality {exc.args[0]!r}") from None

    def relation_index(self, labels) -> np.ndarray:
        try:
            return np.array([self._rel_idx[r] for r in np.atleast_1d(labels)], dtype=np.int64)
        except KeyError as exc:
            raise UnknownLabelError(f"unknown relation {exc.args[0]!r}") from None

    # -- forward ----------------------------------------------------------
    def project(self, raw, modality: str) -> Tensor:
        if modality not in self.heads:
            raise UnknownLabelError(f"no projection head for modality {modality!r}")
        raw = as_tensor(raw, dtype=self.modality_table.dtype)
        if raw.shape[-1] != self.raw_dims[modality]:
            raise ValueError(f"{modality}: raw dim {raw.shape[-1]} != {self.raw_dims[modality]}")
        return self.heads[modality](raw)

    def psi(self, z: Tensor, head_idx, tail_idx, rel_idx) -> Tensor:
        """Transformer readout at slot 0; z is (n, d), index arrays are (n,)."""
        rows = stack(
            [
                z,
                take_rows(self.modality_table, head_idx),
                take_rows(self.modality_table, tail_idx),
                take_rows(self.relation_table, rel_idx),
            ],
            axis=1,
        )
        rows = rows + self.slot_bias
        out = transformer_encoder_forward(rows, self.blocks, self.config.heads)
        return out[:, 0, :]

    def combine(self, z: Tensor, psi_out: Tensor) -> Tensor:
        variant = self.config.variant
        if variant == "residual-additive":
            return z + psi_out
        if variant == "no-residual":
            return psi_out
        return z * psi_out

    def transform(self, z, head_modality, tail_modality, relation) -> Tensor:
        """Bridged, unit-norm embeddings for projected heads ``z`` (n, d).

        Labels may be single strings (broadcast) or sequences of length n.
        """
        z = as_tensor(z, dtype=self.modality_table.dtype)
        n = z.shape[0]

        def expand(idx):
            return np.broadcast_to(idx, (n,)) if idx.size == 1 else idx

        h = expand(self.modality_index(head_modality))
        t = expand(self.modality_index(tail_modality))
        r = expand(self.relation_index(relation))
        return _l2_normalize_t(self.combine(z, self.psi(z, h, t, r)))

    def encode_candidates(self, raw, modality: str) -> Tensor:
        return _l2_normalize_t(self.project(raw, modality))


# ---------------------------------------------------------------------------
# single-item API


def project(h: RawEmbedding, model: BridgeModel) -> np.ndarray:
    if h.modality not in model.heads:
        raise UnknownLabelError(f"no projection head for modality {h.modality!r}")
    return model.project(h.vector[None, :], h.modality).data[0]


@dataclass
class BridgedEmbedding:
    vector: np.ndarray
    head_modality: str
    tail_modality: str
    relation: str


def bridge_transform(z, c_head: str, c_tail: str, r: str, model: BridgeModel) -> BridgedEmbedding:
    z = np.asarray(z, dtype=model.modality_table.dtype)
    if z.shape != (model.config.d,):
        raise ValueError(f"z must have length {model.config.d}")
    out = model.transform(z[None, :], c_head, c_tail, r).data[0]
    return BridgedEmbedding(out, c_head, c_tail, r)


def embed_candidates(node_ids: Iterable[str], cache: EmbeddingCache, model: BridgeModel) -> np.ndarray:
    """Unit-norm projected rows H_C for same-modality nodes, in input order."""
    node_ids = list(node_ids)
    if not node_ids:
        raise ValueError("no candidates given")
    modality, raw = cache.rows(node_ids)
    return model.encode_candidates(raw, modality).data

"""Frozen unimodal encoders and the persistent raw-embedding cache.

Three encoder kinds:

* ``hash-ngram``: character n-gram counts hashed into 2**16 buckets,
  l2-normalized, then multiplied by a fixed seeded Gaussian matrix.
* ``latent-passthrough``: the feature is a comma-separated real vector.
* ``external-import``: vectors are read from a TSV of precomputed embeddings
  (``node_id<TAB>v1,v2,...``), e.g. outputs of a real foundation model.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .kg import DataError, KnowledgeGraph, Node

log = logging.getLogger(__name__)

N_BUCKETS = 1 << 16
_BLOCK = 256  # rows of the projection generated per seeded block
KINDS = ("hash-ngram", "latent-passthrough", "external-import")


class EncodingError(DataError):
    pass


class CacheFormatError(DataError):
    pass


class FingerprintMismatch(DataError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    modality: str
    kind: str = "hash-ngram"
    raw_dim: int = 256
    ngram_sizes: tuple[int, ...] = (3,)
    seed: int = 0
    import_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "ngram_sizes", tuple(int(n) for n in self.ngram_sizes))
        if self.kind not in KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.raw_dim < 1:
            raise ValueError("raw_dim must be >= 1")
        if self.kind == "hash-ngram" and (not self.ngram_sizes or min(self.ngram_sizes) < 1):
            raise ValueError("hash-ngram needs positive ngram_sizes")
        if self.kind == "external-import" and not self.import_path:
            raise ValueError("external-import needs import_path")

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ngram_sizes"] = list(self.ngram_sizes)
        return d


@dataclass
class RawEmbedding:
    vector: np.ndarray
    modality: str
    node_id: str


def fingerprint(specs: Iterable[EncoderSpec]) -> bytes:
    canon = sorted((s.to_dict() for s in specs), key=lambda d: d["modality"])
    return hashlib.sha256(json.dumps(canon, sort_keys=True, separators=(",", ":")).encode()).digest()


# ---------------------------------------------------------------------------
# hash n-gram featurizer


def ngram_counts(text: str, sizes: Iterable[int]) -> dict[int, int]:
    """Bucket index -> count over all n-grams of the requested sizes."""
    counts: dict[int, int] = {}
    for n in sizes:
        for i in range(len(text) - n + 1):
            b = zlib.crc32(f"{n}:{text[i:i + n]}".encode("utf-8")) & (N_BUCKETS - 1)
            counts[b] = counts.get(b, 0) + 1
    return counts


@lru_cache(maxsize=4096)
def _projection_block(seed: int, raw_dim: int, block: int) -> np.ndarray:
    rng = np.random.default_rng([seed, raw_dim, block])
    return rng.standard_normal((_BLOCK, raw_dim)) / np.sqrt(raw_dim)


def projection_rows(seed: int, raw_dim: int, buckets: np.ndarray) -> np.ndarray:
    """Rows of the implicit 2**16 x raw_dim Gaussian matrix, built lazily by block."""
    out = np.empty((len(buckets), raw_dim))
    for i, b in enumerate(buckets):
        out[i] = _projection_block(seed, raw_dim, int(b) // _BLOCK)[int(b) % _BLOCK]
    return out


def _hash_ngram(feature: str, spec: EncoderSpec) -> np.ndarray:
    if len(feature) < min(spec.ngram_sizes):
        raise EncodingError(f"feature {feature!r} is shorter than the smallest n-gram ({min(spec.ngram_sizes)})")
    counts = ngram_counts(feature, spec.ngram_sizes)
    buckets = np.array(sorted(counts), dtype=np.int64)
    c = np.array([counts[b] for b in buckets], dtype=np.float64)
    c /= np.linalg.norm(c)
    return (c @ projection_rows(spec.seed, spec.raw_dim, buckets)).astype(np.float32)


def parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.split(",")], dtype=np.float64)
    except ValueError:
        raise EncodingError(f"cannot parse {text[:40]!r} as a comma-separated vector") from None


@lru_cache(maxsize=16)
def _load_import_table(path: str) -> Mapping[str, np.ndarray]:
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            try:
                nid, vec = line.split("\t")
            except ValueError:
                raise EncodingError(f"{path}:{lineno}: expected node_id<TAB>vector") from None
            table[nid] = parse_vector(vec)
    return table


def encode(node: Node, spec: EncoderSpec) -> RawEmbedding:
    if node.modality != spec.modality:
        raise EncodingError(f"node {node.id!r} has modality {node.modality!r}, encoder is for {spec.modality!r}")
    if spec.kind == "hash-ngram":
        vec = _hash_ngram(node.feature, spec)
    else:
        if spec.kind == "latent-passthrough":
            v = parse_vector(node.feature)
        else:
            table = _load_import_table(spec.import_path)
            if node.id not in table:
                raise EncodingError(f"{spec.import_path} has no vector for {node.id!r}")
            v = table[node.id]
        if v.shape != (spec.raw_dim,):
            raise EncodingError(f"node {node.id!r}: vector length {v.size} != raw_dim {spec.raw_dim}")
        vec = v.astype(np.float32)
    if not np.isfinite(vec).all():
        raise EncodingError(f"node {node.id!r}: non-finite embedding")
    return RawEmbedding(vec, node.modality, node.id)


# ---------------------------------------------------------------------------
# cache


@dataclass
class EmbeddingCache:
    matrices: dict[str, np.ndarray]  # modality -> (rows, raw_dim) float32
    ids: dict[str, list[str]]  # modality -> row ids
    fingerprint: bytes
    _index: dict[str, tuple[str, int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {}
        for m, ids in self.ids.items():
            if len(ids) != self.matrices[m].shape[0]:
                raise CacheFormatError(f"modality {m!r}: {len(ids)} ids for {self.matrices[m].shape[0]} rows")
            for i, nid in enumerate(ids):
                self._index[nid] = (m, i)

    @property
    def modalities(self) -> list[str]:
        return list(self.matrices)

    def raw_dim(self, modality: str) -> int:
        return self.matrices[modality].shape[1]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def locate(self, node_id: str) -> tuple[str, int]:
        try:
            return self._index[node_id]
        except KeyError:
            raise KeyError(f"no cached embedding for node {node_id!r}") from None

    def vector(self, node_id: str) -> np.ndarray:
        m, i = self.locate(node_id)
        return self.matrices[m][i]

    def rows(self, node_ids: Iterable[str]) -> tuple[str, np.ndarray]:
        """Stack vectors of same-modality nodes; returns (modality, matrix)."""
        locs = [self.locate(n) for n in node_ids]
        mods = {m for m, _ in locs}
        if len(mods) != 1:
            raise ValueError(f"rows() needs nodes of one modality, got {sorted(mods)}")
        m = mods.pop()
        return m, self.matrices[m][[i for _, i in locs]]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingCache):
            return NotImplemented
        return (
            self.fingerprint == other.fingerprint
            and self.ids == other.ids
            and list(self.matrices) == list(other.matrices)
            and all(np.array_equal(self.matrices[m], other.matrices[m]) for m in self.matrices)
        )


def encode_all(kg: KnowledgeGraph, specs: Iterable[EncoderSpec]) -> EmbeddingCache:
    specs = list(specs)
    by_mod = {s.modality: s for s in specs}
    if len(by_mod) != len(specs):
        raise ValueError("more than one encoder spec for a modality")
    matrices, ids = {}, {}
    for m in kg.modality_vocab:
        node_ids = kg.nodes_of(m)
        if not node_ids:
            continue
        if m not in by_mod:
            raise EncodingError(f"no encoder spec for modality {m!r}")
        spec = by_mod[m]
        mat = np.empty((len(node_ids), spec.raw_dim), dtype=np.float32)
        for i, nid in enumerate(node_ids):
            mat[i] = encode(kg.nodes[nid], spec).vector
        matrices[m] = mat
        ids[m] = node_ids
    return EmbeddingCache(matrices, ids, fingerprint(specs))


MAGIC = b"EMB1"
VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def persist_cache(cache: EmbeddingCache, path: str | os.PathLike) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(cache.matrices))]
    for m, mat in cache.matrices.items():
        parts.append(_pack_str(m))
        parts.append(struct.pack("<IQ", mat.shape[1], mat.shape[0]))
        parts.extend(_pack_str(nid) for nid in cache.ids[m])
        parts.append(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    parts.append(cache.fingerprint)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CacheFormatError("truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def load_cache(
    path: str | os.PathLike,
    expected_specs: Iterable[EncoderSpec] | None = None,
    strict: bool = True,
) -> EmbeddingCache:
    """Read a cache file; optionally verify it was built from ``expected_specs``.

    With ``strict=False`` a fingerprint mismatch is logged instead of raised.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CacheFormatError("bad magic (not an embedding cache)")
    version, n_mod = r.unpack("<II")
    if version != VERSION:
        raise CacheFormatError(f"unsupported cache version {version}")
    matrices, ids = {}, {}
    for _ in range(n_mod):
        m = r.string()
        raw_dim, rows = r.unpack("<IQ")
        ids[m] = [r.string() for _ in range(rows)]
        data = r.take(4 * raw_dim * rows)
        matrices[m] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(rows, raw_dim)
    fp = r.take(32)
    if r.pos != len(r.buf):
        raise CacheFormatError(f"{len(r.buf) - r.pos} trailing byte(s) after fingerprint")
    cache = EmbeddingCache(matrices, ids, fp)
    if expected_specs is not None:
        want = fingerprint(expected_specs)
        if want != fp:
            msg = f"cache fingerprint {fp.hex()[:16]} does not match encoder specs {want.hex()[:16]}"
            if strict:
                raise FingerprintMismatch(msg)
            log.warning(msg)
    return cache

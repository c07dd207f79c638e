import zlib
from collections import Counter

import numpy as np
import pytest

from kgbridge.encoders import (
    CacheFormatError,
    EmbeddingCache,
    EncoderSpec,
    EncodingError,
    FingerprintMismatch,
    encode,
    encode_all,
    fingerprint,
    load_cache,
    persist_cache,
)
from kgbridge.kg import KnowledgeGraph, Node, PlantedKgSpec, PlantedRelation, generate_planted_kg


def dense_oracle(text, sizes, seed, raw_dim):
    """Full 2**16-bucket count vector times the fully materialized Gaussian matrix."""
    counts = Counter()
    for n in sizes:
        grams = [text[i:i + n] for i in range(len(text) - n + 1)]
        for g, c in Counter(grams).items():
            counts[zlib.crc32(f"{n}:{g}".encode()) % 65536] += c
    x = np.zeros(65536)
    for b, c in counts.items():
        x[b] = c
    x /= np.linalg.norm(x)
    blocks = [np.random.default_rng([seed, raw_dim, k]).standard_normal((256, raw_dim)) for k in range(256)]
    return x @ (np.vstack(blocks) / np.sqrt(raw_dim))


def test_hash_ngram_matches_dense_oracle():
    spec = EncoderSpec("protein", "hash-ngram", raw_dim=16, ngram_sizes=(2, 3), seed=9)
    text = "MKVLAAGIVGLLLAAKV"
    got = encode(Node("p", "protein", text), spec).vector
    np.testing.assert_allclose(got, dense_oracle(text, (2, 3), 9, 16), rtol=1e-5, atol=1e-6)
    assert got.dtype == np.float32


def test_one_character_change_changes_vector():
    spec = EncoderSpec("protein", "hash-ngram", raw_dim=64)
    a = encode(Node("a", "protein", "ACDE"), spec).vector.astype(np.float64)
    b = encode(Node("b", "protein", "ACDF"), spec).vector.astype(np.float64)
    assert not np.array_equal(a, b)
    cos = a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    assert cos < 1.0
    ref = dense_oracle("ACDE", (3,), 0, 64), dense_oracle("ACDF", (3,), 0, 64)
    assert cos == pytest.approx(ref[0] @ ref[1] / np.linalg.norm(ref[0]) / np.linalg.norm(ref[1]), abs=1e-5)


def test_encode_is_bit_stable():
    spec = EncoderSpec("drug", "hash-ngram", raw_dim=32, seed=3)
    n = Node("d", "drug", "CC(=O)Oc1ccccc1C(=O)O")
    assert encode(n, spec).vector.tobytes() == encode(n, spec).vector.tobytes()


def test_feature_shorter_than_ngram():
    with pytest.raises(EncodingError):
        encode(Node("x", "m", "ab"), EncoderSpec("m", ngram_sizes=(3,)))


def test_modality_mismatch():
    with pytest.raises(EncodingError):
        encode(Node("x", "protein", "MKV"), EncoderSpec("drug"))


def test_passthrough_identity():
    v = encode(Node("x", "lat", "1.0,0.0,0.0"), EncoderSpec("lat", "latent-passthrough", raw_dim=3)).vector
    np.testing.assert_array_equal(v, [1.0, 0.0, 0.0])


@pytest.mark.parametrize("feature", ["1.0,abc", "1.0,2.0"])
def test_passthrough_errors(feature):
    with pytest.raises(EncodingError):
        encode(Node("x", "lat", feature), EncoderSpec("lat", "latent-passthrough", raw_dim=3))


def test_external_import(tmp_path):
    table = tmp_path / "vecs.tsv"
    table.write_text("# exported\nx\t0.5,0.25\ny\t1,2\n")
    spec = EncoderSpec("m", "external-import", raw_dim=2, import_path=str(table))
    np.testing.assert_array_equal(encode(Node("x", "m", "anything"), spec).vector, [0.5, 0.25])
    with pytest.raises(EncodingError):
        encode(Node("z", "m", "anything"), spec)


def test_spec_validation():
    with pytest.raises(ValueError):
        EncoderSpec("m", kind="esm")
    with pytest.raises(ValueError):
        EncoderSpec("m", raw_dim=0)
    with pytest.raises(ValueError):
        EncoderSpec("m", "external-import")
    s = EncoderSpec("m", ngram_sizes=[2, 3])
    assert EncoderSpec.from_dict(s.to_dict()) == s


def test_encode_all_two_nodes():
    kg = KnowledgeGraph.build([Node("b", "m", "xyzw"), Node("a", "m", "wxyz")], [])
    cache = encode_all(kg, [EncoderSpec("m", raw_dim=8)])
    assert cache.ids["m"] == ["a", "b"]
    assert cache.matrices["m"].shape == (2, 8)


def test_encode_all_missing_spec(biomed_kg):
    with pytest.raises(EncodingError, match="no encoder spec"):
        encode_all(biomed_kg, [EncoderSpec("protein")])


def test_encode_all_rows_equal_single_encodes():
    spec = PlantedKgSpec((("a", 300), ("b", 300)), 8, (PlantedRelation("r", "a", "b"),), 1, 0.0, 0)
    kg, _, _ = generate_planted_kg(spec)
    specs = [EncoderSpec(m, "latent-passthrough", raw_dim=8) for m in ("a", "b")]
    cache = encode_all(kg, specs)
    rng = np.random.default_rng(0)
    for nid in rng.choice(sorted(kg.nodes), 20, replace=False):
        node = kg.nodes[nid]
        spec = next(s for s in specs if s.modality == node.modality)
        np.testing.assert_array_equal(cache.vector(nid), encode(node, spec).vector)
    assert encode_all(kg, specs) == cache


def test_fingerprint_order_independent_and_seed_sensitive():
    a, b = EncoderSpec("x", seed=1), EncoderSpec("y", seed=2)
    assert fingerprint([a, b]) == fingerprint([b, a])
    assert fingerprint([a, b]) != fingerprint([EncoderSpec("x", seed=5), b])


def test_cache_lookup(biomed_cache, biomed_kg):
    nid = biomed_kg.nodes_of("drug")[3]
    assert nid in biomed_cache
    assert "nope" not in biomed_cache
    with pytest.raises(KeyError):
        biomed_cache.locate("nope")
    with pytest.raises(ValueError):
        biomed_cache.rows([biomed_kg.nodes_of("drug")[0], biomed_kg.nodes_of("protein")[0]])


# -- persistence ---------------------------------------------------------------


def test_cache_round_trip_bit_identical(tmp_path, biomed_cache, biomed_specs):
    p = tmp_path / "c.bin"
    persist_cache(biomed_cache, p)
    again = load_cache(p, biomed_specs)
    assert again == biomed_cache
    persist_cache(again, tmp_path / "d.bin")
    assert p.read_bytes() == (tmp_path / "d.bin").read_bytes()


def test_truncated_cache(tmp_path, biomed_cache):
    p = tmp_path / "c.bin"
    persist_cache(biomed_cache, p)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(CacheFormatError, match="truncated"):
        load_cache(p)


def test_bad_magic_and_version(tmp_path, biomed_cache):
    p = tmp_path / "c.bin"
    persist_cache(biomed_cache, p)
    blob = p.read_bytes()
    p.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CacheFormatError, match="magic"):
        load_cache(p)
    p.write_bytes(blob[:4] + (99).to_bytes(4, "little") + blob[8:])
    with pytest.raises(CacheFormatError, match="version"):
        load_cache(p)


def test_fingerprint_mismatch(tmp_path, biomed_cache, biomed_specs):
    p = tmp_path / "c.bin"
    persist_cache(biomed_cache, p)
    other = [EncoderSpec(s.modality, s.kind, s.raw_dim, s.ngram_sizes, seed=s.seed + 1) for s in biomed_specs]
    with pytest.raises(FingerprintMismatch):
        load_cache(p, other)
    assert load_cache(p, other, strict=False) == biomed_cache


def test_cache_rejects_id_row_mismatch():
    with pytest.raises(CacheFormatError):
        EmbeddingCache({"m": np.zeros((2, 3), np.float32)}, {"m": ["a"]}, b"\0" * 32)

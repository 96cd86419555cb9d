import math

import numpy as np
import pytest

from anamod.errors import RetrievalError
from anamod.gateway import Gateway
from anamod.mocks import ScriptedEndpoint
from anamod.retrieval import (
    EmbeddingStore,
    build_index,
    cosine_distance,
    index_covers,
    load_index,
    normalize,
    random_sample,
    retrieve_analogies,
    save_index,
)
from anamod.schema import ModerationInstance


def unit(angle: float) -> np.ndarray:
    return np.asarray([math.cos(angle), math.sin(angle)])


def instances_for(n, schema):
    return [
        ModerationInstance(
            id=f"i{j:03d}", text=f"text {j}", label=schema.categories[j % 6], meta={}
        )
        for j in range(n)
    ]


def test_cosine_distance_known_angles():
    assert cosine_distance(unit(0.0), unit(0.0)) == pytest.approx(0.0, abs=1e-12)
    assert cosine_distance(unit(0.0), unit(math.pi / 4)) == pytest.approx(
        1.0 - 1.0 / math.sqrt(2), abs=1e-12
    )
    assert cosine_distance(unit(0.0), unit(math.pi / 2)) == pytest.approx(1.0, abs=1e-12)
    assert cosine_distance(unit(0.0), unit(math.pi)) == pytest.approx(2.0, abs=1e-12)


def test_cosine_distance_requires_unit_vectors():
    with pytest.raises(RetrievalError):
        cosine_distance([2.0, 0.0], [1.0, 0.0])


def test_cosine_distance_shape_mismatch():
    with pytest.raises(RetrievalError):
        cosine_distance([1.0, 0.0], [1.0, 0.0, 0.0])


def test_normalize_zero_vector_rejected():
    with pytest.raises(RetrievalError):
        normalize([0.0, 0.0])


def test_embedding_store_caches(tmp_path, schema6):
    gw = Gateway(run_log_path=None)
    endpoint = ScriptedEndpoint(embed_dim=8, endpoint_id="e")
    handle = gw.register_mock("e", "embedding", endpoint)
    store = EmbeddingStore(gw, handle, cache_dir=tmp_path / "cache")
    first = store.embed_texts(["a", "b", "a"])
    calls_after_first = endpoint.embed_request_count
    second = store.embed_texts(["a", "b"])
    assert endpoint.embed_request_count == calls_after_first
    np.testing.assert_array_equal(first[0], second[0])
    np.testing.assert_array_equal(first[0], first[2])
    for row in first:
        assert abs(np.linalg.norm(row) - 1.0) < 1e-9


def test_embedding_store_corrupt_cache_errors(tmp_path):
    gw = Gateway(run_log_path=None)
    handle = gw.register_mock("e", "embedding", ScriptedEndpoint(embed_dim=8, endpoint_id="e"))
    store = EmbeddingStore(gw, handle, cache_dir=tmp_path / "cache")
    store.embed_texts(["a"])
    cached = list((tmp_path / "cache").glob("*.npy"))
    assert len(cached) == 1
    cached[0].write_bytes(b"garbage")
    fresh = EmbeddingStore(gw, handle, cache_dir=tmp_path / "cache")
    with pytest.raises(RetrievalError):
        fresh.embed_texts(["a"])


def test_build_index_validations(schema6):
    insts = instances_for(3, schema6)
    vecs = np.stack([unit(0.1 * j) for j in range(3)])
    with pytest.raises(RetrievalError, match="mismatch"):
        build_index(insts[:2], vecs, schema6)
    with pytest.raises(RetrievalError, match="duplicate"):
        build_index([insts[0], insts[0], insts[2]], vecs, schema6)
    with pytest.raises(RetrievalError):
        build_index(insts, np.stack([unit(0.0), unit(0.0), [3.0, 4.0]]), schema6)
    bad = ModerationInstance(id="x", text="t", label="Politics", meta={})
    other = ModerationInstance(id="y", text="t", label="Spam", meta={})
    with pytest.raises(RetrievalError, match="Spam"):
        build_index([bad, other], np.stack([unit(0.0), unit(1.0)]), schema6)


def test_retrieve_orders_by_distance_excluding_self(schema6):
    insts = instances_for(5, schema6)
    angles = [0.0, 0.1, 0.5, 1.2, 2.8]
    index = build_index(insts, np.stack([unit(a) for a in angles]), schema6)
    result = retrieve_analogies(index, "i000", k=3)
    assert result.analogy_ids == ("i001", "i002", "i003")
    assert all(n.id != "i000" for n in result.neighbors)
    sims = [n.similarity for n in result.neighbors]
    assert sims == sorted(sims, reverse=True)
    assert sims[0] == pytest.approx(math.cos(0.1), abs=1e-12)


def test_retrieve_ties_break_by_id(schema6):
    insts = instances_for(4, schema6)
    v = unit(0.7)
    vecs = np.stack([unit(0.0), v.copy(), v.copy(), v.copy()])
    index = build_index(insts, vecs, schema6)
    result = retrieve_analogies(index, "i000", k=3)
    assert result.analogy_ids == ("i001", "i002", "i003")


def test_retrieve_k_clamped_to_population(schema6):
    insts = instances_for(3, schema6)
    index = build_index(insts, np.stack([unit(0.1 * j) for j in range(3)]), schema6)
    result = retrieve_analogies(index, "i000", k=50)
    assert len(result.neighbors) == 2


def test_retrieve_unknown_query_errors(schema6):
    insts = instances_for(3, schema6)
    index = build_index(insts, np.stack([unit(0.1 * j) for j in range(3)]), schema6)
    with pytest.raises(RetrievalError, match="ghost"):
        retrieve_analogies(index, "ghost", k=2)


def test_retrieve_label_filter(schema6):
    insts = instances_for(12, schema6)
    index = build_index(insts, np.stack([unit(0.2 * j) for j in range(12)]), schema6)
    result = retrieve_analogies(index, "i000", k=5, label_filter="Violence")
    assert result.neighbors
    assert all(n.label == "Violence" for n in result.neighbors)


def test_random_sample_deterministic_and_scored(schema6):
    insts = instances_for(30, schema6)
    index = build_index(insts, np.stack([unit(0.05 * j) for j in range(30)]), schema6)
    a = random_sample(index, "i000", k=5, seed=42)
    b = random_sample(index, "i000", k=5, seed=42)
    c = random_sample(index, "i000", k=5, seed=43)
    assert a.analogy_ids == b.analogy_ids
    assert a.analogy_ids != c.analogy_ids
    assert a.policy == "random"
    assert all(n.similarity is not None for n in a.neighbors)
    assert "i000" not in a.analogy_ids


def test_index_round_trip_on_disk(tmp_path, schema6):
    insts = instances_for(9, schema6)
    index = build_index(insts, np.stack([unit(0.3 * j) for j in range(9)]), schema6)
    path = tmp_path / "index.bin"
    save_index(index, path)
    loaded = load_index(path)
    assert loaded.ids == index.ids
    assert loaded.labels == index.labels
    assert loaded.texts == index.texts
    assert loaded.schema_name == index.schema_name
    np.testing.assert_array_equal(loaded.matrix, index.matrix)
    before = retrieve_analogies(index, "i004", k=4).analogy_ids
    after = retrieve_analogies(loaded, "i004", k=4).analogy_ids
    assert before == after


def test_index_load_rejects_truncation_and_bad_magic(tmp_path, schema6):
    insts = instances_for(4, schema6)
    index = build_index(insts, np.stack([unit(0.3 * j) for j in range(4)]), schema6)
    path = tmp_path / "index.bin"
    save_index(index, path)
    blob = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(RetrievalError):
        load_index(tmp_path / "short.bin")
    (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(RetrievalError):
        load_index(tmp_path / "bad.bin")


def test_index_covers_reports_missing(schema6):
    insts = instances_for(4, schema6)
    index = build_index(insts, np.stack([unit(0.3 * j) for j in range(4)]), schema6)
    extra = ModerationInstance(id="zzz", text="t", label="Bias", meta={})
    assert index_covers(index, insts) == []
    assert index_covers(index, insts + [extra]) == ["zzz"]

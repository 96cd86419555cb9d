"""Embedding cache and exact cosine k-NN retrieval over the corpus.

Embeddings come from any endpoint behind the gateway and are L2-normalized
at ingestion, so cosine distance reduces to ``1 - dot`` and stays in
[0, 2].  Vectors are cached on disk keyed by (endpoint id, text digest);
re-running a corpus never re-bills the endpoint.

Search is exact over the full index: corpora at pipeline scale make
brute-force tractable, and dataset reproducibility requires deterministic
neighbor order, so there is no approximate structure.  Equal distances are
broken by ascending id.  The random-sampling policy exists as the ablation
counterpart to k-NN and draws uniformly without replacement under a seed.
"""

from __future__ import annotations

import io
import random
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import RetrievalError
from .gateway import Gateway, ModelHandle
from .schema import (
    AnalogyExample,
    LabelSchema,
    ModerationInstance,
    atomic_write_bytes,
    sha256_hex,
)

NORM_TOLERANCE = 1e-6

INDEX_MAGIC = b"AMVINDEX"
INDEX_VERSION = 1


def _check_normalized(vec: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(vec)):
        raise RetrievalError(f"{context}: non-finite entries")
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > NORM_TOLERANCE:
        raise RetrievalError(f"{context}: vector norm {norm:.8f} differs from 1")


def normalize(vec: Sequence[float], context: str = "embedding") -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim != 1:
        raise RetrievalError(f"{context}: expected a 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise RetrievalError(f"{context}: non-finite entries")
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise RetrievalError(f"{context}: zero-norm vector cannot be normalized")
    return arr / norm


def cosine_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """1 - a·b over normalized vectors, clamped into [0, 2]."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise RetrievalError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    _check_normalized(va, "left operand")
    _check_normalized(vb, "right operand")
    return min(2.0, max(0.0, 1.0 - float(np.dot(va, vb))))


class EmbeddingStore:
    """Caching, normalizing front end to one embedding endpoint.

    Cache layout: one ``<digest>.npy`` per text under ``cache_dir``, digest
    over (endpoint id, text).  Cache writes are atomic; loads are bitwise
    identical to what was stored.  With no cache_dir every call hits the
    endpoint.
    """

    def __init__(
        self,
        gateway: Gateway,
        handle: ModelHandle,
        cache_dir: Path | None = None,
        batch_size: int = 64,
    ):
        if batch_size < 1:
            raise RetrievalError(f"batch_size {batch_size} must be >= 1")
        self.gateway = gateway
        self.handle = handle
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.batch_size = batch_size
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _key(self, text: str) -> str:
        return sha256_hex(f"{self.handle.id}\x00{text}")

    def _cache_path(self, key: str) -> Path | None:
        return None if self.cache_dir is None else self.cache_dir / f"{key}.npy"

    def _load_cached(self, key: str) -> np.ndarray | None:
        path = self._cache_path(key)
        if path is None or not path.exists():
            return None
        try:
            return np.load(path)
        except (OSError, ValueError) as exc:
            raise RetrievalError(f"corrupt embedding cache entry {path}: {exc}") from exc

    def _store(self, key: str, vec: np.ndarray) -> None:
        path = self._cache_path(key)
        if path is None:
            return
        buf = io.BytesIO()
        np.save(buf, vec)
        atomic_write_bytes(path, buf.getvalue())

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        """Embed texts in order; returns an (n, dim) float64 matrix.

        Every row is L2-normalized regardless of what the endpoint
        returned.  Repeated texts are embedded once.
        """
        if not texts:
            raise RetrievalError("embed_texts requires at least one text")
        for i, text in enumerate(texts):
            if not isinstance(text, str) or not text:
                raise RetrievalError(f"text at position {i} is empty")

        keys = [self._key(t) for t in texts]
        by_key: dict[str, np.ndarray] = {}
        miss_keys: list[str] = []
        miss_texts: list[str] = []
        for key, text in zip(keys, texts):
            if key in by_key or key in set(miss_keys):
                continue
            cached = self._load_cached(key)
            if cached is not None:
                by_key[key] = cached
            else:
                miss_keys.append(key)
                miss_texts.append(text)

        for start in range(0, len(miss_texts), self.batch_size):
            chunk = miss_texts[start : start + self.batch_size]
            raw = self.gateway.embed(self.handle, chunk, tag="embed_texts")
            dims = {len(v) for v in raw}
            if len(dims) != 1:
                raise RetrievalError(f"dimension mismatch across batch: {sorted(dims)}")
            for key, vec in zip(miss_keys[start : start + self.batch_size], raw):
                unit = normalize(vec, context="endpoint embedding")
                self._store(key, unit)
                by_key[key] = unit

        rows = [by_key[key] for key in keys]
        dims = {row.shape[0] for row in rows}
        if len(dims) != 1:
            raise RetrievalError(f"dimension mismatch across cached vectors: {sorted(dims)}")
        return np.stack(rows)


@dataclass(frozen=True)
class RetrievalResult:
    """Analogy set for one query: ordered neighbors plus how they were chosen."""

    query_id: str
    neighbors: tuple[AnalogyExample, ...]
    policy: str  # "knn" | "random"
    k_requested: int
    seed: int | None = None

    @property
    def analogy_ids(self) -> tuple[str, ...]:
        return tuple(ex.id for ex in self.neighbors)


class VectorIndex:
    """Immutable id -> (vector, label, text) index, rows sorted by id.

    Rows are kept in ascending id order so a stable sort over distances
    yields the lexicographic tie-break for free.  Safe for concurrent
    readers; never mutated after construction.
    """

    def __init__(
        self,
        ids: Sequence[str],
        matrix: np.ndarray,
        labels: Sequence[str],
        texts: Sequence[str],
        schema_name: str,
    ):
        self.ids: tuple[str, ...] = tuple(ids)
        self.matrix = matrix
        self.labels: tuple[str, ...] = tuple(labels)
        self.texts: tuple[str, ...] = tuple(texts)
        self.schema_name = schema_name
        self._pos = {id_: i for i, id_ in enumerate(self.ids)}
        self.matrix.setflags(write=False)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, instance_id: str) -> bool:
        return instance_id in self._pos

    def position(self, instance_id: str) -> int:
        try:
            return self._pos[instance_id]
        except KeyError:
            raise RetrievalError(f"id {instance_id!r} not in index") from None

    def entries(self) -> Iterator[tuple[str, np.ndarray, str, str]]:
        for i, id_ in enumerate(self.ids):
            yield id_, self.matrix[i], self.labels[i], self.texts[i]


def build_index(
    instances: Sequence[ModerationInstance],
    vectors: np.ndarray | Sequence[Sequence[float]],
    schema: LabelSchema,
) -> VectorIndex:
    """Build the retrieval index from parallel instance and vector lists."""
    matrix = np.asarray(vectors, dtype=np.float64)
    if matrix.ndim != 2 or len(instances) != matrix.shape[0]:
        raise RetrievalError(
            f"length mismatch: {len(instances)} instances vs "
            f"{matrix.shape[0] if matrix.ndim == 2 else 'malformed'} vectors"
        )
    if len(instances) == 0:
        raise RetrievalError("cannot build an empty index")
    seen: set[str] = set()
    for inst in instances:
        if inst.id in seen:
            raise RetrievalError(f"duplicate id {inst.id!r}")
        seen.add(inst.id)
        if inst.label not in schema:
            raise RetrievalError(f"label {inst.label!r} of {inst.id!r} not in schema {schema.name!r}")
    for i in range(matrix.shape[0]):
        _check_normalized(matrix[i], f"vector for {instances[i].id!r}")

    order = sorted(range(len(instances)), key=lambda i: instances[i].id)
    return VectorIndex(
        ids=[instances[i].id for i in order],
        matrix=matrix[order].copy(),
        labels=[instances[i].label for i in order],
        texts=[instances[i].text for i in order],
        schema_name=schema.name,
    )


def _clamped_similarity(dot: float) -> float:
    return min(1.0, max(-1.0, dot))


def retrieve_analogies(
    index: VectorIndex,
    query_id: str,
    k: int,
    label_filter: str | None = None,
) -> RetrievalResult:
    """The k nearest neighbors of a corpus instance, self excluded.

    Neighbors come back sorted by ascending cosine distance, equal
    distances by ascending id; the result is deterministic for a given
    index.  ``label_filter`` restricts candidates to one label (off by
    default: retrieval pools across all categories).
    """
    if k < 1:
        raise RetrievalError(f"k {k} must be >= 1")
    qpos = index.position(query_id)
    query_vec = index.matrix[qpos]

    mask = np.ones(len(index), dtype=bool)
    mask[qpos] = False
    if label_filter is not None:
        mask &= np.asarray([lab == label_filter for lab in index.labels])
    candidates = np.flatnonzero(mask)
    if candidates.size == 0:
        return RetrievalResult(query_id=query_id, neighbors=(), policy="knn", k_requested=k)

    dots = index.matrix[candidates] @ query_vec
    distances = np.clip(1.0 - dots, 0.0, 2.0)
    # candidates ascend by id, so a stable sort encodes the tie-break
    order = np.argsort(distances, kind="stable")[: min(k, candidates.size)]
    neighbors = tuple(
        AnalogyExample(
            id=index.ids[candidates[i]],
            text=index.texts[candidates[i]],
            label=index.labels[candidates[i]],
            origin="retrieved",
            similarity=_clamped_similarity(float(dots[i])),
        )
        for i in order
    )
    return RetrievalResult(query_id=query_id, neighbors=neighbors, policy="knn", k_requested=k)


def random_sample(
    index: VectorIndex,
    query_id: str,
    k: int,
    seed: int,
    label_filter: str | None = None,
) -> RetrievalResult:
    """Ablation counterpart to k-NN: uniform draw without replacement."""
    if k < 1:
        raise RetrievalError(f"k {k} must be >= 1")
    qpos = index.position(query_id)
    query_vec = index.matrix[qpos]
    candidates = [
        i
        for i in range(len(index))
        if i != qpos and (label_filter is None or index.labels[i] == label_filter)
    ]
    rng = random.Random(seed)
    chosen = rng.sample(candidates, min(k, len(candidates)))
    neighbors = tuple(
        AnalogyExample(
            id=index.ids[i],
            text=index.texts[i],
            label=index.labels[i],
            origin="retrieved",
            similarity=_clamped_similarity(float(np.dot(index.matrix[i], query_vec))),
        )
        for i in chosen
    )
    return RetrievalResult(
        query_id=query_id, neighbors=neighbors, policy="random", k_requested=k, seed=seed
    )


def _packed_field(data: bytes, width: int) -> bytes:
    return struct.pack("<I", len(data)) + data + b"\x00" * (width - len(data))


def save_index(index: VectorIndex, path: Path) -> None:
    """Persist the index: fixed-width records after a self-describing header."""
    id_bytes = [i.encode("utf-8") for i in index.ids]
    label_bytes = [lab.encode("utf-8") for lab in index.labels]
    text_bytes = [t.encode("utf-8") for t in index.texts]
    id_w = max(len(b) for b in id_bytes)
    label_w = max(len(b) for b in label_bytes)
    text_w = max(len(b) for b in text_bytes)
    schema_raw = index.schema_name.encode("utf-8")

    parts = [
        INDEX_MAGIC,
        struct.pack(
            "<7I", INDEX_VERSION, index.dim, len(index), id_w, label_w, text_w, len(schema_raw)
        ),
        schema_raw,
    ]
    for i in range(len(index)):
        parts.append(_packed_field(id_bytes[i], id_w))
        parts.append(_packed_field(label_bytes[i], label_w))
        parts.append(_packed_field(text_bytes[i], text_w))
        parts.append(index.matrix[i].astype("<f8").tobytes())
    atomic_write_bytes(Path(path), b"".join(parts))


def load_index(path: Path) -> VectorIndex:
    """Reload a saved index with bit-identical retrieval behavior."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise RetrievalError(f"cannot read index file {path}: {exc}") from exc

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise RetrievalError(f"truncated index file {path}: unreadable {what}")
        piece = blob[offset : offset + n]
        offset += n
        return piece

    offset = 0
    if take(len(INDEX_MAGIC), "magic") != INDEX_MAGIC:
        raise RetrievalError(f"{path} is not an index file (bad magic)")
    version, dim, count, id_w, label_w, text_w, schema_len = struct.unpack(
        "<7I", take(28, "header")
    )
    if version != INDEX_VERSION:
        raise RetrievalError(f"{path}: unsupported index version {version}")
    schema_name = take(schema_len, "schema name").decode("utf-8")

    def unpack_field(width: int, what: str) -> str:
        raw = take(4 + width, what)
        (length,) = struct.unpack("<I", raw[:4])
        if length > width:
            raise RetrievalError(f"corrupt index file {path}: bad {what} length")
        return raw[4 : 4 + length].decode("utf-8")

    ids, labels, texts, rows = [], [], [], []
    for _ in range(count):
        ids.append(unpack_field(id_w, "id"))
        labels.append(unpack_field(label_w, "label"))
        texts.append(unpack_field(text_w, "text"))
        rows.append(np.frombuffer(take(8 * dim, "vector"), dtype="<f8"))
    if offset != len(blob):
        raise RetrievalError(f"{path}: {len(blob) - offset} trailing bytes")
    matrix = np.array(rows, dtype=np.float64).reshape(count, dim)
    return VectorIndex(ids=ids, matrix=matrix, labels=labels, texts=texts, schema_name=schema_name)


def index_covers(index: VectorIndex, instances: Sequence[ModerationInstance]) -> list[str]:
    """Ids of instances missing from the index (empty list means covered)."""
    return [inst.id for inst in instances if inst.id not in index]

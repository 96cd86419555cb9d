"""Corpus data model, label schemas, and the JSONL dataset formats.

Every other module reads and writes through the types defined here.  Datasets
are JSONL (one record per line, UTF-8); each dataset file gets a sidecar
``<dataset>.manifest`` with count, schema name, stage, and content digest.
All values are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DatasetError

INSTANCE_FIELDS = ("id", "text", "label", "meta")
SFT_FIELDS = ("instance_id", "prompt", "completion", "stage", "label")
STAGES = ("stage1", "stage3")


def canonical_json(obj) -> str:
    """Stable single-line JSON used for every on-disk record."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def derive_seed(seed: int, *parts: str) -> int:
    """Stable 63-bit sub-seed for a named stream under one master seed."""
    material = f"{seed}|" + "|".join(parts)
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a same-directory temp file + rename.

    On any failure the temp file is removed and the target is left untouched.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


@dataclass(frozen=True)
class LabelSchema:
    """A named, ordered set of moderation categories.

    The category set is configuration, not hard-coded: platforms plug in
    their own taxonomy.  ``harmless_category``, when set, designates the
    non-violating bucket and must be a member of ``categories``.
    """

    name: str
    categories: tuple[str, ...]
    harmless_category: str | None = None

    def __post_init__(self):
        if not self.name:
            raise DatasetError("schema name must be non-empty")
        if not self.categories:
            raise DatasetError("schema must define at least one category")
        seen = set()
        for cat in self.categories:
            if not isinstance(cat, str) or not cat:
                raise DatasetError("category names must be non-empty strings")
            if cat in seen:
                raise DatasetError(f"duplicate category {cat!r} in schema {self.name!r}")
            seen.add(cat)
        if self.harmless_category is not None and self.harmless_category not in self.categories:
            raise DatasetError(
                f"harmless_category {self.harmless_category!r} is not a member of "
                f"schema {self.name!r} categories"
            )

    def __contains__(self, label: object) -> bool:
        return label in self.categories

    def canonical(self, label: str) -> str | None:
        """Case-insensitive lookup; returns the schema spelling or None."""
        if label in self.categories:
            return label
        folded = label.casefold()
        for cat in self.categories:
            if cat.casefold() == folded:
                return cat
        return None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "categories": list(self.categories),
            "harmless_category": self.harmless_category,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LabelSchema":
        return cls(
            name=d["name"],
            categories=tuple(d["categories"]),
            harmless_category=d.get("harmless_category"),
        )


@dataclass(frozen=True)
class ModerationInstance:
    """One labeled content sample."""

    id: str
    text: str
    label: str
    meta: Mapping[str, str] | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "text": self.text, "label": self.label}
        if self.meta:
            d["meta"] = dict(self.meta)
        return d


@dataclass(frozen=True)
class AnalogyExample:
    """A labeled example serving as a reasoning anchor for some instance.

    ``origin`` records whether it came out of corpus retrieval or was
    generated by the stage-1-trained model; generated ids carry a ``virt:``
    prefix and no similarity.
    """

    id: str
    text: str
    label: str
    origin: str  # "retrieved" | "generated"
    similarity: float | None = None

    def __post_init__(self):
        if self.origin not in ("retrieved", "generated"):
            raise DatasetError(f"invalid analogy origin {self.origin!r}")
        if self.origin == "retrieved":
            if self.similarity is None:
                raise DatasetError(f"retrieved analogy {self.id!r} must carry a similarity")
            if not -1.0 <= self.similarity <= 1.0:
                raise DatasetError(f"similarity {self.similarity} outside [-1, 1] for {self.id!r}")
        else:
            if not self.id.startswith("virt:"):
                raise DatasetError(f"generated analogy id {self.id!r} must be prefixed 'virt:'")
            if self.similarity is not None:
                raise DatasetError(f"generated analogy {self.id!r} must not carry a similarity")

    def to_dict(self) -> dict:
        d = {"id": self.id, "text": self.text, "label": self.label, "origin": self.origin}
        if self.similarity is not None:
            d["similarity"] = self.similarity
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AnalogyExample":
        return cls(
            id=d["id"],
            text=d["text"],
            label=d["label"],
            origin=d["origin"],
            similarity=d.get("similarity"),
        )


@dataclass(frozen=True)
class SftRecord:
    """One prompt/completion training pair emitted by stage 1 or stage 3."""

    instance_id: str
    prompt: str
    completion: str
    stage: str  # "stage1" | "stage3"
    label: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise DatasetError(f"invalid stage {self.stage!r}; expected one of {STAGES}")
        if not self.completion:
            raise DatasetError(f"record {self.instance_id!r} has an empty completion")

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "prompt": self.prompt,
            "completion": self.completion,
            "stage": self.stage,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SftRecord":
        return cls(
            instance_id=d["instance_id"],
            prompt=d["prompt"],
            completion=d["completion"],
            stage=d["stage"],
            label=d["label"],
        )


@dataclass(frozen=True)
class DatasetManifest:
    """Sidecar metadata for a written dataset file."""

    path: str
    count: int
    schema_name: str
    stage: str
    content_digest: str
    created_at: str

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "count": self.count,
            "schema_name": self.schema_name,
            "stage": self.stage,
            "content_digest": self.content_digest,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetManifest":
        return cls(**{k: d[k] for k in ("path", "count", "schema_name", "stage", "content_digest", "created_at")})


def manifest_path(dataset_path: Path) -> Path:
    return Path(str(dataset_path) + ".manifest")


def validate_instance(inst: ModerationInstance, schema: LabelSchema) -> list[str]:
    """Return the list of invariant violations; empty means the instance is ok.

    Total over arbitrary inputs: violations are data, not failures.
    """
    violations: list[str] = []
    if not isinstance(inst.id, str) or not inst.id:
        violations.append("empty id")
    if not isinstance(inst.text, str) or not inst.text:
        violations.append("empty text")
    if not isinstance(inst.label, str) or inst.label not in schema:
        violations.append(f"label {inst.label!r} not in schema {schema.name!r}")
    if inst.meta is not None:
        for k, v in inst.meta.items():
            if not isinstance(k, str) or not isinstance(v, str):
                violations.append(f"meta entry {k!r} is not string-to-string")
                break
    return violations


def load_dataset(path: Path, schema: LabelSchema) -> list[ModerationInstance]:
    """Load a JSONL instance file, preserving file order.

    Records without an ``id`` get the deterministic id ``row:<line-number>``.
    Malformed lines, unknown labels, and duplicate ids raise DatasetError
    naming the offending line(s).
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    instances: list[ModerationInstance] = []
    first_line_of: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip("\n")
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON line: {exc.msg}") from exc
            if not isinstance(raw, dict):
                raise DatasetError(f"{path}:{lineno}: record is not a JSON object")
            inst_id = raw.get("id") or f"row:{lineno}"
            inst = ModerationInstance(
                id=str(inst_id),
                text=raw.get("text", ""),
                label=raw.get("label", ""),
                meta=raw.get("meta") or {},
            )
            if inst.label not in schema:
                raise DatasetError(
                    f"{path}:{lineno}: unknown label {inst.label!r} under schema "
                    f"{schema.name!r} (categories: {', '.join(schema.categories)})"
                )
            problems = validate_instance(inst, schema)
            if problems:
                raise DatasetError(f"{path}:{lineno}: invalid instance: {'; '.join(problems)}")
            if inst.id in first_line_of:
                raise DatasetError(
                    f"{path}: duplicate id {inst.id!r} on lines "
                    f"{first_line_of[inst.id]} and {lineno}"
                )
            first_line_of[inst.id] = lineno
            instances.append(inst)
    return instances


def write_instance_dataset(instances: Iterable[ModerationInstance], path: Path) -> int:
    """Write instances as JSONL atomically; returns the record count."""
    lines = [canonical_json(inst.to_dict()) for inst in instances]
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8") if lines else b"")
    return len(lines)


def write_sft_dataset(records: list[SftRecord], path: Path, schema: LabelSchema) -> DatasetManifest:
    """Write an SFT dataset atomically and produce its sidecar manifest.

    All records must share one stage; reloading the file yields byte-identical
    completions.
    """
    if not records:
        raise DatasetError("refusing to write an empty SFT dataset")
    stages = {r.stage for r in records}
    if len(stages) > 1:
        raise DatasetError(f"mixed stages in one dataset: {sorted(stages)}")
    path = Path(path)
    payload = ("\n".join(canonical_json(r.to_dict()) for r in records) + "\n").encode("utf-8")
    atomic_write_bytes(path, payload)
    manifest = DatasetManifest(
        path=path.name,
        count=len(records),
        schema_name=schema.name,
        stage=records[0].stage,
        content_digest=sha256_hex(payload),
        created_at=utc_now_iso(),
    )
    atomic_write_bytes(manifest_path(path), (canonical_json(manifest.to_dict()) + "\n").encode("utf-8"))
    return manifest


def load_sft_dataset(path: Path) -> list[SftRecord]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"SFT dataset file not found: {path}")
    records: list[SftRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON line: {exc.msg}") from exc
            records.append(SftRecord.from_dict(raw))
    return records


def load_manifest(dataset_path: Path) -> DatasetManifest:
    mpath = manifest_path(Path(dataset_path))
    if not mpath.exists():
        raise DatasetError(f"manifest not found: {mpath}")
    with open(mpath, "r", encoding="utf-8") as fh:
        return DatasetManifest.from_dict(json.load(fh))


def verify_manifest(dataset_path: Path) -> DatasetManifest:
    """Recompute count and digest for a dataset file and check its sidecar."""
    dataset_path = Path(dataset_path)
    manifest = load_manifest(dataset_path)
    data = dataset_path.read_bytes()
    digest = sha256_hex(data)
    count = sum(1 for line in data.decode("utf-8").splitlines() if line.strip())
    if digest != manifest.content_digest:
        raise DatasetError(f"{dataset_path}: content digest mismatch with manifest")
    if count != manifest.count:
        raise DatasetError(f"{dataset_path}: record count {count} != manifest count {manifest.count}")
    return manifest


@dataclass(frozen=True)
class QuarantineEntry:
    """One instance excluded from an emitted dataset, with the reason."""

    instance_id: str
    reason: str
    detail: str = ""

    def to_dict(self) -> dict:
        d = {"instance_id": self.instance_id, "reason": self.reason}
        if self.detail:
            d["detail"] = self.detail
        return d


@dataclass
class QuarantineReport:
    """Collected quarantine entries for one stage run."""

    entries: list[QuarantineEntry] = field(default_factory=list)

    def add(self, instance_id: str, reason: str, detail: str = "") -> None:
        self.entries.append(QuarantineEntry(instance_id, reason, detail))

    def __len__(self) -> int:
        return len(self.entries)

    def reasons(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entries:
            counts[e.reason] = counts.get(e.reason, 0) + 1
        return counts

    def write(self, path: Path) -> None:
        lines = [canonical_json(e.to_dict()) for e in self.entries]
        atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8") if lines else b"")

import json

import pytest

from anamod.errors import DatasetError
from anamod.schema import (
    AnalogyExample,
    LabelSchema,
    ModerationInstance,
    SftRecord,
    canonical_json,
    derive_seed,
    load_dataset,
    load_sft_dataset,
    manifest_path,
    sha256_hex,
    validate_instance,
    verify_manifest,
    write_instance_dataset,
    write_sft_dataset,
)


def make_instance(i=1, label="Politics", text=None):
    return ModerationInstance(
        id=f"inst-{i:04d}",
        text=text or f"sample text {i}",
        label=label,
        meta={},
    )


def test_canonical_json_is_order_independent():
    a = canonical_json({"b": 1, "a": [2, 3]})
    b = canonical_json({"a": [2, 3], "b": 1})
    assert a == b
    assert a == '{"a":[2,3],"b":1}'


def test_canonical_json_keeps_unicode():
    assert canonical_json({"t": "héllo"}) == '{"t":"héllo"}'


def test_derive_seed_varies_by_part_and_is_stable():
    s1 = derive_seed(7, "stage1", "inst-0001")
    s2 = derive_seed(7, "stage1", "inst-0002")
    s3 = derive_seed(8, "stage1", "inst-0001")
    assert s1 != s2 and s1 != s3
    assert s1 == derive_seed(7, "stage1", "inst-0001")
    assert 0 <= s1 < 2**63


def test_schema_rejects_duplicates_and_bad_harmless():
    with pytest.raises(Exception):
        LabelSchema(name="x", categories=("A", "A"), harmless_category="A")
    with pytest.raises(Exception):
        LabelSchema(name="x", categories=("A", "B"), harmless_category="C")


def test_schema_canonical_is_case_insensitive(schema6):
    assert schema6.canonical("politics") == "Politics"
    assert schema6.canonical("HARMLESS") == "Harmless"
    assert schema6.canonical("nonsense") is None
    assert "Bias" in schema6
    assert "bias" not in schema6


def test_validate_instance_collects_violations(schema6):
    bad = ModerationInstance(id="", text="", label="Nope", meta={})
    problems = validate_instance(bad, schema6)
    assert len(problems) >= 3


def test_analogy_example_contracts():
    AnalogyExample(id="a", text="t", label="L", origin="retrieved", similarity=0.5)
    AnalogyExample(id="virt:i:1", text="t", label="L", origin="generated", similarity=None)
    with pytest.raises(Exception):
        AnalogyExample(id="a", text="t", label="L", origin="retrieved", similarity=2.0)
    with pytest.raises(Exception):
        AnalogyExample(id="plain", text="t", label="L", origin="generated", similarity=None)


def test_instance_dataset_round_trip(tmp_path, schema6):
    instances = [make_instance(i, label=schema6.categories[i % 6]) for i in range(12)]
    path = tmp_path / "corpus.jsonl"
    write_instance_dataset(instances, path)
    loaded = load_dataset(path, schema6)
    assert loaded == instances


def test_load_dataset_names_bad_line(tmp_path, schema6):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"id": "a", "text": "t", "label": "Politics", "meta": {}}\nnot json\n')
    with pytest.raises(DatasetError, match=":2"):
        load_dataset(path, schema6)


def test_load_dataset_duplicate_ids_cite_both_lines(tmp_path, schema6):
    row = '{"id": "a", "text": "t", "label": "Politics", "meta": {}}'
    path = tmp_path / "corpus.jsonl"
    path.write_text(row + "\n" + row + "\n")
    with pytest.raises(DatasetError) as exc:
        load_dataset(path, schema6)
    assert "1" in str(exc.value) and "2" in str(exc.value)


def test_load_dataset_unknown_label_names_schema(tmp_path, schema6):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"id": "a", "text": "t", "label": "Spam", "meta": {}}\n')
    with pytest.raises(DatasetError, match="moderation-6"):
        load_dataset(path, schema6)


def test_sft_dataset_round_trip_and_manifest(tmp_path, schema6):
    records = [
        SftRecord(
            instance_id=f"inst-{i:04d}",
            prompt=f"prompt {i}",
            completion=f"completion {i}",
            stage="stage1",
            label="Politics",
        )
        for i in range(5)
    ]
    path = tmp_path / "d_aug.jsonl"
    manifest = write_sft_dataset(records, path, schema6)
    assert manifest.count == 5
    assert manifest_path(path).exists()
    assert load_sft_dataset(path) == records
    checked = verify_manifest(path)
    assert checked.content_digest == manifest.content_digest


def test_sft_dataset_rejects_mixed_stages(tmp_path, schema6):
    records = [
        SftRecord("a", "p", "c", "stage1", "Politics"),
        SftRecord("b", "p", "c", "stage3", "Politics"),
    ]
    with pytest.raises(DatasetError, match="mixed stages"):
        write_sft_dataset(records, tmp_path / "x.jsonl", schema6)


def test_verify_manifest_detects_tampering(tmp_path, schema6):
    records = [SftRecord("a", "p", "c", "stage1", "Politics")]
    path = tmp_path / "d.jsonl"
    write_sft_dataset(records, path, schema6)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"instance_id": "b", "prompt": "p", "completion": "c", "stage": "stage1", "label": "Politics"}) + "\n")
    with pytest.raises(DatasetError):
        verify_manifest(path)


def test_dataset_files_carry_no_timestamps(tmp_path, schema6):
    records = [SftRecord("a", "p", "c", "stage1", "Politics")]
    path = tmp_path / "d.jsonl"
    write_sft_dataset(records, path, schema6)
    row = json.loads(path.read_text().splitlines()[0])
    assert set(row) == {"instance_id", "prompt", "completion", "stage", "label"}


def test_sha256_hex_accepts_str_and_bytes():
    assert sha256_hex("abc") == sha256_hex(b"abc")
    assert len(sha256_hex("abc")) == 64

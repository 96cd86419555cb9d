import json

import pytest
from fastapi.testclient import TestClient

from anamod.errors import AlreadyJudgedError, ReviewError
from anamod.review import (
    PairInput,
    ReviewSession,
    ReviewStore,
    create_app,
    load_export,
    pairs_from_exports,
)


def make_pairs(n=8):
    return [
        PairInput(
            pair_id=f"pair:inst-{i:03d}",
            context=f"post number {i}",
            method_a="anchored",
            rule_a=f"first candidate wording {i}",
            method_b="plain",
            rule_b=f"second candidate wording {i}",
        )
        for i in range(n)
    ]


@pytest.fixture
def session(tmp_path):
    return ReviewSession.create(make_pairs(), ["ann-1", "ann-2"], seed=11, store_dir=tmp_path)


def test_pair_input_rejects_degenerate():
    with pytest.raises(ReviewError):
        PairInput("", "ctx", "a", "ra", "b", "rb")
    with pytest.raises(ReviewError):
        PairInput("p1", "ctx", "same", "ra", "same", "rb")


def test_pairs_from_exports_joins_on_instance_id():
    left = [
        {"instance_id": "i1", "rule_id": "r1", "rule_text": "L1", "context": "c1"},
        {"instance_id": "i2", "rule_id": "r2", "rule_text": "L2", "context": "c2"},
    ]
    right = [
        {"instance_id": "i2", "rule_id": "r9", "rule_text": "R2", "context": "c2"},
        {"instance_id": "i3", "rule_id": "r8", "rule_text": "R3", "context": "c3"},
    ]
    pairs = pairs_from_exports(left, right, "anchored", "plain")
    assert len(pairs) == 1
    p = pairs[0]
    assert p.pair_id == "pair:i2"
    assert (p.rule_a, p.rule_b) == ("L2", "R2")
    with pytest.raises(ReviewError, match="no instance ids"):
        pairs_from_exports(left, [{"instance_id": "zz", "rule_text": "x", "context": "y"}], "a", "b")


def test_load_export_reports_line_numbers(tmp_path):
    path = tmp_path / "export.jsonl"
    path.write_text('{"instance_id": "i1"}\nnot json\n', encoding="utf-8")
    with pytest.raises(ReviewError, match=r"export\.jsonl:2"):
        load_export(path)
    with pytest.raises(ReviewError, match="not found"):
        load_export(tmp_path / "missing.jsonl")


def test_session_id_depends_only_on_spec(tmp_path):
    a = ReviewSession.create(make_pairs(), ["x"], seed=5, store_dir=tmp_path / "a")
    b = ReviewSession.create(make_pairs(), ["x"], seed=5, store_dir=tmp_path / "b")
    c = ReviewSession.create(make_pairs(), ["x"], seed=6, store_dir=tmp_path / "c")
    assert a.session_id == b.session_id
    assert a.session_id != c.session_id
    assert a.session_id.startswith("sess-") and len(a.session_id) == len("sess-") + 16


def test_blinded_payload_has_no_method_fields(session):
    state = session.next_pair("ann-1")
    assert state["done"] is False
    pair = state["pair"]
    assert set(pair) == {"pair_id", "context", "left", "right"}
    blob = json.dumps(pair)
    assert "anchored" not in blob and "plain" not in blob
    n = int(pair["pair_id"].rsplit("-", 1)[1])
    assert {pair["left"], pair["right"]} == {
        f"first candidate wording {n}",
        f"second candidate wording {n}",
    }


def test_presentation_varies_across_annotators(tmp_path):
    # with 40 pairs, identical order and identical flips for two annotators
    # would mean the per-annotator seeds collapsed
    session = ReviewSession.create(make_pairs(40), ["ann-1", "ann-2"], seed=3, store_dir=tmp_path)
    assert session.order["ann-1"] != session.order["ann-2"]
    assert session.left_is_a["ann-1"] != session.left_is_a["ann-2"]
    assert sorted(session.order["ann-1"]) == sorted(session.order["ann-2"])


def test_submit_and_resume_from_disk(tmp_path):
    session = ReviewSession.create(make_pairs(4), ["ann-1"], seed=1, store_dir=tmp_path)
    first = session.next_pair("ann-1")["pair"]["pair_id"]
    ack = session.submit_verdict("ann-1", first, "left")
    assert ack == {"ok": True, "judged": 1, "total": 4}

    reloaded = ReviewSession.load(tmp_path / session.session_id)
    assert reloaded.next_pair("ann-1")["judged"] == 1
    assert reloaded.next_pair("ann-1")["pair"]["pair_id"] != first
    with pytest.raises(AlreadyJudgedError):
        reloaded.submit_verdict("ann-1", first, "right")


def test_verdict_log_is_append_only_jsonl(tmp_path):
    session = ReviewSession.create(make_pairs(3), ["ann-1"], seed=1, store_dir=tmp_path)
    for _ in range(3):
        pid = session.next_pair("ann-1")["pair"]["pair_id"]
        session.submit_verdict("ann-1", pid, "left")
    log = (tmp_path / session.session_id / "verdicts.log").read_text(encoding="utf-8")
    rows = [json.loads(line) for line in log.splitlines()]
    assert len(rows) == 3
    assert all(r["annotator_id"] == "ann-1" and r["choice"] == "left" for r in rows)


def test_validation_errors(session):
    pid = session.next_pair("ann-1")["pair"]["pair_id"]
    with pytest.raises(ReviewError, match="unknown annotator"):
        session.next_pair("nobody")
    with pytest.raises(ReviewError, match="unknown pair"):
        session.submit_verdict("ann-1", "pair:bogus", "left")
    with pytest.raises(ReviewError, match="invalid choice"):
        session.submit_verdict("ann-1", pid, "middle")
    with pytest.raises(ReviewError, match="ties are disabled"):
        session.submit_verdict("ann-1", pid, "tie")


def test_ties_allowed_when_enabled(tmp_path):
    session = ReviewSession.create(
        make_pairs(2), ["ann-1"], seed=1, store_dir=tmp_path, allow_ties=True
    )
    pid = session.next_pair("ann-1")["pair"]["pair_id"]
    session.submit_verdict("ann-1", pid, "tie")
    report = session.aggregate()
    assert report["pooled"]["ties"] == 1
    assert report["pooled"]["non_tie"] == 0


def submit_all(session, annotator, prefer):
    """Judge every pair for one annotator, always preferring one method."""
    while True:
        state = session.next_pair(annotator)
        if state["done"]:
            return
        pid = state["pair"]["pair_id"]
        choice = "left" if session.left_is_a[annotator][pid] == (prefer == "a") else "right"
        session.submit_verdict(annotator, pid, choice)


def test_aggregate_pooled_and_majority(tmp_path):
    session = ReviewSession.create(make_pairs(10), ["ann-1", "ann-2", "ann-3"], seed=2,
                                   store_dir=tmp_path)
    submit_all(session, "ann-1", prefer="a")
    submit_all(session, "ann-2", prefer="a")
    submit_all(session, "ann-3", prefer="b")
    report = session.aggregate()
    assert report["verdict_count"] == 30
    assert report["pooled"]["counts"] == {"anchored": 20, "plain": 10}
    assert report["pooled"]["percentages"]["anchored"] == pytest.approx(200 / 3)
    # every pair goes 2-1 for method a
    maj = report["majority_per_pair"]
    assert maj["counts"] == {"anchored": 10, "plain": 0}
    assert maj["split_pairs"] == 0
    assert maj["percentages"]["anchored"] == 100.0
    assert report["agreement"]["pairs_with_multiple_judgments"] == 10
    assert report["agreement"]["unanimous_pairs"] == 0
    assert report["per_annotator"]["ann-3"]["counts"] == {"anchored": 0, "plain": 10}


def test_aggregate_requires_verdicts(session):
    with pytest.raises(ReviewError, match="no verdicts"):
        session.aggregate()


def test_store_roundtrip_and_listing(tmp_path):
    store = ReviewStore(tmp_path)
    session = store.create(make_pairs(2), ["ann-1"], seed=4)
    assert store.list_sessions() == [session.session_id]
    fresh = ReviewStore(tmp_path)
    same = fresh.get(session.session_id)
    assert same.session_id == session.session_id
    with pytest.raises(ReviewError):
        fresh.get("sess-0000000000000000")


def api_client(tmp_path, n=4):
    store = ReviewStore(tmp_path)
    session = store.create(make_pairs(n), ["ann-1", "ann-2"], seed=9)
    return TestClient(create_app(store)), session


def test_http_next_verdict_report(tmp_path):
    client, session = api_client(tmp_path)
    sid = session.session_id

    state = client.get(f"/session/{sid}/next", params={"annotator": "ann-1"}).json()
    pid = state["pair"]["pair_id"]
    assert set(state["pair"]) == {"pair_id", "context", "left", "right"}

    ok = client.post(f"/session/{sid}/verdict",
                     json={"annotator": "ann-1", "pair_id": pid, "choice": "left"})
    assert ok.status_code == 200
    assert ok.json()["judged"] == 1

    dup = client.post(f"/session/{sid}/verdict",
                      json={"annotator": "ann-1", "pair_id": pid, "choice": "left"})
    assert dup.status_code == 409
    assert dup.json() == {"error": "already judged"}

    report = client.get(f"/session/{sid}/report")
    assert report.status_code == 200
    assert report.json()["verdict_count"] == 1

    assert client.get(f"/sessions").json() == {"sessions": [sid]}


def test_http_error_codes(tmp_path):
    client, session = api_client(tmp_path)
    sid = session.session_id
    assert client.get("/session/sess-ffffffffffffffff/next",
                      params={"annotator": "ann-1"}).status_code == 404
    assert client.get(f"/session/{sid}/next", params={"annotator": "ghost"}).status_code == 404
    bad_choice = client.post(f"/session/{sid}/verdict",
                             json={"annotator": "ann-1", "pair_id": "pair:inst-000",
                                   "choice": "maybe"})
    assert bad_choice.status_code == 400
    tie = client.post(f"/session/{sid}/verdict",
                      json={"annotator": "ann-1", "pair_id": "pair:inst-000", "choice": "tie"})
    assert tie.status_code == 400
    # a missing pair_id reads as an unknown pair
    missing_fields = client.post(f"/session/{sid}/verdict", json={"annotator": "ann-1"})
    assert missing_fields.status_code == 404


def test_http_flow_to_completion(tmp_path):
    client, session = api_client(tmp_path, n=3)
    sid = session.session_id
    for annotator in ("ann-1", "ann-2"):
        while True:
            state = client.get(f"/session/{sid}/next", params={"annotator": annotator}).json()
            if state["done"]:
                break
            client.post(
                f"/session/{sid}/verdict",
                json={"annotator": annotator, "pair_id": state["pair"]["pair_id"],
                      "choice": "right"},
            )
    report = client.get(f"/session/{sid}/report").json()
    assert report["verdict_count"] == 6
    assert report["majority_per_pair"]["decided_pairs"] == 3

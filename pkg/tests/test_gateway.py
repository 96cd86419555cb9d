import json

import pytest

from anamod.errors import ConfigError, GatewayError, UnscriptedRequestError
from anamod.gateway import Gateway, ModelHandle, SamplingConfig
from anamod.mocks import FailPlan, ScriptedEndpoint


def make_gateway(tmp_path, **kwargs):
    kwargs.setdefault("sleep", lambda s: None)
    return Gateway(run_log_path=tmp_path / "log.jsonl", **kwargs)


def test_handle_rejects_unknown_kind():
    with pytest.raises(Exception):
        ModelHandle(id="m", kind="oracle", endpoint_url="http://x")


def test_missing_credential_fails_at_registration(tmp_path, monkeypatch):
    monkeypatch.delenv("ANAMOD_TEST_KEY", raising=False)
    gw = make_gateway(tmp_path)
    handle = ModelHandle(
        id="live", kind="base", endpoint_url="http://example.invalid", auth_env_var="ANAMOD_TEST_KEY"
    )
    with pytest.raises(ConfigError, match="ANAMOD_TEST_KEY"):
        gw.register_http(handle)


def test_credential_value_never_logged(tmp_path, monkeypatch):
    monkeypatch.setenv("ANAMOD_TEST_KEY", "super-secret-token")
    gw = make_gateway(tmp_path)
    handle = ModelHandle(
        id="live", kind="base", endpoint_url="http://example.invalid", auth_env_var="ANAMOD_TEST_KEY"
    )
    gw.register_http(handle)
    mock = gw.register_mock("m", "base", ScriptedEndpoint(rules=[(r"(?s).", "ok")]))
    gw.complete(mock, [("user", "hello")])
    log = (tmp_path / "log.jsonl").read_text()
    assert "super-secret-token" not in log


def test_register_mock_returns_mock_url(tmp_path):
    gw = make_gateway(tmp_path)
    handle = gw.register_mock("m1", "aux", ScriptedEndpoint(script={"q": "a"}))
    assert handle.endpoint_url == "mock://m1"
    assert gw.handle("m1") == handle


def test_duplicate_registration_rejected(tmp_path):
    gw = make_gateway(tmp_path)
    gw.register_mock("m1", "aux", ScriptedEndpoint(script={}))
    with pytest.raises(ConfigError, match="already registered"):
        gw.register_mock("m1", "aux", ScriptedEndpoint(script={}))


def test_complete_exact_match_and_logging(tmp_path):
    gw = make_gateway(tmp_path)
    handle = gw.register_mock("m", "base", ScriptedEndpoint(script={"ping": "pong"}))
    exchange = gw.complete(handle, [("system", "be brief"), ("user", "ping")], tag="t1")
    assert exchange.response == "pong"
    assert exchange.retries == 0
    rows = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(rows) == 1
    assert rows[0]["messages"] == [["system", "be brief"], ["user", "ping"]]
    assert rows[0]["response"] == "pong"
    assert rows[0]["tag"] == "t1"


def test_unscripted_request_carries_prompt(tmp_path):
    gw = make_gateway(tmp_path)
    handle = gw.register_mock("m", "base", ScriptedEndpoint(script={"a": "b"}))
    with pytest.raises(UnscriptedRequestError) as exc:
        gw.complete(handle, [("user", "something new")])
    assert exc.value.request_text == "something new"


def test_transient_failures_retried_and_counted(tmp_path):
    gw = make_gateway(tmp_path, retry_limit=3)
    endpoint = ScriptedEndpoint(script={"q": FailPlan(times=2, response="done")})
    handle = gw.register_mock("m", "base", endpoint)
    exchange = gw.complete(handle, [("user", "q")])
    assert exchange.response == "done"
    assert exchange.retries == 2


def test_retry_limit_one_errors_after_two_attempts(tmp_path):
    gw = make_gateway(tmp_path, retry_limit=1)
    endpoint = ScriptedEndpoint(script={"q": FailPlan(times=2, response="never")})
    handle = gw.register_mock("m", "base", endpoint)
    with pytest.raises(GatewayError, match="after 2 attempts"):
        gw.complete(handle, [("user", "q")])
    assert endpoint.chat_call_count == 2


def test_backoff_delays_double_up_to_cap(tmp_path):
    delays = []
    gw = Gateway(
        run_log_path=None, retry_limit=5, backoff_base=0.5, backoff_cap=2.0,
        sleep=delays.append,
    )
    endpoint = ScriptedEndpoint(script={"q": FailPlan(times=4, response="ok")})
    handle = gw.register_mock("m", "base", endpoint)
    gw.complete(handle, [("user", "q")])
    assert delays == [0.5, 1.0, 2.0, 2.0]


def test_nontransient_error_not_retried(tmp_path):
    gw = make_gateway(tmp_path, retry_limit=3)
    endpoint = ScriptedEndpoint(
        script={"q": FailPlan(times=1, response="x", error="bad request", transient=False)}
    )
    handle = gw.register_mock("m", "base", endpoint)
    with pytest.raises(GatewayError, match="bad request"):
        gw.complete(handle, [("user", "q")])
    assert endpoint.chat_call_count == 1


def test_empty_messages_rejected(tmp_path):
    gw = make_gateway(tmp_path)
    handle = gw.register_mock("m", "base", ScriptedEndpoint(script={}))
    with pytest.raises(GatewayError):
        gw.complete(handle, [])


def test_batch_preserves_order_and_isolates_failures(tmp_path):
    gw = make_gateway(tmp_path, retry_limit=0)
    endpoint = ScriptedEndpoint(
        script={
            "p0": "r0",
            "p1": FailPlan(times=5, response="never"),
            "p2": "r2",
        }
    )
    handle = gw.register_mock("m", "base", endpoint)
    slots = gw.complete_batch(handle, [[("user", f"p{i}")] for i in range(3)])
    assert slots[0].ok and slots[0].exchange.response == "r0"
    assert not slots[1].ok and isinstance(slots[1].error, GatewayError)
    assert slots[2].ok and slots[2].exchange.response == "r2"


def test_batch_respects_concurrency_bound(tmp_path):
    gw = make_gateway(tmp_path)
    endpoint = ScriptedEndpoint(rules=[(r"(?s).", "ok")], latency=0.01)
    handle = gw.register_mock("m", "base", endpoint)
    gw.complete_batch(handle, [[("user", f"p{i}")] for i in range(20)], max_in_flight=3)
    assert endpoint.high_water <= 3
    assert endpoint.chat_call_count == 20


def test_batch_runs_concurrently(tmp_path):
    gw = make_gateway(tmp_path)
    endpoint = ScriptedEndpoint(rules=[(r"(?s).", "ok")], latency=0.02)
    handle = gw.register_mock("m", "base", endpoint)
    gw.complete_batch(handle, [[("user", f"p{i}")] for i in range(8)], max_in_flight=8)
    assert endpoint.high_water > 1


def test_embed_logs_and_returns_rows(tmp_path):
    gw = make_gateway(tmp_path)
    endpoint = ScriptedEndpoint(embed_dim=8, endpoint_id="e")
    handle = gw.register_mock("e", "embedding", endpoint)
    vectors = gw.embed(handle, ["alpha", "beta"])
    assert len(vectors) == 2 and len(vectors[0]) == 8
    again = gw.embed(handle, ["alpha"])
    assert vectors[0] == again[0]
    rows = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert rows[0]["kind"] == "embed"
    assert rows[0]["texts"] == ["alpha", "beta"]


def test_sampling_config_collects_violations():
    with pytest.raises(ConfigError) as exc:
        SamplingConfig(temperature=-1, top_p=2.0, max_tokens=0)
    assert len(exc.value.violations) == 3


def test_mock_regex_rules_match_in_order(tmp_path):
    gw = make_gateway(tmp_path)
    endpoint = ScriptedEndpoint(
        script={"exact": "from-script"},
        rules=[(r"ex.*", "from-first-rule"), (r"(?s).", "catch-all")],
    )
    handle = gw.register_mock("m", "base", endpoint)
    assert gw.complete(handle, [("user", "exact")]).response == "from-script"
    assert gw.complete(handle, [("user", "extra")]).response == "from-first-rule"
    assert gw.complete(handle, [("user", "other")]).response == "catch-all"

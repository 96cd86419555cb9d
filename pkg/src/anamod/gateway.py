"""Model endpoint client: wire protocol, retries, concurrency, run logging.

All model traffic flows through one :class:`Gateway`.  Each model the
pipeline talks to (base generator, analogy-trained generator, auxiliary
reasoner, external judge, embedding encoder) is named by a
:class:`ModelHandle` and registered against a transport: either the HTTP
transport speaking the common chat-completions wire shape
(``POST <endpoint_url>/chat/completions`` and ``POST <endpoint_url>/embeddings``)
or an in-process scripted endpoint from :mod:`anamod.mocks`.  Stage code
never knows which one it got.

Policies enforced here, not per call site:

* credentials come from a named environment variable, never from config
  values or code; a missing variable fails at registration, before any
  network call
* transient failures (connect errors, timeouts, HTTP 429/5xx) retry with
  exponential backoff; anything else raises immediately
* batches run with a bounded number of in-flight requests and return
  results in input order, one slot per item, failures captured per slot
* every exchange is appended to a JSONL run log before the response is
  returned to the caller, with request and response text recorded verbatim
  so a log replay can reconstruct all pipeline inputs
"""

from __future__ import annotations

import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import requests

from .errors import ConfigError, GatewayError, TransientEndpointError
from .schema import canonical_json, sha256_hex

HANDLE_KINDS = ("base", "coa", "aux", "external", "embedding")

DEFAULT_MAX_IN_FLIGHT = 8
DEFAULT_RETRY_LIMIT = 3
DEFAULT_BACKOFF_BASE = 0.5
DEFAULT_BACKOFF_CAP = 8.0

Message = tuple[str, str]


@dataclass(frozen=True)
class ModelHandle:
    """Names one serving endpoint and its role in the pipeline.

    ``kind`` is the role: "base" for the untrained generator, "coa" for the
    analogy-trained generator, "aux" for the auxiliary reasoner, "external"
    for the rule-generalization judge, "embedding" for the encoder.  The
    handle id doubles as the model name sent on the wire.  ``auth_env_var``
    names the environment variable holding the bearer token; the credential
    itself never appears in configuration or logs.
    """

    id: str
    kind: str
    endpoint_url: str
    auth_env_var: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ConfigError("model handle id must be non-empty")
        if self.kind not in HANDLE_KINDS:
            raise ConfigError(f"model handle kind {self.kind!r} not in {HANDLE_KINDS}")


@dataclass(frozen=True)
class SamplingConfig:
    """Sampling parameters sent with every completion request."""

    temperature: float = 0.8
    top_p: float = 0.95
    top_k: int = 50
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self):
        violations = []
        if self.temperature < 0.0:
            violations.append(f"temperature {self.temperature} must be >= 0")
        if not 0.0 < self.top_p <= 1.0:
            violations.append(f"top_p {self.top_p} outside (0, 1]")
        if self.top_k < 1:
            violations.append(f"top_k {self.top_k} must be >= 1")
        if self.max_tokens < 1:
            violations.append(f"max_tokens {self.max_tokens} must be >= 1")
        if violations:
            raise ConfigError(violations)

    def to_dict(self) -> dict:
        d = {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "top_k": self.top_k,
            "max_tokens": self.max_tokens,
        }
        if self.seed is not None:
            d["seed"] = self.seed
        return d


@dataclass(frozen=True)
class ChatExchange:
    """One completed request/response round trip, as logged."""

    handle_id: str
    messages: tuple[Message, ...]
    sampling: SamplingConfig
    response: str
    usage: Mapping[str, int]
    latency: float
    retries: int = 0
    tag: str = ""

    def to_dict(self) -> dict:
        return {
            "kind": "chat",
            "handle_id": self.handle_id,
            "tag": self.tag,
            "messages": [[role, content] for role, content in self.messages],
            "sampling": self.sampling.to_dict(),
            "response": self.response,
            "usage": dict(self.usage),
            "latency": self.latency,
            "retries": self.retries,
        }


@dataclass
class BatchSlot:
    """Per-item outcome of a batched completion."""

    exchange: ChatExchange | None = None
    error: Exception | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


class HttpTransport:
    """Speaks the chat-completions HTTP wire shape for one handle."""

    def __init__(self, handle: ModelHandle, timeout: float = 60.0):
        self.handle = handle
        self.timeout = timeout
        self._headers = {"Content-Type": "application/json"}
        if handle.auth_env_var is not None:
            key = os.environ.get(handle.auth_env_var)
            if not key:
                raise ConfigError(
                    f"handle {handle.id!r}: environment variable {handle.auth_env_var} is not set"
                )
            self._headers["Authorization"] = f"Bearer {key}"
        self._session = requests.Session()

    def _post(self, path: str, payload: dict) -> dict:
        url = f"{self.handle.endpoint_url.rstrip('/')}{path}"
        try:
            resp = self._session.post(url, json=payload, headers=self._headers, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransientEndpointError(f"request to {url} failed: {exc.__class__.__name__}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientEndpointError(f"{url} returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"{url} returned HTTP {resp.status_code}: {resp.text[:400]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise GatewayError(f"{url} returned a non-JSON body") from exc

    def chat(self, messages: Sequence[Message], cfg: SamplingConfig) -> tuple[str, dict]:
        payload = {
            "model": self.handle.id,
            "messages": [{"role": r, "content": c} for r, c in messages],
            **cfg.to_dict(),
        }
        data = self._post("/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError("malformed completion response: missing choices[0].message.content") from exc
        if not isinstance(text, str):
            raise GatewayError("malformed completion response: content is not a string")
        usage = data.get("usage") or {}
        return text, {k: int(v) for k, v in usage.items() if isinstance(v, (int, float))}

    def embeddings(self, texts: Sequence[str]) -> list[list[float]]:
        data = self._post("/embeddings", {"model": self.handle.id, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda r: r["index"])
            vectors = [list(map(float, r["embedding"])) for r in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise GatewayError("malformed embeddings response") from exc
        if len(vectors) != len(texts):
            raise GatewayError(f"embeddings response has {len(vectors)} rows for {len(texts)} inputs")
        return vectors


class RunLog:
    """Append-only JSONL channel, serialized across threads."""

    def __init__(self, path: Path | None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, entry: dict) -> None:
        if self.path is None:
            return
        line = canonical_json(entry) + "\n"
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()


class Gateway:
    """Retrying, concurrency-bounded front door to all registered endpoints.

    Args:
        run_log_path: JSONL file receiving one entry per finished exchange;
            None disables logging.
        max_in_flight: default bound on concurrent requests in a batch.
        retry_limit: retries after the first attempt for transient failures.
        backoff_base: first retry delay in seconds; doubles per retry up to
            ``backoff_cap``.
        timeout: per-request timeout for HTTP transports.
        sleep: injection point for tests; defaults to ``time.sleep``.
    """

    def __init__(
        self,
        run_log_path: Path | None = None,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        retry_limit: int = DEFAULT_RETRY_LIMIT,
        backoff_base: float = DEFAULT_BACKOFF_BASE,
        backoff_cap: float = DEFAULT_BACKOFF_CAP,
        timeout: float = 60.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_in_flight < 1:
            raise ConfigError(f"max_in_flight {max_in_flight} must be >= 1")
        if retry_limit < 0:
            raise ConfigError(f"retry_limit {retry_limit} must be >= 0")
        self.max_in_flight = max_in_flight
        self.retry_limit = retry_limit
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.timeout = timeout
        self.run_log = RunLog(run_log_path)
        self._sleep = sleep
        self._transports: dict[str, object] = {}
        self._handles: dict[str, ModelHandle] = {}

    def register_http(self, handle: ModelHandle) -> ModelHandle:
        """Register a live HTTP endpoint; credential check happens here."""
        if handle.id in self._transports:
            raise ConfigError(f"handle {handle.id!r} already registered")
        self._transports[handle.id] = HttpTransport(handle, timeout=self.timeout)
        self._handles[handle.id] = handle
        return handle

    def register_mock(self, handle_id: str, kind: str, endpoint) -> ModelHandle:
        """Register an in-process endpoint (anything with chat/embeddings).

        Mock handles carry a ``mock://`` URL and need no credentials.
        """
        handle = ModelHandle(id=handle_id, kind=kind, endpoint_url=f"mock://{handle_id}")
        if handle.id in self._transports:
            raise ConfigError(f"handle {handle.id!r} already registered")
        self._transports[handle.id] = endpoint
        self._handles[handle.id] = handle
        return handle

    def handle(self, handle_id: str) -> ModelHandle:
        try:
            return self._handles[handle_id]
        except KeyError:
            raise GatewayError(f"no registered handle {handle_id!r}") from None

    def _transport(self, handle: ModelHandle):
        try:
            return self._transports[handle.id]
        except KeyError:
            raise GatewayError(f"handle {handle.id!r} is not registered with this gateway") from None

    def _retrying(self, fn: Callable[[], object], describe: str) -> tuple[object, int]:
        """Run fn with transient-error retries; returns (result, retries used)."""
        last_err: Exception | None = None
        for attempt in range(self.retry_limit + 1):
            try:
                return fn(), attempt
            except TransientEndpointError as exc:
                last_err = exc
                if attempt == self.retry_limit:
                    break
                self._sleep(min(self.backoff_base * (2**attempt), self.backoff_cap))
        raise GatewayError(
            f"{describe} failed after {self.retry_limit + 1} attempts: {last_err}"
        ) from last_err

    def complete(
        self,
        handle: ModelHandle,
        messages: Sequence[Message],
        cfg: SamplingConfig | None = None,
        tag: str = "",
    ) -> ChatExchange:
        """Run one completion with retries; logs the exchange before returning."""
        if not messages:
            raise GatewayError("complete called with an empty message list")
        cfg = cfg or SamplingConfig()
        transport = self._transport(handle)
        started = time.monotonic()
        (text, usage), retries = self._retrying(
            lambda: transport.chat(messages, cfg), f"completion via {handle.id!r}"
        )
        exchange = ChatExchange(
            handle_id=handle.id,
            messages=tuple((r, c) for r, c in messages),
            sampling=cfg,
            response=text,
            usage=usage,
            latency=time.monotonic() - started,
            retries=retries,
            tag=tag,
        )
        self.run_log.append(exchange.to_dict())
        return exchange

    def complete_batch(
        self,
        handle: ModelHandle,
        batch: Sequence[Sequence[Message]],
        cfg: SamplingConfig | None = None,
        max_in_flight: int | None = None,
        tag: str = "",
    ) -> list[BatchSlot]:
        """Run a batch concurrently; slot i always belongs to batch[i].

        At most ``max_in_flight`` requests are outstanding at once.  One
        item's failure never aborts the others: its slot carries the error.
        """
        if not batch:
            raise GatewayError("complete_batch called with an empty batch")
        bound = max_in_flight if max_in_flight is not None else self.max_in_flight
        if bound < 1:
            raise GatewayError(f"max_in_flight {bound} must be >= 1")
        slots = [BatchSlot() for _ in batch]

        def run(i: int, messages: Sequence[Message]) -> None:
            try:
                slots[i] = BatchSlot(exchange=self.complete(handle, messages, cfg, tag=tag))
            except Exception as exc:  # noqa: BLE001 - captured per slot by design
                slots[i] = BatchSlot(error=exc)

        with ThreadPoolExecutor(max_workers=min(bound, len(batch))) as pool:
            for fut in [pool.submit(run, i, m) for i, m in enumerate(batch)]:
                fut.result()
        return slots

    def embed(self, handle: ModelHandle, texts: Sequence[str], tag: str = "") -> list[list[float]]:
        """Embed texts in order through the handle's endpoint, with retries."""
        if not texts:
            raise GatewayError("embed called with an empty text list")
        transport = self._transport(handle)
        started = time.monotonic()
        vectors, retries = self._retrying(
            lambda: transport.embeddings(texts), f"embedding via {handle.id!r}"
        )
        if len(vectors) != len(texts):
            raise GatewayError(f"endpoint returned {len(vectors)} vectors for {len(texts)} texts")
        self.run_log.append(
            {
                "kind": "embed",
                "handle_id": handle.id,
                "tag": tag,
                "texts": list(texts),
                "dim": len(vectors[0]) if vectors and vectors[0] else 0,
                "response_sha256": sha256_hex(canonical_json(vectors)),
                "latency": time.monotonic() - started,
                "retries": retries,
            }
        )
        return vectors

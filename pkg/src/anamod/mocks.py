"""Scripted in-process model endpoints for deterministic offline runs.

A :class:`ScriptedEndpoint` stands in for any chat or embedding endpoint
behind the gateway.  Responses are resolved against the last user message:
exact-match entries win, then ordered regex rules, and both may map to a
fixed string, a callable, or a :class:`FailPlan` that fails a set number of
times before answering.  Unmatched requests raise a distinguished error
carrying the request text, so silent drift in prompts cannot pass a test.

Embeddings are derived from a hash of (endpoint id, text): deterministic,
spread out, and unnormalized on purpose so the normalization path in the
retrieval layer gets exercised.

The module also ships responder factories covering the whole pipeline:
``compliant_responder`` answers every prompt family the bundled templates
produce, ``rule_follower_responder`` models an external judge that obeys an
injected rule, and ``fixed_responder`` always answers one category.  The
compliant responder infers categories from the content itself, so it only
works on corpora whose texts mention exactly one schema category by name
(the synthetic corpus guarantees this).
"""

from __future__ import annotations

import hashlib
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import GatewayError, TransientEndpointError, UnscriptedRequestError
from .gateway import Message, SamplingConfig
from .prompts import extract_labeled_examples
from .schema import LabelSchema

Responder = Callable[[str], str]
ScriptValue = "str | Responder | FailPlan"


@dataclass
class FailPlan:
    """Fail the first ``times`` calls, then answer.

    ``transient`` failures are retryable by the gateway; non-transient ones
    are terminal.  Each plan instance keeps its own call counter.
    """

    times: int
    response: "str | Responder"
    error: str = "scripted timeout"
    transient: bool = True

    def __post_init__(self):
        self._failures_left = self.times

    def take(self, prompt: str) -> str:
        if self._failures_left > 0:
            self._failures_left -= 1
            if self.transient:
                raise TransientEndpointError(self.error)
            raise GatewayError(self.error)
        return _resolve(self.response, prompt)


def _resolve(value, prompt: str) -> str:
    if isinstance(value, FailPlan):
        return value.take(prompt)
    if callable(value):
        return value(prompt)
    return value


class ScriptedEndpoint:
    """Deterministic scripted chat + embedding endpoint.

    Args:
        script: exact-match table, full request text to response.
        rules: ordered (pattern, response) pairs tried after the exact
            table; patterns are regex searched against the request text.
        embed_dim: dimensionality of the hash-seeded embedding vectors.
        endpoint_id: salt for the embedding hash; two endpoints with
            different ids embed the same text differently.
        latency: seconds to sleep inside each chat call, or a callable
            prompt -> seconds; used to scramble completion order in
            concurrency tests.
    """

    def __init__(
        self,
        script: Mapping[str, object] | None = None,
        rules: Sequence[tuple[str | re.Pattern, object]] | None = None,
        embed_dim: int = 32,
        endpoint_id: str = "mock",
        latency: float | Callable[[str], float] = 0.0,
    ):
        self.script = dict(script or {})
        self.rules = [(re.compile(p) if isinstance(p, str) else p, v) for p, v in (rules or [])]
        self.embed_dim = embed_dim
        self.endpoint_id = endpoint_id
        self.latency = latency
        self.chat_calls: list[str] = []
        self.embed_calls: list[list[str]] = []
        self._lock = threading.Lock()
        self._in_flight = 0
        self.high_water = 0

    def _enter(self) -> None:
        with self._lock:
            self._in_flight += 1
            self.high_water = max(self.high_water, self._in_flight)

    def _exit(self) -> None:
        with self._lock:
            self._in_flight -= 1

    def _match(self, prompt: str):
        if prompt in self.script:
            return self.script[prompt]
        for pattern, value in self.rules:
            if pattern.search(prompt):
                return value
        raise UnscriptedRequestError(prompt)

    def chat(self, messages: Sequence[Message], cfg: SamplingConfig) -> tuple[str, dict]:
        prompt = messages[-1][1]
        self._enter()
        try:
            delay = self.latency(prompt) if callable(self.latency) else self.latency
            if delay:
                time.sleep(delay)
            # FailPlan counters mutate on resolve, so match + resolve stay
            # under one lock; responders are pure and cheap by contract
            with self._lock:
                self.chat_calls.append(prompt)
                text = _resolve(self._match(prompt), prompt)
            usage = {
                "prompt_tokens": len(prompt.split()),
                "completion_tokens": len(text.split()),
            }
            return text, usage
        finally:
            self._exit()

    def embeddings(self, texts: Sequence[str]) -> list[list[float]]:
        with self._lock:
            self.embed_calls.append(list(texts))
        out = []
        for text in texts:
            digest = hashlib.sha256(f"{self.endpoint_id}\x00{text}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            out.append([float(x) for x in rng.standard_normal(self.embed_dim)])
        return out

    @property
    def chat_call_count(self) -> int:
        return len(self.chat_calls)

    @property
    def embed_request_count(self) -> int:
        return len(self.embed_calls)


# Prompt-family detection below keys off fixed phrases in the bundled
# templates; a custom template directory that drops them also needs its
# own responders.

_GOLD_RE = re.compile(r"^Gold label:\s*(.+?)\s*$", re.MULTILINE)
_COUNT_RE = re.compile(r"exactly (\d+) cases")
_CONTENT_RE = re.compile(r"^Content:\n(.*?)(?:\n\n|\Z)", re.MULTILINE | re.DOTALL)
_RULE_BLOCK_RE = re.compile(r"^Moderation rule:\n(.*?)(?:\n\n|\Z)", re.MULTILINE | re.DOTALL)


def _content_block(prompt: str) -> str:
    m = _CONTENT_RE.search(prompt)
    return m.group(1) if m else ""


def _category_in(text: str, schema: LabelSchema) -> str | None:
    """Schema category mentioned in the text, longest name first.

    Longest-first keeps a category whose name contains another's (say
    "Spam" and "SpamAds") from being shadowed by the shorter one.
    """
    folded = text.casefold()
    for cat in sorted(schema.categories, key=len, reverse=True):
        if cat.casefold() in folded:
            return cat
    return None


def compliant_responder(schema: LabelSchema) -> Responder:
    """One responder for every prompt family, always agreeing with gold.

    Detection order matters: the reasoning-synthesis prompt contains both a
    rule block and a gold line, so it is checked before the families that
    carry only one of them.
    """

    fallback = schema.harmless_category or schema.categories[0]

    def infer(prompt: str) -> str:
        return _category_in(_content_block(prompt), schema) or fallback

    def respond(prompt: str) -> str:
        gold_match = _GOLD_RE.search(prompt)
        gold = gold_match.group(1) if gold_match else None

        if "Moderation rule:" in prompt and gold is not None:
            # reasoning synthesis: apply the rule, agree with gold
            return (
                f"The rule stated above covers exactly this situation: the content "
                f"exhibits the traits the rule names, and the analogous cases were "
                f"resolved the same way. The {gold} category therefore applies.\n"
                f"Decision: {gold}"
            )
        if "state the rule" in prompt:
            # rule induction: no gold is given, infer from the content
            cat = infer(prompt)
            return (
                f"The analogous cases share one governing principle.\n"
                f"RULE: Content that centers on {cat} material belongs to the "
                f"{cat} category. END\n"
                f"Category: {cat}"
            )
        if gold is not None:
            # analogy-augmented chain generation; cite the cases so the
            # output text depends on which analogies were supplied
            pairs = extract_labeled_examples(prompt)
            cites = [
                f"Case {j}, previously judged {label}: {text}"
                for j, (text, label) in enumerate(pairs, start=1)
            ]
            body = "\n".join(cites) if cites else "No comparable cases were cited."
            return (
                f"{body}\n"
                f"The content matches the cited cases on the relevant points, "
                f"and they resolve to {gold}.\n"
                f"Decision: {gold}"
            )
        if "analogous cases that illustrate" in prompt:
            # virtual analogy generation
            cat = infer(prompt)
            count_match = _COUNT_RE.search(prompt)
            n = int(count_match.group(1)) if count_match else 3
            lines = []
            for j in range(1, n + 1):
                lines.append(f"Example {j}: A post presenting {cat} material in setting {j}.")
                lines.append(f"Label: {cat}")
            return "\n".join(lines)
        if "Moderation rule:" in prompt:
            # rule application on unseen content: obey the injected rule
            rule_match = _RULE_BLOCK_RE.search(prompt)
            cat = _category_in(rule_match.group(1), schema) if rule_match else None
            return f"Decision: {cat or infer(prompt)}"
        # bare chain-of-thought query
        return f"The content plainly concerns this area.\nDecision: {infer(prompt)}"

    return respond


def rule_follower_responder(schema: LabelSchema, fallback: str | None = None) -> Responder:
    """External judge that obeys an injected rule and otherwise guesses fixed.

    With a rule block naming a category it answers that category; without
    one (or with a rule that names none) it falls back to a constant, which
    is the scripted baseline the no-rule condition scores against.
    """
    fb = fallback or schema.harmless_category or schema.categories[0]
    if fb not in schema:
        raise ValueError(f"fallback {fb!r} not in schema {schema.name!r}")

    def respond(prompt: str) -> str:
        rule_match = _RULE_BLOCK_RE.search(prompt)
        if rule_match:
            cat = _category_in(rule_match.group(1), schema)
            if cat is not None:
                return f"Applying the stated rule to the content.\nDecision: {cat}"
        return f"Without further guidance this looks unremarkable.\nDecision: {fb}"

    return respond


def fixed_responder(category: str) -> Responder:
    """Always answers the same category, whatever the prompt."""

    def respond(prompt: str) -> str:
        return f"Decision: {category}"

    return respond


def compliant_endpoint(schema: LabelSchema, endpoint_id: str = "mock", embed_dim: int = 32) -> ScriptedEndpoint:
    """Endpoint wrapping :func:`compliant_responder` as a catch-all rule."""
    return ScriptedEndpoint(
        rules=[(re.compile(r"(?s)."), compliant_responder(schema))],
        embed_dim=embed_dim,
        endpoint_id=endpoint_id,
    )

"""Stage 3: reasoning synthesis and the hierarchical chain format.

The auxiliary model gets instance, analogy block, accepted rule, and gold
label, and writes the full reasoning; outputs failing the label gate are
quarantined.  Survivors are serialized into the reserved-marker layout

    <RULE>…</RULE>
    <ANALOGY>…</ANALOGY>
    <REASONING>…</REASONING>
    Decision: <category>

which is the completion format of the refined training dataset.  The
grammar is strict and round-trip safe: section contents are escaped
(backslashes doubled, then reserved tags backslash-prefixed) so adversarial
content containing tag strings survives parse(assemble(x)) = x, and the
parser rejects missing, duplicated, out-of-order, or unbalanced tags with
the first offending byte offset.  A terminal decision line follows the
three sections so greedy decoding ends on the label.

The markers are reserved text, not tokenizer tokens; registering them as
special tokens is the external trainer's option.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import ChainFormatError, ConfigError, PipelineError
from .gateway import Gateway, ModelHandle, SamplingConfig
from .prompts import TemplateLibrary, categories_line, render_analogy_block
from .schema import (
    AnalogyExample,
    LabelSchema,
    ModerationInstance,
    QuarantineReport,
    SftRecord,
)
from .stage1 import moderation_query
from .stage2 import ModerationRule, verify_label_consistency

SECTION_ORDER = ("rule", "analogy", "reasoning")
OPEN_TAG = {"rule": "<RULE>", "analogy": "<ANALOGY>", "reasoning": "<REASONING>"}
CLOSE_TAG = {"rule": "</RULE>", "analogy": "</ANALOGY>", "reasoning": "</REASONING>"}
# longest first so tag detection never truncates a closing tag to its opener
RESERVED_TAGS = tuple(
    sorted([*OPEN_TAG.values(), *CLOSE_TAG.values()], key=len, reverse=True)
)
DECISION_PREFIX = "Decision: "


@dataclass(frozen=True)
class HierarchicalChain:
    """Parsed form of one refined completion."""

    rule: str
    analogy: str
    reasoning: str
    decision: str

    def __post_init__(self):
        for name in SECTION_ORDER:
            if not getattr(self, name):
                raise ChainFormatError(f"empty section: {name}")
        if not self.decision or "\n" in self.decision:
            raise ChainFormatError("decision must be a non-empty single line")


def escape_section(content: str) -> str:
    """Double backslashes, then backslash-prefix every reserved tag.

    Doubling first makes unescaping unambiguous: on parse, a backslash
    followed by a backslash is one literal backslash, a backslash followed
    by a reserved tag is that literal tag.
    """
    out = content.replace("\\", "\\\\")
    for tag in RESERVED_TAGS:
        out = out.replace(tag, "\\" + tag)
    return out


def _tag_at(text: str, pos: int) -> str | None:
    for tag in RESERVED_TAGS:
        if text.startswith(tag, pos):
            return tag
    return None


def assemble_hierarchical_chain(rule: str, analogy: str, reasoning: str, decision: str) -> str:
    """Serialize sections and decision into the reserved-marker layout."""
    sections = {"rule": rule, "analogy": analogy, "reasoning": reasoning}
    for name in SECTION_ORDER:
        if not sections[name]:
            raise ChainFormatError(f"empty section: {name}")
    if not decision or "\n" in decision:
        raise ChainFormatError("decision must be a non-empty single line")
    if _contains_reserved(decision) or "\\" in decision:
        raise ChainFormatError("decision must not contain reserved tags or backslashes")
    parts = [
        f"{OPEN_TAG[name]}{escape_section(sections[name])}{CLOSE_TAG[name]}"
        for name in SECTION_ORDER
    ]
    return "\n".join(parts) + f"\n{DECISION_PREFIX}{decision}"


def _contains_reserved(text: str) -> bool:
    return any(tag in text for tag in RESERVED_TAGS)


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


def _scan_section(text: str, pos: int, name: str) -> tuple[str, int]:
    """Unescape content from pos up to this section's closing tag."""
    close = CLOSE_TAG[name]
    opener = OPEN_TAG[name]
    out: list[str] = []
    n = len(text)
    content_start = pos
    while pos < n:
        ch = text[pos]
        if ch == "\\":
            nxt = pos + 1
            if text.startswith("\\", nxt):
                out.append("\\")
                pos += 2
                continue
            tag = _tag_at(text, nxt)
            if tag is not None:
                out.append(tag)
                pos = nxt + len(tag)
                continue
            out.append("\\")
            pos += 1
            continue
        tag = _tag_at(text, pos)
        if tag is not None:
            if tag == close:
                content = "".join(out)
                if not content:
                    raise ChainFormatError(
                        f"empty section: {name}", offset=_byte_offset(text, content_start)
                    )
                return content, pos + len(tag)
            if tag == opener:
                raise ChainFormatError(
                    f"duplicate {opener}", offset=_byte_offset(text, pos), expected=close
                )
            raise ChainFormatError(
                f"expected {close}", offset=_byte_offset(text, pos), expected=close
            )
        out.append(ch)
        pos += 1
    raise ChainFormatError(f"expected {close}", offset=_byte_offset(text, n), expected=close)


def _parse_one(text: str, pos: int, stream: bool) -> tuple[HierarchicalChain, int]:
    sections: dict[str, str] = {}
    seen_opens: set[str] = set()
    for name in SECTION_ORDER:
        opener = OPEN_TAG[name]
        if not text.startswith(opener, pos):
            actual = _tag_at(text, pos)
            if actual is not None and actual in seen_opens:
                raise ChainFormatError(
                    f"duplicate {actual}", offset=_byte_offset(text, pos), expected=opener
                )
            raise ChainFormatError(
                f"expected {opener}", offset=_byte_offset(text, pos), expected=opener
            )
        seen_opens.add(opener)
        pos += len(opener)
        sections[name], pos = _scan_section(text, pos, name)
        if not text.startswith("\n", pos):
            raise ChainFormatError(
                f"expected line feed after {CLOSE_TAG[name]}",
                offset=_byte_offset(text, pos),
                expected="\n",
            )
        pos += 1
    if not text.startswith(DECISION_PREFIX, pos):
        actual = _tag_at(text, pos)
        if actual is not None and actual in seen_opens:
            raise ChainFormatError(
                f"duplicate {actual}", offset=_byte_offset(text, pos), expected=DECISION_PREFIX
            )
        raise ChainFormatError(
            f"expected {DECISION_PREFIX!r}", offset=_byte_offset(text, pos), expected=DECISION_PREFIX
        )
    pos += len(DECISION_PREFIX)

    end = text.find("\n", pos)
    if end < 0:
        end = len(text)
    if stream:
        # plain concatenation puts the next chain's opener right after the
        # category, so the category also ends at an unescaped <RULE>
        nxt = text.find(OPEN_TAG["rule"], pos)
        if 0 <= nxt < end:
            end = nxt
    decision = text[pos:end]
    if not decision:
        raise ChainFormatError(
            "expected category after decision prefix", offset=_byte_offset(text, pos)
        )
    chain = HierarchicalChain(
        rule=sections["rule"],
        analogy=sections["analogy"],
        reasoning=sections["reasoning"],
        decision=decision,
    )
    return chain, end


def parse_hierarchical_chain(text: str) -> HierarchicalChain:
    """Strict inverse of assemble over a single serialized chain.

    One trailing line feed is tolerated; anything else after the decision
    line is an error at its byte offset.
    """
    chain, pos = _parse_one(text, 0, stream=False)
    rest = text[pos:]
    if rest not in ("", "\n"):
        raise ChainFormatError("trailing content after chain", offset=_byte_offset(text, pos))
    if _contains_reserved(chain.decision):
        raise ChainFormatError(
            "reserved tag inside decision", offset=_byte_offset(text, len(text))
        )
    return chain


def split_chains(text: str) -> list[HierarchicalChain]:
    """Parse a stream of concatenated chains, plain or newline-joined.

    The grammar is prefix-unambiguous, so splitting the concatenation of
    serialized chains recovers each original.
    """
    chains: list[HierarchicalChain] = []
    pos = 0
    n = len(text)
    while pos < n:
        chain, pos = _parse_one(text, pos, stream=True)
        chains.append(chain)
        if pos < n and text.startswith("\n", pos):
            pos += 1
    if not chains:
        raise ChainFormatError("empty chain stream", offset=0)
    return chains


_TRAILING_DECISION_RE = re.compile(
    r"\n?\s*(?:decision|category)\s*:\s*[^\n]*\s*$", re.IGNORECASE
)


def strip_trailing_decision(text: str) -> str:
    """Drop one trailing decision line; the chain appends its own."""
    return _TRAILING_DECISION_RE.sub("", text)


def synthesis_prompt(
    inst: ModerationInstance,
    analogies: Sequence[AnalogyExample],
    rule: ModerationRule,
    gold: str,
    templates: TemplateLibrary,
    schema: LabelSchema,
) -> str:
    if not analogies:
        raise PipelineError(f"reasoning synthesis for {inst.id!r} requires analogies")
    return templates.get("reasoning_synthesis").render(
        categories=categories_line(schema.categories),
        rule=rule.text,
        analogies=render_analogy_block(analogies),
        text=inst.text,
        label=gold,
    )


def synthesize_reasoning(
    gateway: Gateway,
    handle: ModelHandle,
    inst: ModerationInstance,
    analogies: Sequence[AnalogyExample],
    rule: ModerationRule,
    gold: str,
    templates: TemplateLibrary,
    schema: LabelSchema,
    sampling: SamplingConfig | None = None,
) -> str:
    """One synthesis call; the caller still owes the consistency gate."""
    if rule.status != "accepted":
        raise PipelineError(
            f"rule {rule.rule_id!r} has status {rule.status!r}; synthesis needs an accepted rule"
        )
    prompt = synthesis_prompt(inst, analogies, rule, gold, templates, schema)
    exchange = gateway.complete(handle, [("user", prompt)], cfg=sampling, tag=f"stage3:{inst.id}")
    return exchange.response


def emit_refined_dataset(
    corpus: Sequence[ModerationInstance],
    rules: Sequence[ModerationRule] | Mapping[str, ModerationRule],
    analogies: Mapping[str, Sequence[AnalogyExample]],
    gateway: Gateway,
    aux_handle: ModelHandle,
    templates: TemplateLibrary,
    schema: LabelSchema,
    sampling: SamplingConfig | None = None,
    max_in_flight: int | None = None,
) -> tuple[list[SftRecord], QuarantineReport, dict[str, dict]]:
    """Produce the refined SFT dataset plus per-record provenance links.

    Instances without an accepted rule are skipped with a reason; every
    emitted completion parses back and carries the gold decision.  The
    links map records each kept instance to its rule id and analogy ids
    for the run manifest.
    """
    if not corpus:
        raise ConfigError("corpus is empty")
    if not isinstance(rules, Mapping):
        rules = {r.instance_id: r for r in rules}

    quarantine = QuarantineReport()
    workload: list[tuple[ModerationInstance, ModerationRule, list[AnalogyExample]]] = []
    for inst in corpus:
        rule = rules.get(inst.id)
        if rule is None:
            quarantine.add(inst.id, "no rule")
            continue
        if rule.status != "accepted":
            quarantine.add(inst.id, "no accepted rule", detail=f"rule status {rule.status!r}")
            continue
        inst_analogies = list(analogies.get(inst.id, ()))
        if not inst_analogies:
            quarantine.add(inst.id, "no analogies")
            continue
        workload.append((inst, rule, inst_analogies))

    records: list[SftRecord] = []
    links: dict[str, dict] = {}
    if workload:
        slots = gateway.complete_batch(
            aux_handle,
            [
                [("user", synthesis_prompt(inst, inst_analogies, rule, inst.label, templates, schema))]
                for inst, rule, inst_analogies in workload
            ],
            cfg=sampling,
            max_in_flight=max_in_flight,
            tag="stage3",
        )
        for (inst, rule, inst_analogies), slot in zip(workload, slots):
            if not slot.ok:
                quarantine.add(inst.id, "gateway error", detail=str(slot.error))
                continue
            output = slot.exchange.response
            verdict = verify_label_consistency(output, inst.label, schema, instance_id=inst.id)
            if not verdict.consistent:
                quarantine.add(
                    inst.id,
                    "inconsistent reasoning",
                    detail=f"asserted {verdict.extracted_category!r}, gold {inst.label!r}",
                )
                continue
            reasoning = strip_trailing_decision(output)
            if not reasoning:
                quarantine.add(inst.id, "empty reasoning")
                continue
            try:
                chain = assemble_hierarchical_chain(
                    rule=rule.text,
                    analogy=render_analogy_block(inst_analogies),
                    reasoning=reasoning,
                    decision=inst.label,
                )
                parse_hierarchical_chain(chain)
            except ChainFormatError as exc:
                quarantine.add(inst.id, "assembly error", detail=str(exc))
                continue
            records.append(
                SftRecord(
                    instance_id=inst.id,
                    prompt=moderation_query(inst, templates, schema),
                    completion=chain,
                    stage="stage3",
                    label=inst.label,
                )
            )
            links[inst.id] = {"rule_id": rule.rule_id, "analogy_ids": [ex.id for ex in inst_analogies]}
    return records, quarantine, links

"""Stage 2: virtual analogy generation, rule induction, and the label gate.

The stage-1-trained model produces analogy examples for each instance on
its own (no retrieval, no gold label in the prompt); the auxiliary
reasoner then distills an explicit moderation rule from instance plus
analogies, again without seeing the gold label.  The automated gate
compares the category asserted in the auxiliary model's full output
against the gold label and discards mismatches; everything unparseable is
discarded too, never accepted.  An optional seeded random sample of the
accepted rules is flagged for manual review and exported for the review
workflow.

Every induced rule lands in exactly one of {accepted, discarded,
pending_review}; instances that never got as far as a rule (no parseable
analogies, gateway failure) are quarantined so the stage's outputs always
partition the corpus.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ConfigError, DatasetError, PipelineError
from .evaluation import extract_label
from .gateway import Gateway, ModelHandle, SamplingConfig
from .prompts import TemplateLibrary, categories_line, extract_labeled_examples, render_analogy_block
from .schema import (
    AnalogyExample,
    LabelSchema,
    ModerationInstance,
    QuarantineReport,
    atomic_write_bytes,
    canonical_json,
)

RULE_STATUSES = ("pending", "accepted", "discarded", "pending_review")
NO_ANALOGIES_PARSED = "no analogies parsed"
DEFAULT_ANALOGY_COUNT = 4


@dataclass(frozen=True)
class ModerationRule:
    """One induced rule with provenance and gate outcome.

    ``raw_output`` holds the full auxiliary-model output the gate ran on;
    it is transient working state and never serialized into the ledger.
    """

    rule_id: str
    instance_id: str
    text: str
    analogy_ids: tuple[str, ...]
    inducer_model: str
    status: str = "pending"
    reason: str = ""
    raw_output: str = field(default="", repr=False, compare=False)

    def __post_init__(self):
        if self.status not in RULE_STATUSES:
            raise DatasetError(f"invalid rule status {self.status!r}")
        if self.status == "accepted" and not self.text:
            raise DatasetError(f"accepted rule {self.rule_id!r} has empty text")
        if self.status == "discarded" and not self.reason:
            raise DatasetError(f"discarded rule {self.rule_id!r} carries no reason")

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "instance_id": self.instance_id,
            "text": self.text,
            "analogy_ids": list(self.analogy_ids),
            "inducer_model": self.inducer_model,
            "status": self.status,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModerationRule":
        return cls(
            rule_id=d["rule_id"],
            instance_id=d["instance_id"],
            text=d["text"],
            analogy_ids=tuple(d["analogy_ids"]),
            inducer_model=d["inducer_model"],
            status=d["status"],
            reason=d.get("reason", ""),
        )


@dataclass(frozen=True)
class ConsistencyVerdict:
    """Outcome of the automated label gate for one instance."""

    instance_id: str
    extracted_category: str | None
    gold: str
    consistent: bool


def verify_label_consistency(
    model_output: str,
    gold: str,
    schema: LabelSchema,
    instance_id: str = "",
) -> ConsistencyVerdict:
    """Gate check: does the output's asserted category match the gold label?

    Total over arbitrary text; no assertion found means inconsistent
    (fail-closed).
    """
    extracted = extract_label(model_output, schema)
    return ConsistencyVerdict(
        instance_id=instance_id,
        extracted_category=extracted,
        gold=gold,
        consistent=extracted is not None and extracted == gold,
    )


def virtual_analogy_prompt(
    inst: ModerationInstance, templates: TemplateLibrary, schema: LabelSchema, count: int
) -> str:
    return templates.get("virtual_analogy").render(
        categories=categories_line(schema.categories), text=inst.text, count=count
    )


def parse_virtual_analogies(
    output: str, inst_id: str, schema: LabelSchema
) -> list[AnalogyExample]:
    """Model output -> generated AnalogyExamples with virt-prefixed ids.

    Pairs whose label is not a schema category are dropped; zero usable
    pairs is an error so the instance can be skipped with a reason.
    """
    examples: list[AnalogyExample] = []
    for text, label in extract_labeled_examples(output):
        canonical = schema.canonical(label)
        if canonical is None:
            continue
        examples.append(
            AnalogyExample(
                id=f"virt:{inst_id}:{len(examples) + 1}",
                text=text,
                label=canonical,
                origin="generated",
            )
        )
    if not examples:
        raise PipelineError(NO_ANALOGIES_PARSED)
    return examples


def generate_virtual_analogies(
    gateway: Gateway,
    handle: ModelHandle,
    inst: ModerationInstance,
    templates: TemplateLibrary,
    schema: LabelSchema,
    count: int = DEFAULT_ANALOGY_COUNT,
    sampling: SamplingConfig | None = None,
) -> list[AnalogyExample]:
    """Ask the stage-1-trained model for analogy examples, label unseen."""
    if handle.kind != "coa":
        raise ConfigError(f"virtual analogy generation requires a coa handle, got kind={handle.kind!r}")
    if count < 1:
        raise ConfigError(f"analogy count {count} must be >= 1")
    prompt = virtual_analogy_prompt(inst, templates, schema, count)
    exchange = gateway.complete(handle, [("user", prompt)], cfg=sampling, tag=f"stage2-analogies:{inst.id}")
    return parse_virtual_analogies(exchange.response, inst.id, schema)


_RULE_SPAN = ("RULE:", "END")


def extract_rule_text(output: str) -> str | None:
    """Text between the first RULE:/END marker pair, or None."""
    start = output.find(_RULE_SPAN[0])
    if start < 0:
        return None
    start += len(_RULE_SPAN[0])
    end = output.find(_RULE_SPAN[1], start)
    if end < 0:
        return None
    text = output[start:end].strip()
    return text or None


def induction_prompt(
    inst: ModerationInstance,
    analogies: Sequence[AnalogyExample],
    templates: TemplateLibrary,
    schema: LabelSchema,
) -> str:
    if not analogies:
        raise PipelineError(f"rule induction for {inst.id!r} requires analogies")
    return templates.get("rule_induction").render(
        categories=categories_line(schema.categories),
        analogies=render_analogy_block(analogies),
        text=inst.text,
    )


def induce_rule(
    gateway: Gateway,
    handle: ModelHandle,
    inst: ModerationInstance,
    analogies: Sequence[AnalogyExample],
    templates: TemplateLibrary,
    schema: LabelSchema,
    sampling: SamplingConfig | None = None,
) -> ModerationRule:
    """Distill one rule; unparseable output yields a discarded rule row."""
    prompt = induction_prompt(inst, analogies, templates, schema)
    exchange = gateway.complete(handle, [("user", prompt)], cfg=sampling, tag=f"stage2-rule:{inst.id}")
    return rule_from_output(inst, analogies, exchange.response, handle.id)


def rule_from_output(
    inst: ModerationInstance,
    analogies: Sequence[AnalogyExample],
    output: str,
    inducer_model: str,
) -> ModerationRule:
    text = extract_rule_text(output)
    if text is None:
        return ModerationRule(
            rule_id=f"rule:{inst.id}",
            instance_id=inst.id,
            text="",
            analogy_ids=tuple(ex.id for ex in analogies),
            inducer_model=inducer_model,
            status="discarded",
            reason="unparseable",
            raw_output=output,
        )
    return ModerationRule(
        rule_id=f"rule:{inst.id}",
        instance_id=inst.id,
        text=text,
        analogy_ids=tuple(ex.id for ex in analogies),
        inducer_model=inducer_model,
        status="pending",
        raw_output=output,
    )


def apply_consistency_gate(rule: ModerationRule, gold: str, schema: LabelSchema) -> tuple[ModerationRule, ConsistencyVerdict]:
    """Accept or discard a pending rule based on its output's asserted category."""
    verdict = verify_label_consistency(rule.raw_output, gold, schema, instance_id=rule.instance_id)
    if rule.status == "discarded":
        return rule, verdict
    if verdict.consistent:
        return replace(rule, status="accepted"), verdict
    asserted = verdict.extracted_category
    reason = "inconsistent category" if asserted is not None else "no category asserted"
    detail = f": asserted {asserted!r}, gold {gold!r}" if asserted is not None else ""
    return replace(rule, status="discarded", reason=reason + detail), verdict


def sample_for_manual_review(
    rules: Sequence[ModerationRule], fraction: float, seed: int
) -> list[ModerationRule]:
    """Seeded uniform sample of ceil(fraction * n) rules, flagged for review.

    Returns new rule objects with status pending_review, in ledger order.
    """
    if not rules:
        raise PipelineError("sample_for_manual_review requires at least one rule")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"review fraction {fraction} outside (0, 1]")
    n_selected = math.ceil(fraction * len(rules))
    rng = random.Random(seed)
    chosen = sorted(rng.sample(range(len(rules)), n_selected))
    return [replace(rules[i], status="pending_review") for i in chosen]


@dataclass
class Stage2Result:
    """Everything stage 2 produced, keyed for the stage-3 consumer."""

    rules: list[ModerationRule]
    analogies: dict[str, list[AnalogyExample]]
    verdicts: dict[str, ConsistencyVerdict]
    quarantine: QuarantineReport
    review_sample: list[ModerationRule]

    def accepted_rules(self) -> dict[str, ModerationRule]:
        return {r.instance_id: r for r in self.rules if r.status == "accepted"}

    def status_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.rules:
            counts[r.status] = counts.get(r.status, 0) + 1
        return counts


def run_stage2(
    corpus: Sequence[ModerationInstance],
    gateway: Gateway,
    coa_handle: ModelHandle,
    aux_handle: ModelHandle,
    templates: TemplateLibrary,
    schema: LabelSchema,
    analogy_count: int = DEFAULT_ANALOGY_COUNT,
    review_fraction: float = 0.0,
    review_seed: int = 0,
    sampling: SamplingConfig | None = None,
    max_in_flight: int | None = None,
) -> Stage2Result:
    """Full stage-2 pass: analogies, rules, gate, optional review sample."""
    if coa_handle.kind != "coa":
        raise ConfigError(f"stage 2 needs a coa handle, got kind={coa_handle.kind!r}")
    if analogy_count < 1:
        raise ConfigError(f"analogy count {analogy_count} must be >= 1")
    if not corpus:
        raise ConfigError("corpus is empty")

    quarantine = QuarantineReport()
    analogies: dict[str, list[AnalogyExample]] = {}

    slots = gateway.complete_batch(
        coa_handle,
        [[("user", virtual_analogy_prompt(inst, templates, schema, analogy_count))] for inst in corpus],
        cfg=sampling,
        max_in_flight=max_in_flight,
        tag="stage2-analogies",
    )
    with_analogies: list[ModerationInstance] = []
    for inst, slot in zip(corpus, slots):
        if not slot.ok:
            quarantine.add(inst.id, "gateway error", detail=str(slot.error))
            continue
        try:
            analogies[inst.id] = parse_virtual_analogies(slot.exchange.response, inst.id, schema)
        except PipelineError:
            quarantine.add(inst.id, NO_ANALOGIES_PARSED)
            continue
        with_analogies.append(inst)

    rules: list[ModerationRule] = []
    verdicts: dict[str, ConsistencyVerdict] = {}
    if with_analogies:
        slots = gateway.complete_batch(
            aux_handle,
            [
                [("user", induction_prompt(inst, analogies[inst.id], templates, schema))]
                for inst in with_analogies
            ],
            cfg=sampling,
            max_in_flight=max_in_flight,
            tag="stage2-rules",
        )
        for inst, slot in zip(with_analogies, slots):
            if not slot.ok:
                quarantine.add(inst.id, "gateway error", detail=str(slot.error))
                continue
            rule = rule_from_output(inst, analogies[inst.id], slot.exchange.response, aux_handle.id)
            rule, verdict = apply_consistency_gate(rule, inst.label, schema)
            rules.append(rule)
            verdicts[inst.id] = verdict

    review_sample: list[ModerationRule] = []
    if review_fraction > 0.0:
        accepted = [r for r in rules if r.status == "accepted"]
        if accepted:
            review_sample = sample_for_manual_review(accepted, review_fraction, review_seed)
            flagged = {r.rule_id for r in review_sample}
            rules = [
                replace(r, status="pending_review") if r.rule_id in flagged else r for r in rules
            ]

    return Stage2Result(
        rules=rules,
        analogies=analogies,
        verdicts=verdicts,
        quarantine=quarantine,
        review_sample=review_sample,
    )


def write_rule_ledger(rules: Sequence[ModerationRule], path: Path) -> None:
    lines = [canonical_json(r.to_dict()) for r in rules]
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8") if lines else b"")


def load_rule_ledger(path: Path) -> list[ModerationRule]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"rule ledger not found: {path}")
    rules = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rules.append(ModerationRule.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed rule row: {exc}") from exc
    return rules


def write_analogy_file(analogies: Mapping[str, Sequence[AnalogyExample]], path: Path) -> None:
    """Persist per-instance generated analogies, sorted by instance id."""
    lines = [
        canonical_json(
            {"instance_id": inst_id, "examples": [ex.to_dict() for ex in analogies[inst_id]]}
        )
        for inst_id in sorted(analogies)
    ]
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8") if lines else b"")


def load_analogy_file(path: Path) -> dict[str, list[AnalogyExample]]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"analogy file not found: {path}")
    out: dict[str, list[AnalogyExample]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out[row["instance_id"]] = [AnalogyExample.from_dict(d) for d in row["examples"]]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed analogy row: {exc}") from exc
    return out


def write_review_export(
    rules: Sequence[ModerationRule],
    corpus: Sequence[ModerationInstance],
    path: Path,
) -> int:
    """Rule rows in the exchange format the review workflow ingests."""
    context_by_id = {inst.id: inst.text for inst in corpus}
    lines = []
    for rule in rules:
        if rule.instance_id not in context_by_id:
            raise DatasetError(f"rule {rule.rule_id!r} references unknown instance {rule.instance_id!r}")
        lines.append(
            canonical_json(
                {
                    "instance_id": rule.instance_id,
                    "rule_id": rule.rule_id,
                    "rule_text": rule.text,
                    "context": context_by_id[rule.instance_id],
                }
            )
        )
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8") if lines else b"")
    return len(lines)

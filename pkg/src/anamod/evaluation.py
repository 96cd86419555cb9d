"""Scoring, decision extraction, run comparison, and rule-quality eval.

Scores are one-vs-rest per-category F1 with an unweighted macro average
over every schema category.  Zero-denominator cases (a category never
predicted, never present, or both) score 0 rather than being dropped:
dropping would inflate the average.  Unparsed outputs stay in the set and
count against every category they should have hit, for the same reason.

Decision extraction is deliberately rigid: the last line of the form
``Decision: <category>`` or ``Category: <category>`` wins, the category
must match the schema (case-insensitively), and anything else is None.
Fail-closed extraction keeps garbage completions out of training data and
out of inflated scores alike.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import EvaluationError
from .gateway import Gateway, ModelHandle, SamplingConfig
from .prompts import TemplateLibrary, categories_line
from .schema import LabelSchema, ModerationInstance

CONDITIONS = ("with_rules", "simple_rules", "no_rules")

DEFAULT_SIMPLE_RULE = (
    "Read the content and assign whichever category seems most fitting overall."
)

_DECISION_LINE_RE = re.compile(r"^\s*(?:decision|category)\s*:\s*(.+?)\s*$", re.IGNORECASE)


def extract_label(raw_output: str, schema: LabelSchema) -> str | None:
    """Category asserted by a model output, or None.

    Total and deterministic: scans every line, keeps the last decision
    line, and maps its value onto the schema case-insensitively.
    """
    found: str | None = None
    for line in raw_output.split("\n"):
        m = _DECISION_LINE_RE.match(line)
        if m is not None:
            found = m.group(1)
    if found is None:
        return None
    return schema.canonical(found)


@dataclass(frozen=True)
class PredictionRecord:
    instance_id: str
    gold: str
    raw_output: str
    predicted: str | None

    @classmethod
    def from_output(cls, instance_id: str, gold: str, raw_output: str, schema: LabelSchema) -> "PredictionRecord":
        return cls(
            instance_id=instance_id,
            gold=gold,
            raw_output=raw_output,
            predicted=extract_label(raw_output, schema),
        )


@dataclass(frozen=True)
class CategoryScore:
    precision: float
    recall: float
    f1: float
    support: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
        }


@dataclass(frozen=True)
class F1Report:
    """Per-category scores plus their unweighted macro mean."""

    schema_name: str
    categories: tuple[str, ...]
    per_category: Mapping[str, CategoryScore]
    macro_f1: float
    total: int
    unparsed: int
    condition: str | None = None

    def to_row(self) -> dict:
        row = {
            "schema": self.schema_name,
            "per_category": {c: self.per_category[c].to_dict() for c in self.categories},
            "macro_f1": self.macro_f1,
            "total": self.total,
            "unparsed": self.unparsed,
        }
        if self.condition is not None:
            row["condition"] = self.condition
        return row

    @classmethod
    def from_category_f1(
        cls,
        schema: LabelSchema,
        f1_by_category: Mapping[str, float],
        condition: str | None = None,
    ) -> "F1Report":
        """Assemble a report from externally given per-category F1 values.

        Used when only the final per-category numbers are known (published
        tables, other harnesses); the macro mean goes through the same
        aggregation as scored reports.  Precision/recall are set equal to
        f1 (exact when p = r, a placeholder otherwise) and support to 0.
        """
        missing = [c for c in schema.categories if c not in f1_by_category]
        if missing:
            raise EvaluationError(f"missing per-category values for: {', '.join(missing)}")
        per = {
            c: CategoryScore(
                precision=float(f1_by_category[c]),
                recall=float(f1_by_category[c]),
                f1=float(f1_by_category[c]),
                support=0,
            )
            for c in schema.categories
        }
        return cls(
            schema_name=schema.name,
            categories=schema.categories,
            per_category=per,
            macro_f1=_macro(per, schema.categories),
            total=0,
            unparsed=0,
            condition=condition,
        )


def _macro(per_category: Mapping[str, CategoryScore], categories: Sequence[str]) -> float:
    return sum(per_category[c].f1 for c in categories) / len(categories)


def score_predictions(
    preds: Sequence[PredictionRecord],
    schema: LabelSchema,
    condition: str | None = None,
) -> F1Report:
    """One-vs-rest F1 per category with unweighted macro average.

    Per category c: tp counts gold=c predicted=c, fp counts gold!=c
    predicted=c, fn counts gold=c predicted!=c; an unparsed prediction
    (None) matches no category, so it can only produce fn.
    """
    if not preds:
        raise EvaluationError("score_predictions requires at least one prediction")
    for p in preds:
        if p.gold not in schema:
            raise EvaluationError(f"gold label {p.gold!r} of {p.instance_id!r} not in schema {schema.name!r}")
        if p.predicted is not None and p.predicted not in schema:
            raise EvaluationError(
                f"predicted label {p.predicted!r} of {p.instance_id!r} not in schema {schema.name!r}"
            )

    per: dict[str, CategoryScore] = {}
    for cat in schema.categories:
        tp = sum(1 for p in preds if p.gold == cat and p.predicted == cat)
        fp = sum(1 for p in preds if p.gold != cat and p.predicted == cat)
        fn = sum(1 for p in preds if p.gold == cat and p.predicted != cat)
        precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
        recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
        f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) > 0 else 0.0
        per[cat] = CategoryScore(precision=precision, recall=recall, f1=f1, support=tp + fn)

    return F1Report(
        schema_name=schema.name,
        categories=schema.categories,
        per_category=per,
        macro_f1=_macro(per, schema.categories),
        total=len(preds),
        unparsed=sum(1 for p in preds if p.predicted is None),
        condition=condition,
    )


def _fmt(value: float) -> str:
    return f"{value * 100:.1f}"


def _fmt_delta(delta: float) -> str:
    return f"({delta * 100:+.1f})"


def render_report(report: F1Report) -> str:
    """Aligned text table: one column per category plus the macro average."""
    headers = list(report.categories) + ["Average"]
    values = [_fmt(report.per_category[c].f1) for c in report.categories] + [_fmt(report.macro_f1)]
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    body = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return f"{head}\n{body}"


@dataclass(frozen=True)
class DeltaCell:
    value: float
    delta: float | None  # None on the baseline row

    def render(self) -> str:
        if self.delta is None:
            return _fmt(self.value)
        return f"{_fmt(self.value)} {_fmt_delta(self.delta)}"


@dataclass(frozen=True)
class DeltaTable:
    """Run comparison: per-category and macro values with signed deltas."""

    baseline: str
    categories: tuple[str, ...]
    rows: tuple[tuple[str, Mapping[str, DeltaCell], DeltaCell], ...]

    def render(self) -> str:
        headers = ["run"] + list(self.categories) + ["Average"]
        table_rows = []
        for name, cells, macro in self.rows:
            table_rows.append([name] + [cells[c].render() for c in self.categories] + [macro.render()])
        widths = [
            max(len(headers[i]), *(len(r[i]) for r in table_rows)) for i in range(len(headers))
        ]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
        for r in table_rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        return "\n".join(lines)

    def to_rows(self) -> list[dict]:
        out = []
        for name, cells, macro in self.rows:
            row = {
                "run": name,
                "baseline": self.baseline,
                "macro_f1": macro.value,
                "macro_delta": macro.delta,
                "per_category": {
                    c: {"f1": cells[c].value, "delta": cells[c].delta} for c in self.categories
                },
            }
            out.append(row)
        return out


def compare_runs(
    reports: Sequence[tuple[str, F1Report]],
    baseline: str | None = None,
) -> DeltaTable:
    """Signed differences of every run against a designated baseline run."""
    if len(reports) < 2:
        raise EvaluationError("compare_runs requires at least two reports")
    names = [name for name, _ in reports]
    if len(set(names)) != len(names):
        raise EvaluationError("duplicate run names")
    first_schema = reports[0][1].schema_name
    first_cats = reports[0][1].categories
    for name, rep in reports:
        if rep.schema_name != first_schema or rep.categories != first_cats:
            raise EvaluationError(
                f"run {name!r} scored under schema {rep.schema_name!r}, expected {first_schema!r}"
            )
    baseline = baseline if baseline is not None else names[0]
    if baseline not in names:
        raise EvaluationError(f"baseline {baseline!r} is not among the runs")
    base_report = dict(reports)[baseline]

    rows = []
    for name, rep in reports:
        is_base = name == baseline
        cells = {
            c: DeltaCell(
                value=rep.per_category[c].f1,
                delta=None if is_base else rep.per_category[c].f1 - base_report.per_category[c].f1,
            )
            for c in first_cats
        }
        macro = DeltaCell(
            value=rep.macro_f1,
            delta=None if is_base else rep.macro_f1 - base_report.macro_f1,
        )
        rows.append((name, cells, macro))
    return DeltaTable(baseline=baseline, categories=first_cats, rows=tuple(rows))


def _rule_text(rule: object) -> str:
    text = getattr(rule, "text", rule)
    return text if isinstance(text, str) else ""


def rule_generalization_eval(
    gateway: Gateway,
    handle: ModelHandle,
    rules: Mapping[str, object] | None,
    testset: Sequence[ModerationInstance],
    templates: TemplateLibrary,
    schema: LabelSchema,
    condition: str,
    sampling: SamplingConfig | None = None,
    simple_rule_text: str = DEFAULT_SIMPLE_RULE,
) -> F1Report:
    """Score an external model on the test set under one rule condition.

    ``with_rules`` injects each instance's induced rule into the prompt,
    ``simple_rules`` injects one generic rule for every instance, and
    ``no_rules`` asks the bare moderation query.  Rule values may be plain
    strings or any object with a ``text`` attribute.  Per-item gateway
    failures become unparsed predictions rather than aborting the run.
    """
    if condition not in CONDITIONS:
        raise EvaluationError(f"condition {condition!r} not in {CONDITIONS}")
    if not testset:
        raise EvaluationError("rule_generalization_eval requires a non-empty test set")
    cats = categories_line(schema.categories)

    prompts: list[str] = []
    for inst in testset:
        if condition == "no_rules":
            prompts.append(templates.get("cot").render(categories=cats, text=inst.text))
            continue
        if condition == "with_rules":
            rule_text = _rule_text((rules or {}).get(inst.id))
            if not rule_text:
                raise EvaluationError(f"missing rule for test instance {inst.id!r}")
        else:
            rule_text = simple_rule_text
        prompts.append(
            templates.get("rule_generalization").render(categories=cats, rule=rule_text, text=inst.text)
        )

    slots = gateway.complete_batch(
        handle,
        [[("user", p)] for p in prompts],
        cfg=sampling,
        tag=f"rule_eval:{condition}",
    )
    preds = []
    for inst, slot in zip(testset, slots):
        raw = slot.exchange.response if slot.ok else f"[gateway error: {slot.error}]"
        preds.append(PredictionRecord.from_output(inst.id, inst.label, raw, schema))
    return score_predictions(preds, schema, condition=condition)


def run_condition_suite(
    gateway: Gateway,
    handle: ModelHandle,
    rules: Mapping[str, object],
    testset: Sequence[ModerationInstance],
    templates: TemplateLibrary,
    schema: LabelSchema,
    sampling: SamplingConfig | None = None,
    simple_rule_text: str = DEFAULT_SIMPLE_RULE,
) -> list[F1Report]:
    """All three rule conditions against the same model and test set."""
    return [
        rule_generalization_eval(
            gateway, handle, rules, testset, templates, schema, condition,
            sampling=sampling, simple_rule_text=simple_rule_text,
        )
        for condition in CONDITIONS
    ]


def render_condition_table(reports: Sequence[F1Report]) -> str:
    """Comparison table keyed by condition, one row per report."""
    if not reports:
        raise EvaluationError("render_condition_table requires at least one report")
    cats = reports[0].categories
    headers = ["condition"] + list(cats) + ["Average"]
    rows = []
    for rep in reports:
        if rep.categories != cats:
            raise EvaluationError("reports span different category sets")
        rows.append(
            [rep.condition or "-"]
            + [_fmt(rep.per_category[c].f1) for c in cats]
            + [_fmt(rep.macro_f1)]
        )
    widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)

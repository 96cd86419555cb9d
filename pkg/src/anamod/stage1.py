"""Stage 1: analogy-augmented chain generation over the corpus.

For every training instance the stage retrieves its analogy set (nearest
neighbors by default, seeded uniform sampling under the ablation policy),
prompts the base model with the instance, its gold label, and the labeled
analogy block, and collects the returned reasoning chain.  Chains whose
final decision is missing or contradicts the gold label are quarantined,
never kept: the emitted records become supervised training data for the
gold label, so a disagreeing chain is corrupt by construction.

The emitted record pairs the bare moderation query with the chain as
completion.  The analogy block is deliberately absent from the prompt
side: the trained model must learn to produce analogies itself, so they
exist only inside the completion text.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError, PipelineError, RetrievalError
from .evaluation import extract_label
from .gateway import Gateway, ModelHandle, SamplingConfig
from .prompts import TemplateLibrary, categories_line, render_analogy_block
from .retrieval import (
    RetrievalResult,
    VectorIndex,
    index_covers,
    random_sample,
    retrieve_analogies,
)
from .schema import (
    LabelSchema,
    ModerationInstance,
    QuarantineReport,
    SftRecord,
    derive_seed,
)

RETRIEVAL_POLICIES = ("knn", "random")
DEFAULT_K = 32


@dataclass(frozen=True)
class AugmentedChain:
    """One generated chain with its provenance and parsed decision."""

    instance_id: str
    analogy_ids: tuple[str, ...]
    chain_text: str
    decision: str | None


def build_chain_prompt(
    inst: ModerationInstance,
    analogies: RetrievalResult,
    templates: TemplateLibrary,
    schema: LabelSchema,
) -> str:
    if not analogies.neighbors:
        raise PipelineError(f"no analogies available for instance {inst.id!r}")
    return templates.get("chain_of_analogy").render(
        categories=categories_line(schema.categories),
        analogies=render_analogy_block(analogies.neighbors),
        text=inst.text,
        label=inst.label,
    )


def moderation_query(inst: ModerationInstance, templates: TemplateLibrary, schema: LabelSchema) -> str:
    """The inference-time prompt paired with every emitted completion."""
    return templates.get("cot").render(
        categories=categories_line(schema.categories), text=inst.text
    )


def generate_augmented_chain(
    gateway: Gateway,
    handle: ModelHandle,
    inst: ModerationInstance,
    analogies: RetrievalResult,
    templates: TemplateLibrary,
    schema: LabelSchema,
    sampling: SamplingConfig | None = None,
) -> AugmentedChain:
    """Generate one chain; gateway errors propagate to the caller."""
    prompt = build_chain_prompt(inst, analogies, templates, schema)
    exchange = gateway.complete(handle, [("user", prompt)], cfg=sampling, tag=f"stage1:{inst.id}")
    return AugmentedChain(
        instance_id=inst.id,
        analogy_ids=analogies.analogy_ids,
        chain_text=exchange.response,
        decision=extract_label(exchange.response, schema),
    )


def select_analogies(
    index: VectorIndex,
    inst_id: str,
    k: int,
    policy: str,
    seed: int,
) -> RetrievalResult:
    if policy == "knn":
        return retrieve_analogies(index, inst_id, k)
    return random_sample(index, inst_id, k, seed=derive_seed(seed, "stage1-random", inst_id))


def build_augmented_dataset(
    corpus: Sequence[ModerationInstance],
    index: VectorIndex,
    gateway: Gateway,
    handle: ModelHandle,
    templates: TemplateLibrary,
    schema: LabelSchema,
    k: int = DEFAULT_K,
    policy: str = "knn",
    seed: int = 0,
    sampling: SamplingConfig | None = None,
    max_in_flight: int | None = None,
) -> tuple[list[SftRecord], QuarantineReport]:
    """Produce the stage-1 SFT dataset for the whole corpus.

    Every corpus instance lands in exactly one of the two outputs.  Any
    instance missing from the index fails the run before a single
    generation request is issued.
    """
    if k < 1:
        raise ConfigError(f"k {k} must be >= 1")
    if policy not in RETRIEVAL_POLICIES:
        raise ConfigError(f"retrieval policy {policy!r} not in {RETRIEVAL_POLICIES}")
    if not corpus:
        raise ConfigError("corpus is empty")
    missing = index_covers(index, corpus)
    if missing:
        raise RetrievalError(f"instances missing from index: {', '.join(sorted(missing))}")

    selections = [select_analogies(index, inst.id, k, policy, seed) for inst in corpus]

    records: list[SftRecord] = []
    quarantine = QuarantineReport()
    workload: list[tuple[int, str]] = []
    for i, (inst, sel) in enumerate(zip(corpus, selections)):
        if not sel.neighbors:
            quarantine.add(inst.id, "no analogies")
            continue
        workload.append((i, build_chain_prompt(inst, sel, templates, schema)))

    slots = []
    if workload:
        slots = gateway.complete_batch(
            handle,
            [[("user", prompt)] for _, prompt in workload],
            cfg=sampling,
            max_in_flight=max_in_flight,
            tag="stage1",
        )

    outcome_by_index = {i: slot for (i, _), slot in zip(workload, slots)}
    for i, inst in enumerate(corpus):
        slot = outcome_by_index.get(i)
        if slot is None:
            continue  # already quarantined above
        if not slot.ok:
            quarantine.add(inst.id, "gateway error", detail=str(slot.error))
            continue
        decision = extract_label(slot.exchange.response, schema)
        if decision is None:
            quarantine.add(inst.id, "no decision")
            continue
        if decision != inst.label:
            quarantine.add(inst.id, "decision mismatch", detail=f"chain asserted {decision!r}")
            continue
        records.append(
            SftRecord(
                instance_id=inst.id,
                prompt=moderation_query(inst, templates, schema),
                completion=slot.exchange.response,
                stage="stage1",
                label=inst.label,
            )
        )
    return records, quarantine

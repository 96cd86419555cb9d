"""Command-line entrypoint wiring every stage behind one config file.

Subcommands produce their artifacts under the configured output
directory plus a run manifest naming everything needed to repeat the run
byte for byte: config digest, seeds, retrieval policy, model ids,
template digests, record counts, and output digests.  Manifests carry no
timestamps, so identical runs write identical files.

Exit codes: 0 success, 1 config or usage problems (every violation
listed, nothing written), 2 runtime failures.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import evaluation, retrieval, stage1, stage2, stage3, synth
from .config import RunConfig, build_gateway, load_config
from .errors import ConfigError, PipelineError
from .prompts import TemplateLibrary
from .schema import (
    atomic_write_bytes,
    canonical_json,
    load_dataset,
    sha256_hex,
    write_instance_dataset,
    write_sft_dataset,
)

D_AUG = "d_aug.jsonl"
D_REFINED = "d_refined.jsonl"
INDEX_FILE = "index.bin"
RULES_FILE = "rules.jsonl"
ANALOGIES_FILE = "analogies.jsonl"
REVIEW_EXPORT = "review_export.jsonl"


class _Run:
    """Shared plumbing for one subcommand invocation."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out_dir = Path(config.out_dir)
        self.templates = TemplateLibrary(config.template_dir)
        self._gateway = None
        self._handles = None

    def require_roles(self, *roles: str) -> None:
        missing = [r for r in roles if r not in self.config.models]
        if missing:
            raise ConfigError([f"no model configured for role {r!r}" for r in missing])

    @property
    def gateway(self):
        if self._gateway is None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._gateway, self._handles = build_gateway(
                self.config, self.out_dir / "run_log.jsonl"
            )
        return self._gateway

    @property
    def handles(self):
        _ = self.gateway
        return self._handles

    def corpus(self):
        if self.config.corpus_path is None:
            raise ConfigError(["paths.corpus is required for this subcommand"])
        return load_dataset(self.config.corpus_path, self.config.schema)

    def embeddings(self) -> retrieval.EmbeddingStore:
        self.require_roles("embedding")
        return retrieval.EmbeddingStore(
            self.gateway,
            self.handles["embedding"],
            cache_dir=self.out_dir / "cache",
        )

    def load_or_build_index(self, corpus) -> retrieval.VectorIndex:
        index_path = self.out_dir / INDEX_FILE
        if index_path.exists():
            return retrieval.load_index(index_path)
        store = self.embeddings()
        matrix = store.embed_texts([inst.text for inst in corpus])
        index = retrieval.build_index(corpus, matrix, self.config.schema)
        retrieval.save_index(index, index_path)
        return index

    def write_manifest(self, subcommand: str, counts: dict, outputs: list[Path], extra: dict | None = None) -> Path:
        config = self.config
        digests = {}
        for out in outputs:
            out = Path(out)
            if out.exists():
                digests[out.name] = sha256_hex(out.read_bytes())
        manifest = {
            "subcommand": subcommand,
            "config_digest": config.config_digest,
            "schema": config.schema.name,
            "seed": config.seed,
            "policy": config.effective_policy,
            "k": config.k,
            "sampling": config.sampling.to_dict(),
            "models": {role: spec.model_id for role, spec in sorted(config.models.items())},
            "template_digests": self.templates.digests(),
            "ablations": {"no_knn": config.no_knn, "skip_stage3": config.skip_stage3},
            "counts": counts,
            "outputs": digests,
        }
        if extra:
            manifest.update(extra)
        path = self.out_dir / f"{subcommand}.manifest.json"
        self.out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(path, (canonical_json(manifest) + "\n").encode("utf-8"))
        return path


def _load_run(
    config_path: str,
    seed: int | None,
    out: str | None,
    ablations: tuple[str, ...],
    check_paths: bool = True,
) -> _Run:
    config = load_config(
        Path(config_path),
        seed=seed,
        out_dir=Path(out) if out else None,
        ablations=ablations,
        check_paths=check_paths,
    )
    return _Run(config)


_CONFIG_OPTIONS = [
    click.option("--config", "config_path", required=True, type=click.Path(), help="run config (TOML)"),
    click.option("--seed", type=int, default=None, help="override the configured seed"),
    click.option("--out", type=click.Path(), default=None, help="override the output directory"),
    click.option(
        "--ablation",
        "ablations",
        multiple=True,
        type=click.Choice(["no-knn", "skip-stage3"]),
        help="named ablation preset; repeatable",
    ),
]


def _with_config(fn):
    for option in reversed(_CONFIG_OPTIONS):
        fn = option(fn)
    return fn


@click.group()
def cli():
    """Analogy-driven moderation data pipeline."""


@cli.command("synth-corpus")
@_with_config
@click.option("--n", "n", type=int, default=60, show_default=True, help="instances to generate")
@click.option("--out-file", type=click.Path(), default=None, help="corpus path (default <out>/corpus.jsonl)")
def synth_corpus_cmd(config_path, seed, out, ablations, n, out_file):
    """Write a deterministic balanced synthetic corpus."""
    run = _load_run(config_path, seed, out, ablations, check_paths=False)
    target = Path(out_file) if out_file else run.out_dir / "corpus.jsonl"
    instances = synth.synth_corpus(n, run.config.schema, seed=run.config.seed)
    target.parent.mkdir(parents=True, exist_ok=True)
    write_instance_dataset(instances, target)
    run.write_manifest("synth-corpus", {"instances": len(instances)}, [target])
    click.echo(f"wrote {len(instances)} instances to {target}")


@cli.command("embed")
@_with_config
def embed_cmd(config_path, seed, out, ablations):
    """Embed the corpus, filling the on-disk vector cache."""
    run = _load_run(config_path, seed, out, ablations)
    corpus = run.corpus()
    store = run.embeddings()
    matrix = store.embed_texts([inst.text for inst in corpus])
    run.write_manifest(
        "embed",
        {"instances": len(corpus), "dim": int(matrix.shape[1])},
        [],
    )
    click.echo(f"embedded {len(corpus)} texts at dim {matrix.shape[1]}")


@cli.command("index")
@_with_config
def index_cmd(config_path, seed, out, ablations):
    """Build and persist the retrieval index for the corpus."""
    run = _load_run(config_path, seed, out, ablations)
    corpus = run.corpus()
    store = run.embeddings()
    matrix = store.embed_texts([inst.text for inst in corpus])
    index = retrieval.build_index(corpus, matrix, run.config.schema)
    index_path = run.out_dir / INDEX_FILE
    retrieval.save_index(index, index_path)
    run.write_manifest("index", {"instances": len(index), "dim": index.dim}, [index_path])
    click.echo(f"indexed {len(index)} instances to {index_path}")


def _run_stage1(run: _Run, corpus) -> dict:
    run.require_roles("base", "embedding")
    index = run.load_or_build_index(corpus)
    records, quarantine = stage1.build_augmented_dataset(
        corpus,
        index,
        run.gateway,
        run.handles["base"],
        run.templates,
        run.config.schema,
        k=run.config.k,
        policy=run.config.effective_policy,
        seed=run.config.seed,
        sampling=run.config.sampling,
        max_in_flight=run.config.max_in_flight,
    )
    dataset_path = run.out_dir / D_AUG
    write_sft_dataset(records, dataset_path, run.config.schema)
    quarantine.write(run.out_dir / "quarantine_stage1.jsonl")
    counts = {"records": len(records), "quarantined": len(quarantine), "corpus": len(corpus)}
    run.write_manifest("stage1", counts, [dataset_path])
    return counts


@cli.command("stage1")
@_with_config
def stage1_cmd(config_path, seed, out, ablations):
    """Retrieve analogies and generate the augmented SFT dataset."""
    run = _load_run(config_path, seed, out, ablations)
    counts = _run_stage1(run, run.corpus())
    click.echo(
        f"stage1: {counts['records']} records, {counts['quarantined']} quarantined "
        f"(policy {run.config.effective_policy})"
    )


def _run_stage2(run: _Run, corpus) -> tuple[stage2.Stage2Result, dict]:
    run.require_roles("coa", "aux")
    result = stage2.run_stage2(
        corpus,
        run.gateway,
        run.handles["coa"],
        run.handles["aux"],
        run.templates,
        run.config.schema,
        analogy_count=run.config.analogy_count,
        review_fraction=run.config.review_fraction,
        review_seed=run.config.seed,
        sampling=run.config.sampling,
        max_in_flight=run.config.max_in_flight,
    )
    stage2.write_rule_ledger(result.rules, run.out_dir / RULES_FILE)
    stage2.write_analogy_file(result.analogies, run.out_dir / ANALOGIES_FILE)
    result.quarantine.write(run.out_dir / "quarantine_stage2.jsonl")
    outputs = [run.out_dir / RULES_FILE, run.out_dir / ANALOGIES_FILE]
    if result.review_sample:
        stage2.write_review_export(result.review_sample, corpus, run.out_dir / REVIEW_EXPORT)
        outputs.append(run.out_dir / REVIEW_EXPORT)
    counts = {
        "corpus": len(corpus),
        "rules": len(result.rules),
        "quarantined": len(result.quarantine),
        **{f"status_{k}": v for k, v in sorted(result.status_counts().items())},
    }
    run.write_manifest("stage2", counts, outputs)
    return result, counts


@cli.command("stage2")
@_with_config
def stage2_cmd(config_path, seed, out, ablations):
    """Generate virtual analogies, induce rules, apply the consistency gate."""
    run = _load_run(config_path, seed, out, ablations)
    _, counts = _run_stage2(run, run.corpus())
    click.echo(
        "stage2: "
        + ", ".join(f"{k.removeprefix('status_')}={v}" for k, v in counts.items() if k.startswith("status_"))
    )


def _run_stage3(run: _Run, corpus, rules, analogies) -> dict:
    run.require_roles("aux")
    records, quarantine, links = stage3.emit_refined_dataset(
        corpus,
        rules,
        analogies,
        run.gateway,
        run.handles["aux"],
        run.templates,
        run.config.schema,
        sampling=run.config.sampling,
        max_in_flight=run.config.max_in_flight,
    )
    dataset_path = run.out_dir / D_REFINED
    write_sft_dataset(records, dataset_path, run.config.schema)
    quarantine.write(run.out_dir / "quarantine_stage3.jsonl")
    atomic_write_bytes(
        run.out_dir / "stage3_links.json",
        (canonical_json(links) + "\n").encode("utf-8"),
    )
    counts = {"records": len(records), "quarantined": len(quarantine), "corpus": len(corpus)}
    run.write_manifest("stage3", counts, [dataset_path])
    return counts


@cli.command("stage3")
@_with_config
def stage3_cmd(config_path, seed, out, ablations):
    """Synthesize reasoning and emit the refined hierarchical dataset."""
    run = _load_run(config_path, seed, out, ablations)
    corpus = run.corpus()
    rules_path = run.out_dir / RULES_FILE
    analogies_path = run.out_dir / ANALOGIES_FILE
    for p in (rules_path, analogies_path):
        if not p.exists():
            raise PipelineError(f"missing stage-2 artifact: {p}; run stage2 first")
    rules = stage2.load_rule_ledger(rules_path)
    analogies = stage2.load_analogy_file(analogies_path)
    counts = _run_stage3(run, corpus, rules, analogies)
    click.echo(f"stage3: {counts['records']} records, {counts['quarantined']} quarantined")


@cli.command("pipeline")
@_with_config
def pipeline_cmd(config_path, seed, out, ablations):
    """Run embed, index, stage1, stage2 and stage3 in sequence."""
    run = _load_run(config_path, seed, out, ablations)
    corpus = run.corpus()
    s1 = _run_stage1(run, corpus)
    click.echo(f"stage1: {s1['records']} records, {s1['quarantined']} quarantined")
    if run.config.skip_stage3:
        run.write_manifest("pipeline", {"stage1": s1}, [run.out_dir / D_AUG])
        click.echo("stage2/stage3 skipped by ablation")
        return
    result, s2 = _run_stage2(run, corpus)
    click.echo(f"stage2: {s2['rules']} rules, {s2['quarantined']} quarantined")
    s3 = _run_stage3(run, corpus, result.rules, result.analogies)
    click.echo(f"stage3: {s3['records']} records, {s3['quarantined']} quarantined")
    run.write_manifest(
        "pipeline",
        {"stage1": s1, "stage2": s2, "stage3": s3},
        [run.out_dir / D_AUG, run.out_dir / D_REFINED],
    )


@cli.command("eval")
@click.option("--config", "config_path", type=click.Path(), default=None, help="run config (TOML)")
@click.option("--pred", "pred_path", required=True, type=click.Path(), help="predictions JSONL: {instance_id, output}")
@click.option("--gold", "gold_path", required=True, type=click.Path(), help="gold instance JSONL")
@click.option("--report", "report_path", type=click.Path(), default=None, help="write the report as JSON here")
def eval_cmd(config_path, pred_path, gold_path, report_path):
    """Score raw model outputs against gold labels."""
    if config_path:
        config = load_config(Path(config_path))
        schema = config.schema
    else:
        from .config import DEFAULT_SCHEMA

        schema = DEFAULT_SCHEMA
    gold = load_dataset(Path(gold_path), schema)
    outputs: dict[str, str] = {}
    pred_file = Path(pred_path)
    if not pred_file.exists():
        raise ConfigError([f"prediction file not found: {pred_file}"])
    with open(pred_file, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PipelineError(f"{pred_file}:{lineno}: malformed prediction row: {exc.msg}") from exc
            if "instance_id" not in row or "output" not in row:
                raise PipelineError(f"{pred_file}:{lineno}: prediction rows need instance_id and output")
            outputs[row["instance_id"]] = row["output"]
    gold_ids = {inst.id for inst in gold}
    unknown = sorted(set(outputs) - gold_ids)
    if unknown:
        raise PipelineError(f"predictions for unknown ids: {', '.join(unknown[:5])}")
    preds = [
        evaluation.PredictionRecord.from_output(inst.id, inst.label, outputs.get(inst.id, ""), schema)
        for inst in gold
    ]
    report = evaluation.score_predictions(preds, schema)
    click.echo(evaluation.render_report(report))
    if report_path:
        atomic_write_bytes(
            Path(report_path), (canonical_json(report.to_row()) + "\n").encode("utf-8")
        )


@cli.command("rule-eval")
@_with_config
@click.option("--rules", "rules_path", type=click.Path(), default=None, help="rule ledger (default <out>/rules.jsonl)")
@click.option("--testset", "test_path", type=click.Path(), default=None, help="test instances (default paths.test)")
def rule_eval_cmd(config_path, seed, out, ablations, rules_path, test_path):
    """Score an external model with, with simple, and without induced rules."""
    run = _load_run(config_path, seed, out, ablations)
    run.require_roles("external")
    schema = run.config.schema
    test_file = Path(test_path) if test_path else run.config.test_path
    if test_file is None:
        raise ConfigError(["pass --testset or set paths.test"])
    testset = load_dataset(Path(test_file), schema)
    ledger_path = Path(rules_path) if rules_path else run.out_dir / RULES_FILE
    if not ledger_path.exists():
        raise PipelineError(f"missing rule ledger: {ledger_path}; run stage2 first")
    rules = {
        r.instance_id: r for r in stage2.load_rule_ledger(ledger_path) if r.status == "accepted"
    }
    reports = evaluation.run_condition_suite(
        run.gateway,
        run.handles["external"],
        rules,
        testset,
        run.templates,
        schema,
        sampling=run.config.sampling,
    )
    click.echo(evaluation.render_condition_table(reports))
    rows = [r.to_row() for r in reports]
    report_path = run.out_dir / "rule_eval.json"
    atomic_write_bytes(report_path, (canonical_json(rows) + "\n").encode("utf-8"))
    run.write_manifest(
        "rule-eval",
        {"testset": len(testset), "rules": len(rules)},
        [report_path],
    )


@cli.command("review-serve")
@_with_config
@click.option("--left", "left_path", required=True, type=click.Path(), help="review export for method A")
@click.option("--right", "right_path", required=True, type=click.Path(), help="review export for method B")
@click.option("--method-a", default="method-a", show_default=True, help="label for the left export's method")
@click.option("--method-b", default="method-b", show_default=True, help="label for the right export's method")
@click.option("--annotators", required=True, help="comma-separated annotator ids")
@click.option("--allow-ties", is_flag=True, default=False, help="accept tie verdicts")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8800, show_default=True)
@click.option("--ui", "ui_dir", type=click.Path(), default=None, help="static UI directory to serve")
def review_serve_cmd(
    config_path, seed, out, ablations, left_path, right_path, method_a, method_b,
    annotators, allow_ties, host, port, ui_dir,
):
    """Create a double-blind review session and serve the annotation API."""
    from . import review

    run = _load_run(config_path, seed, out, ablations)
    pairs = review.pairs_from_exports(
        review.load_export(Path(left_path)),
        review.load_export(Path(right_path)),
        method_a,
        method_b,
    )
    names = [a.strip() for a in annotators.split(",") if a.strip()]
    store = review.ReviewStore(run.out_dir / "review")
    session = store.create(pairs, names, seed=run.config.seed, allow_ties=allow_ties)
    click.echo(f"session {session.session_id}: {len(pairs)} pairs, {len(names)} annotators")
    click.echo(f"serving on http://{host}:{port}/session/{session.session_id}/next?annotator=<id>")
    review.serve(store, host, port, static_dir=Path(ui_dir) if ui_dir else None)


def main() -> None:
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.Abort:
        sys.exit(130)
    except click.UsageError as exc:
        exc.show()
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except ConfigError as exc:
        for violation in exc.violations:
            click.echo(f"config error: {violation}", err=True)
        sys.exit(1)
    except PipelineError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()

"""Run configuration: one TOML file drives every subcommand.

The file declares the label schema, corpus paths, one model entry per
role, retrieval settings, sampling, stage-2 knobs, template overrides,
and the output directory.  A model entry either points at a live
endpoint (URL plus the NAME of the environment variable holding its
credential) or names a scripted offline profile, so the whole pipeline
can run with zero network access.

Validation is collect-then-fail: every violation is gathered and raised
in a single error so a bad file is fixed in one pass, and nothing is
written before validation succeeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # 3.10 fallback
    import tomli as tomllib

from .errors import ConfigError
from .gateway import DEFAULT_MAX_IN_FLIGHT, Gateway, ModelHandle, SamplingConfig
from .schema import LabelSchema, sha256_hex

MODEL_ROLES = ("base", "coa", "aux", "external", "embedding")
MOCK_PROFILES = ("compliant", "hash", "rule-follower")
RETRIEVAL_POLICIES = ("knn", "random")

DEFAULT_SCHEMA = LabelSchema(
    name="moderation-6",
    categories=("Politics", "Pornography", "Violence", "Gambling", "Bias", "Harmless"),
    harmless_category="Harmless",
)


@dataclass(frozen=True)
class ModelSpec:
    """One model role: either a live endpoint or a scripted profile."""

    role: str
    model_id: str
    endpoint_url: str | None = None
    auth_env_var: str | None = None
    mock: str | None = None
    embed_dim: int = 32
    fixed_category: str | None = None

    @property
    def is_mock(self) -> bool:
        return self.mock is not None


@dataclass(frozen=True)
class RunConfig:
    schema: LabelSchema
    models: Mapping[str, ModelSpec]
    out_dir: Path
    corpus_path: Path | None = None
    test_path: Path | None = None
    retrieval_policy: str = "knn"
    k: int = 32
    seed: int = 0
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    analogy_count: int = 4
    review_fraction: float = 0.0
    template_dir: Path | None = None
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    retry_limit: int = 3
    no_knn: bool = False
    skip_stage3: bool = False
    config_digest: str = ""

    @property
    def effective_policy(self) -> str:
        return "random" if self.no_knn else self.retrieval_policy

    def model(self, role: str) -> ModelSpec:
        spec = self.models.get(role)
        if spec is None:
            raise ConfigError([f"no model configured for role {role!r}"])
        return spec


def _parse_schema(raw: Mapping[str, Any], violations: list[str], base_dir: Path) -> LabelSchema:
    section = raw.get("schema")
    if section is None:
        return DEFAULT_SCHEMA
    if "file" in section:
        path = base_dir / section["file"]
        if not path.exists():
            violations.append(f"schema.file does not exist: {path}")
            return DEFAULT_SCHEMA
        try:
            return LabelSchema.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            violations.append(f"schema.file is not a valid schema: {exc}")
            return DEFAULT_SCHEMA
    try:
        return LabelSchema(
            name=section.get("name", "custom"),
            categories=tuple(section.get("categories", ())),
            harmless_category=section.get("harmless_category", ""),
        )
    except Exception as exc:
        violations.append(f"schema section invalid: {exc}")
        return DEFAULT_SCHEMA


def _parse_model(role: str, section: Mapping[str, Any], schema: LabelSchema, violations: list[str]) -> ModelSpec:
    model_id = section.get("id", f"{role}-model")
    mock = section.get("mock")
    endpoint_url = section.get("endpoint_url")
    auth_env_var = section.get("auth_env_var")
    fixed_category = None
    if mock is None and endpoint_url is None:
        violations.append(f"models.{role}: set either mock or endpoint_url")
    if mock is not None and endpoint_url is not None:
        violations.append(f"models.{role}: mock and endpoint_url are mutually exclusive")
    if mock is not None:
        if mock.startswith("fixed:"):
            fixed_category = mock.split(":", 1)[1]
            if fixed_category not in schema:
                violations.append(
                    f"models.{role}: fixed category {fixed_category!r} not in schema {schema.name!r}"
                )
        elif mock not in MOCK_PROFILES:
            violations.append(
                f"models.{role}: unknown mock profile {mock!r}; "
                f"expected one of {MOCK_PROFILES} or fixed:<category>"
            )
        if mock == "hash" and role != "embedding":
            violations.append(f"models.{role}: mock profile 'hash' is only for the embedding role")
    embed_dim = section.get("embed_dim", 32)
    if not isinstance(embed_dim, int) or embed_dim < 1:
        violations.append(f"models.{role}: embed_dim must be a positive integer")
        embed_dim = 32
    return ModelSpec(
        role=role,
        model_id=model_id,
        endpoint_url=endpoint_url,
        auth_env_var=auth_env_var,
        mock=mock,
        embed_dim=embed_dim,
        fixed_category=fixed_category,
    )


def load_config(
    path: Path,
    seed: int | None = None,
    out_dir: Path | None = None,
    ablations: tuple[str, ...] = (),
    check_paths: bool = True,
) -> RunConfig:
    """Parse and validate a run config, applying command-line overrides.

    Raises ConfigError listing every violation found; on success nothing
    has been written anywhere.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    raw_bytes = path.read_bytes()
    try:
        raw = tomllib.loads(raw_bytes.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError([f"config is not valid TOML: {exc}"]) from exc

    violations: list[str] = []
    base_dir = path.parent
    schema = _parse_schema(raw, violations, base_dir)

    models: dict[str, ModelSpec] = {}
    for role, section in raw.get("models", {}).items():
        if role not in MODEL_ROLES:
            violations.append(f"models.{role}: unknown role; expected one of {MODEL_ROLES}")
            continue
        models[role] = _parse_model(role, section, schema, violations)

    paths = raw.get("paths", {})

    def _path(key: str, required: bool = False) -> Path | None:
        value = paths.get(key)
        if value is None:
            if required:
                violations.append(f"paths.{key} is required")
            return None
        p = base_dir / value
        if check_paths and key != "out" and not p.exists():
            violations.append(f"paths.{key} does not exist: {p}")
        return p

    corpus_path = _path("corpus")
    test_path = _path("test")

    out_override = out_dir
    raw_out = paths.get("out")
    if out_override is not None:
        resolved_out = Path(out_override)
    elif raw_out is not None:
        resolved_out = base_dir / raw_out
    else:
        resolved_out = base_dir / "out"

    retrieval = raw.get("retrieval", {})
    policy = retrieval.get("policy", "knn")
    if policy not in RETRIEVAL_POLICIES:
        violations.append(f"retrieval.policy must be one of {RETRIEVAL_POLICIES}, got {policy!r}")
    k = retrieval.get("k", 32)
    if not isinstance(k, int) or k < 1:
        violations.append(f"retrieval.k must be an integer >= 1, got {k!r}")
        k = 1
    cfg_seed = retrieval.get("seed", raw.get("seed", 0))
    if seed is not None:
        cfg_seed = seed
    if not isinstance(cfg_seed, int):
        violations.append(f"seed must be an integer, got {cfg_seed!r}")
        cfg_seed = 0

    sampling_raw = raw.get("sampling", {})
    try:
        sampling = SamplingConfig(
            temperature=sampling_raw.get("temperature", 0.8),
            top_p=sampling_raw.get("top_p", 0.95),
            top_k=sampling_raw.get("top_k", 50),
            max_tokens=sampling_raw.get("max_tokens", 1024),
            seed=sampling_raw.get("seed"),
        )
    except ConfigError as exc:
        violations.extend(f"sampling: {v}" for v in exc.violations)
        sampling = SamplingConfig()

    stage2 = raw.get("stage2", {})
    analogy_count = stage2.get("analogy_count", 4)
    if not isinstance(analogy_count, int) or analogy_count < 1:
        violations.append(f"stage2.analogy_count must be an integer >= 1, got {analogy_count!r}")
        analogy_count = 4
    review_fraction = stage2.get("review_fraction", 0.0)
    if not isinstance(review_fraction, (int, float)) or not 0.0 <= float(review_fraction) <= 1.0:
        violations.append(f"stage2.review_fraction must be in [0, 1], got {review_fraction!r}")
        review_fraction = 0.0

    template_dir = None
    templates = raw.get("templates", {})
    if "dir" in templates:
        template_dir = base_dir / templates["dir"]
        if not template_dir.is_dir():
            violations.append(f"templates.dir does not exist: {template_dir}")

    runtime = raw.get("runtime", {})
    max_in_flight = runtime.get("max_in_flight", DEFAULT_MAX_IN_FLIGHT)
    if not isinstance(max_in_flight, int) or max_in_flight < 1:
        violations.append(f"runtime.max_in_flight must be an integer >= 1, got {max_in_flight!r}")
        max_in_flight = DEFAULT_MAX_IN_FLIGHT
    retry_limit = runtime.get("retry_limit", 3)
    if not isinstance(retry_limit, int) or retry_limit < 0:
        violations.append(f"runtime.retry_limit must be an integer >= 0, got {retry_limit!r}")
        retry_limit = 3

    no_knn = False
    skip_stage3 = False
    for name in ablations:
        if name == "no-knn":
            no_knn = True
        elif name == "skip-stage3":
            skip_stage3 = True
        else:
            violations.append(f"unknown ablation {name!r}; expected no-knn or skip-stage3")

    if violations:
        raise ConfigError(violations)

    return RunConfig(
        schema=schema,
        models=models,
        out_dir=resolved_out,
        corpus_path=corpus_path,
        test_path=test_path,
        retrieval_policy=policy,
        k=k,
        seed=cfg_seed,
        sampling=sampling,
        analogy_count=analogy_count,
        review_fraction=float(review_fraction),
        template_dir=template_dir,
        max_in_flight=max_in_flight,
        retry_limit=retry_limit,
        no_knn=no_knn,
        skip_stage3=skip_stage3,
        config_digest=sha256_hex(raw_bytes),
    )


def build_gateway(config: RunConfig, run_log_path: Path) -> tuple[Gateway, dict[str, ModelHandle]]:
    """Instantiate the gateway and register every configured model.

    Mock profiles get scripted endpoints; live entries get HTTP transports
    whose credentials come from the named environment variable.
    """
    from . import mocks

    gateway = Gateway(
        run_log_path=run_log_path,
        max_in_flight=config.max_in_flight,
        retry_limit=config.retry_limit,
    )
    handles: dict[str, ModelHandle] = {}
    for role, spec in config.models.items():
        if spec.is_mock:
            if spec.mock == "hash":
                endpoint = mocks.ScriptedEndpoint(
                    embed_dim=spec.embed_dim, endpoint_id=spec.model_id
                )
            elif spec.mock == "compliant":
                endpoint = mocks.compliant_endpoint(
                    config.schema, endpoint_id=spec.model_id, embed_dim=spec.embed_dim
                )
            elif spec.mock == "rule-follower":
                endpoint = mocks.ScriptedEndpoint(
                    rules=[(r"(?s).", mocks.rule_follower_responder(config.schema))],
                    embed_dim=spec.embed_dim,
                    endpoint_id=spec.model_id,
                )
            else:
                endpoint = mocks.ScriptedEndpoint(
                    rules=[(r"(?s).", mocks.fixed_responder(spec.fixed_category))],
                    embed_dim=spec.embed_dim,
                    endpoint_id=spec.model_id,
                )
            handles[role] = gateway.register_mock(spec.model_id, role, endpoint)
        else:
            handle = ModelHandle(
                id=spec.model_id,
                kind=role,
                endpoint_url=spec.endpoint_url,
                auth_env_var=spec.auth_env_var,
            )
            gateway.register_http(handle)
            handles[role] = handle
    return gateway, handles

"""Analogy-driven moderation data pipeline.

Builds SFT datasets for content moderation in three stages: analogy
retrieval plus chain generation, virtual-analogy rule induction with a
label-consistency gate, and hierarchical reasoning synthesis.  Ships an
evaluation harness, a scripted offline gateway, and a double-blind rule
review server.
"""

from .errors import (
    AlreadyJudgedError,
    ChainFormatError,
    ConfigError,
    DatasetError,
    EvaluationError,
    GatewayError,
    PipelineError,
    RetrievalError,
    ReviewError,
    TemplateError,
    TransientEndpointError,
    UnscriptedRequestError,
)
from .gateway import ChatExchange, Gateway, ModelHandle, SamplingConfig
from .schema import (
    AnalogyExample,
    DatasetManifest,
    LabelSchema,
    ModerationInstance,
    QuarantineReport,
    SftRecord,
    load_dataset,
    load_sft_dataset,
    write_instance_dataset,
    write_sft_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "AlreadyJudgedError",
    "AnalogyExample",
    "ChainFormatError",
    "ChatExchange",
    "ConfigError",
    "DatasetError",
    "DatasetManifest",
    "EvaluationError",
    "Gateway",
    "GatewayError",
    "LabelSchema",
    "ModelHandle",
    "ModerationInstance",
    "PipelineError",
    "QuarantineReport",
    "RetrievalError",
    "ReviewError",
    "SamplingConfig",
    "SftRecord",
    "TemplateError",
    "TransientEndpointError",
    "UnscriptedRequestError",
    "__version__",
    "load_dataset",
    "load_sft_dataset",
    "write_instance_dataset",
    "write_sft_dataset",
]

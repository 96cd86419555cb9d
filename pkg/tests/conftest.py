import pytest

from anamod import mocks, prompts, retrieval, synth
from anamod.gateway import Gateway
from anamod.schema import LabelSchema


@pytest.fixture
def schema6() -> LabelSchema:
    return LabelSchema(
        name="moderation-6",
        categories=("Politics", "Pornography", "Violence", "Gambling", "Bias", "Harmless"),
        harmless_category="Harmless",
    )


@pytest.fixture
def templates() -> prompts.TemplateLibrary:
    return prompts.TemplateLibrary()


@pytest.fixture
def corpus60(schema6):
    return synth.synth_corpus(60, schema6, seed=7)


class MockRig:
    """Gateway wired to scripted endpoints, one handle per role."""

    def __init__(self, tmp_path, schema, embed_dim=24):
        self.schema = schema
        self.gateway = Gateway(run_log_path=tmp_path / "run_log.jsonl")
        self.endpoints = {
            "embedding": mocks.ScriptedEndpoint(embed_dim=embed_dim, endpoint_id="emb"),
            "base": mocks.compliant_endpoint(schema, endpoint_id="base"),
            "coa": mocks.compliant_endpoint(schema, endpoint_id="coa"),
            "aux": mocks.compliant_endpoint(schema, endpoint_id="aux"),
            "external": mocks.ScriptedEndpoint(
                rules=[(r"(?s).", mocks.rule_follower_responder(schema))],
                endpoint_id="ext",
            ),
        }
        self.handles = {
            role: self.gateway.register_mock(f"mock-{role}", role, ep)
            for role, ep in self.endpoints.items()
        }
        self.cache_dir = tmp_path / "cache"

    def handle(self, role):
        return self.handles[role]

    def store(self):
        return retrieval.EmbeddingStore(
            self.gateway, self.handles["embedding"], cache_dir=self.cache_dir
        )

    def index(self, corpus):
        matrix = self.store().embed_texts([inst.text for inst in corpus])
        return retrieval.build_index(corpus, matrix, self.schema)


@pytest.fixture
def rig(tmp_path, schema6) -> MockRig:
    return MockRig(tmp_path, schema6)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # one verdict line per release criterion, collected by test_acceptance
    try:
        import test_acceptance
    except ImportError:
        return
    lines = getattr(test_acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

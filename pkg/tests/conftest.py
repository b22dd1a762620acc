import numpy as np
import pytest

from cliptts.blocks import ModelConfig
from cliptts.data import ToyCorpusSpec, gen_toy_corpus

# narrow model for fast unit tests; acceptance tests use the full defaults
TINY = ModelConfig(d_model=16, n_heads=2, n_blocks=1, ffn_hidden=32, dp_hidden=16, dropout=0.0,
                   dp_dropout=0.0)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def toy_utts():
    return gen_toy_corpus(ToyCorpusSpec(seed=3), 6)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    lines = request.config.acceptance_lines

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        lines.append((number, line))
        print(line)

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

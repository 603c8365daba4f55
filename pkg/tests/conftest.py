import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from attnshap.transformer import ToyTransformer  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    """Untrained two-layer model over a 12-token vocabulary."""
    return ToyTransformer(vocab_size=12, max_len=16, seed=3).initialize()


@pytest.fixture(scope="session")
def planted_model():
    """Model trained on the planted-token task (shared across tests)."""
    from attnshap.synthetic import planted_token_task

    X, y, _ = planted_token_task(400, length=8, seed=0)
    return ToyTransformer(vocab_size=16, epochs=12, seed=0).fit(X, y)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

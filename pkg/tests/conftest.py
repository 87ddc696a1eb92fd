import numpy as np
import pytest

from etr.model import ModelConfig, init_model
from etr.toydata import write_toy_files


@pytest.fixture(scope="session")
def params():
    return init_model(ModelConfig(), seed=7)


@pytest.fixture(scope="session")
def small_params():
    cfg = ModelConfig(vocab_size=64, d_model=16, n_heads=4, d_head=4, d_ff=32, n_enc_layers=2, n_dec_layers=1)
    return init_model(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_files(tmp_path):
    corpus, queries = write_toy_files(tmp_path, n_docs=50, n_queries=12, seed=0)
    return tmp_path, corpus, queries


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "ACCEPT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

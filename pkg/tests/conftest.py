import numpy as np
import pytest

from expansionnet.data import generate_dataset
from expansionnet.model import Captioner, ModelConfig
from expansionnet.vocab import SOS, build_vocab


def random_tokens(rng, T, vocab_size, batch=None):
    shape = (T,) if batch is None else (batch, T)
    toks = rng.integers(0, vocab_size, size=shape)
    toks[..., 0] = SOS
    return toks


@pytest.fixture
def tiny_config():
    return ModelConfig.tiny()


@pytest.fixture
def tiny_model(tiny_config):
    return Captioner(tiny_config)


@pytest.fixture(scope="session")
def small_splits():
    return generate_dataset(60, seed=3)


@pytest.fixture(scope="session")
def small_vocab(small_splits):
    return build_vocab([r for s in small_splits["train"] for r in s.refs])


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

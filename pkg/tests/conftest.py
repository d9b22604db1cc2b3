import numpy as np
import pytest

from unitext.model import JointModel, ModelConfig
from unitext.sequence import SPEECH, TEXT, TokenSequence


def toy_config(**kw) -> ModelConfig:
    base = dict(speech_vocab=20, text_vocab=20, d_model=16, n_layers=2, n_heads=2, d_ff=32,
                max_len=12, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model():
    return JointModel.initialize(toy_config(), seed=3)


def random_corpus(modality, n, vocab, lo=5, hi=30, seed=0):
    r = np.random.default_rng(seed)
    prefix = "s" if modality == SPEECH else "t"
    return [TokenSequence(f"{prefix}{i:04d}", modality, r.integers(0, vocab, size=int(r.integers(lo, hi))), vocab)
            for i in range(n)]


@pytest.fixture
def speech_corpus():
    return random_corpus(SPEECH, 12, 20, seed=1)


@pytest.fixture
def text_corpus():
    return random_corpus(TEXT, 12, 20, seed=2)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])

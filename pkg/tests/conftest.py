import numpy as np
import pytest

from gtrans.autograd import default_dtype
from gtrans.model import ModelConfig, build_model


def tiny_config(**overrides) -> ModelConfig:
    base = dict(src_vocab=11, tgt_vocab=11, enc_layers=2, dec_layers=3, enc_group=1, dec_group=2,
                d_model=8, ffn_dim=16, heads=2, dropout=0.0, max_len=16)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=3)


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


def random_ids(rng, shape, vocab, low=4):
    return rng.integers(low, vocab, size=shape).astype(np.int64)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

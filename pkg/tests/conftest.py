import numpy as np
import pytest

from lorsu.dataio import SyntheticSpec, Tokenizer, generate
from lorsu.encoder import DualEncoder, EncoderConfig


def tiny_config(**kw) -> EncoderConfig:
    base = dict(width=16, heads=8, layers=2, d_ff=32, patch_size=4, image_size=8, embed_dim=16,
                vocab_size=len(Tokenizer.for_template()))
    base.update(kw)
    return EncoderConfig(**base)


def tiny_dataset(classes=4, per_class=6, seed=0, **kw):
    return generate(SyntheticSpec(num_classes=classes, samples_per_class=per_class, image_size=8,
                                  noise_std=0.1, seed=seed, **kw))


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def model(cfg):
    return DualEncoder(cfg, seed=0)


@pytest.fixture
def data():
    return tiny_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

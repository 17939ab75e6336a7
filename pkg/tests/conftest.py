import numpy as np
import pytest
import torch

from mixtrain import synthetic
from mixtrain.model import BackboneConfig

TOY_WORDS = ["yes", "no", "up", "down", "left", "right", "cat", "dog"]


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    synthetic.write_toy_keyword_corpus(root / "keywords", TOY_WORDS, per_word=16, n_speakers=16, seed=0,
                                       background_seconds=12)
    synthetic.write_toy_interference_corpus(root / "interference", n_utterances=40, n_speakers=10, seed=1)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_backbone(num_classes=36):
    return BackboneConfig(block_channels=[4, 4, 4, 4, 4, 4, 8], num_classes=num_classes)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

from __future__ import annotations

import numpy as np
import pytest

from lilt_lab import corpus
from lilt_lab import tensor as T
from lilt_lab.encoders import SizePreset, TowerConfig


@pytest.fixture
def f64():
    with T.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(data, path=None):
    """Trainable 64-bit leaf."""
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, param_path=path, dtype=np.float64)


def micro_size(depth=2, hidden=8, heads=2, proj=6):
    return SizePreset(
        "micro",
        TowerConfig("image", depth, hidden, heads, image_size=8, patch_size=4),
        TowerConfig("text", depth, hidden, heads, vocab_size=20, max_seq_len=6),
        proj_dim=proj,
    )


def random_ids(rng, b, n, vocab=512, pad_from=None):
    ids = rng.integers(3, vocab, size=(b, n))
    ids[:, 0] = corpus.CLS
    if pad_from is not None:
        ids[:, pad_from:] = corpus.PAD
    return ids


# acceptance results, printed once at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])

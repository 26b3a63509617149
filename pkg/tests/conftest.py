import numpy as np
import pytest
import torch

from onedpiece.config import ModelConfig
from onedpiece.model import OneDPiece

TINY = dict(
    image_size=8,
    patch_size=4,
    n_latent_tokens=4,
    codebook_size=16,
    token_dim=3,
    encoder_width=16,
    encoder_depth=1,
    encoder_heads=2,
    decoder_width=16,
    decoder_depth=1,
    decoder_heads=2,
    upscaler_channels=8,
)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return OneDPiece(ModelConfig(**TINY)).eval()


@pytest.fixture
def desk_model():
    torch.manual_seed(0)
    return OneDPiece(ModelConfig()).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance report ------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

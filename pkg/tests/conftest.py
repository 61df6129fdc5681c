from pathlib import Path

import numpy as np
import pytest

from dasrkit.audio import Waveform, read_wav

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def speech() -> Waveform:
    """Four seconds of read speech, 16 kHz mono."""
    return read_wav(DATA / "arctic_a0007.wav").channels[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

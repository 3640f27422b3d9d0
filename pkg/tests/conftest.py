import numpy as np
import pytest

from musicssl.audio import AudioClip
from musicssl.encoder import EncoderConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_encoder_config():
    """Smallest config that still exercises every code path quickly."""
    return EncoderConfig(
        conv_layers=((16, 10, 5), (16, 3, 2), (16, 3, 2), (16, 3, 2),
                     (16, 3, 2), (16, 2, 2), (16, 2, 2)),
        n_transformer_layers=2, hidden=16, heads=2, ff_dim=32, dropout=0.0,
        max_frames=512)


def sine_clip(freq: float, duration: float = 1.0, sr: int = 16000,
              amp: float = 0.5) -> AudioClip:
    t = np.arange(int(duration * sr)) / sr
    return AudioClip(samples=(amp * np.sin(2 * np.pi * freq * t)).astype(np.float32),
                     sample_rate=sr)

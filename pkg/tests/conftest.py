import numpy as np
import pytest

from rirflow.acoustics import RoomSpec
from rirflow.audio import AudioBuffer
from rirflow.dataset import DatasetConfig, build_dataset


def synthetic_decay(rt60: float, duration: float = 1.0, sample_rate: int = 8000,
                    seed: int = 0, onset: int = 40) -> AudioBuffer:
    """Noise-modulated exponential decay with a known RT60."""
    rng = np.random.default_rng(seed)
    n = int(duration * sample_rate)
    t = np.arange(n) / sample_rate
    envelope = 10.0 ** (-3.0 * t / rt60)
    x = rng.standard_normal(n) * envelope
    x[:onset] = 0.0
    return AudioBuffer(x, sample_rate)


@pytest.fixture(scope="session")
def demo_room() -> RoomSpec:
    return RoomSpec((5.0, 5.0, 4.0), (0.2,) * 6, (1.5, 2.2, 1.7), (3.4, 3.1, 1.3))


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """16-item desk dataset shared by training smoke tests."""
    out = tmp_path_factory.mktemp("mini_dataset")
    config = DatasetConfig(n=16, seed=101)
    manifest = build_dataset(config, out, jobs=2)
    return manifest, config

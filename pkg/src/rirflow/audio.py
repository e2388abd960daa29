"""Mono audio buffers and WAV file I/O.

All processing in this package runs on mono float64 sample arrays carried in
an :class:`AudioBuffer`. WAV files are read/written via scipy (PCM 16-bit and
IEEE float 32-bit); multichannel files are reduced to one channel at load
time according to the caller's channel policy.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile


@dataclass
class AudioBuffer:
    """A mono signal with its sample rate.

    samples are dimensionless amplitudes, nominally in [-1, 1] but not
    clipped. All values must be finite.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioBuffer requires a 1-D signal, got shape {self.samples.shape}")
        if not isinstance(self.sample_rate, (int, np.integer)) or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioBuffer samples must be finite")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        """Length in seconds."""
        return len(self) / self.sample_rate

    def copy(self) -> "AudioBuffer":
        return AudioBuffer(self.samples.copy(), self.sample_rate)


def read_wav(path, channel: int | str = "first", rng: np.random.Generator | None = None) -> AudioBuffer:
    """Read a WAV file into a mono AudioBuffer.

    Args:
        path: file path.
        channel: for multichannel files, an explicit channel index,
            ``"first"``, or ``"random"`` (requires ``rng``).
        rng: generator used when ``channel == "random"``.
    """
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype} in {path}")
    if samples.ndim == 2:
        n_ch = samples.shape[1]
        if channel == "first":
            idx = 0
        elif channel == "random":
            if rng is None:
                raise ValueError("channel='random' requires an rng")
            idx = int(rng.integers(n_ch))
        else:
            idx = int(channel)
            if not 0 <= idx < n_ch:
                raise ValueError(f"channel {idx} out of range for {n_ch}-channel file")
        samples = samples[:, idx]
    return AudioBuffer(samples, int(rate))


def write_wav(path, audio: AudioBuffer, fmt: str = "float32") -> None:
    """Write an AudioBuffer as a mono WAV file (``float32`` or ``pcm16``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "float32":
        wavfile.write(str(path), audio.sample_rate, audio.samples.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(audio.samples, -1.0, 1.0)
        wavfile.write(str(path), audio.sample_rate, (clipped * 32767.0).round().astype(np.int16))
    else:
        raise ValueError(f"unknown WAV format {fmt!r}, expected 'float32' or 'pcm16'")

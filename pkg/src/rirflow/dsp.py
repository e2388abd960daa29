"""Deterministic DSP kernels: STFT/iSTFT, mel projection, Griffin-Lim,
band-limiting, convolution, and waveform fidelity metrics.

Conventions pinned here and relied on everywhere else:

* STFT is Hann-windowed and centered (reflect padding), with frame count
  exactly ``ceil(len / hop)``.
* Mel filter rows are normalized to unit sum, so a flat magnitude spectrum
  maps to a flat mel vector.
* ``band_limit`` is a zero-phase spectral projection (exactly idempotent),
  keeping length and sample grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .audio import AudioBuffer

SNR_CLAMP_DB = 120.0
LOG_MEL_FLOOR = 1e-5


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass
class Spectrogram:
    """Complex STFT matrix with its analysis parameters.

    ``bins`` has shape (n_freq, n_frames) with n_freq = fft_size/2 + 1.
    ``length`` records the analysis length in samples when known, so that
    :func:`istft` can restore it exactly.
    """

    bins: np.ndarray
    fft_size: int
    hop: int
    sample_rate: int
    window: str = "hann"
    length: int | None = None

    def __post_init__(self):
        self.bins = np.asarray(self.bins)
        if self.bins.ndim != 2:
            raise ValueError("spectrogram bins must be 2-D (n_freq, n_frames)")
        if self.bins.shape[0] != self.fft_size // 2 + 1:
            raise ValueError(
                f"n_freq {self.bins.shape[0]} inconsistent with fft_size {self.fft_size}"
            )
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if not np.all(np.isfinite(self.bins)):
            raise ValueError("spectrogram entries must be finite")

    @property
    def n_freq(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)


@dataclass
class MelFilterbank:
    """Triangular mel filterbank with unit-sum rows.

    ``weights`` has shape (n_mels, n_freq). Every row has at least one
    nonzero entry and sums to 1.
    """

    weights: np.ndarray
    sample_rate: int
    fmin: float
    fmax: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("filterbank weights must be 2-D")
        if np.any(self.weights < 0):
            raise ValueError("filterbank weights must be non-negative")
        row_sums = self.weights.sum(axis=1)
        if np.any(row_sums <= 0):
            raise ValueError("every mel filter row needs at least one nonzero entry")

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def n_freq(self) -> int:
        return self.weights.shape[1]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """Build a triangular mel filterbank with rows normalized to unit sum."""
    if fmax is None:
        fmax = sample_rate / 2.0
    n_freq = fft_size // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_freq)
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    weights = np.zeros((n_mels, n_freq))
    for i in range(n_mels):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (freqs - lo) / max(center - lo, 1e-12)
        down = (hi - freqs) / max(hi - center, 1e-12)
        weights[i] = np.maximum(0.0, np.minimum(up, down))
        if weights[i].sum() == 0.0:
            # triangle narrower than a bin: pin it to the nearest bin
            weights[i, int(np.argmin(np.abs(freqs - center)))] = 1.0
    weights /= weights.sum(axis=1, keepdims=True)
    return MelFilterbank(weights, sample_rate, fmin, fmax)


def stft(audio: AudioBuffer, fft_size: int, hop: int) -> Spectrogram:
    """Centered Hann STFT with frame count exactly ceil(len / hop).

    The signal is reflect-padded by fft_size/2 on the left and by whatever
    the last frame needs on the right.
    """
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ValueError(f"fft_size must be a power of two, got {fft_size}")
    if not 1 <= hop <= fft_size:
        raise ValueError(f"hop must lie in [1, fft_size] (got hop={hop}, fft={fft_size})")
    x = audio.samples
    if len(x) < fft_size:
        raise ValueError(f"audio too short: {len(x)} samples < fft_size {fft_size}")
    n_frames = -(-len(x) // hop)  # ceil
    pad_left = fft_size // 2
    needed = (n_frames - 1) * hop + fft_size
    pad_right = needed - pad_left - len(x)
    xp = np.pad(x, (pad_left, max(pad_right, 0)), mode="reflect")
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx] * _hann_periodic(fft_size)[None, :]
    bins = np.fft.rfft(frames, axis=1).T
    return Spectrogram(bins, fft_size, hop, audio.sample_rate, length=len(x))


def istft(spec: Spectrogram, length: int | None = None) -> AudioBuffer:
    """Weighted overlap-add inversion with window-sum normalization.

    Output length is the recorded analysis length when known, else
    ``n_frames * hop``.
    """
    fft_size, hop = spec.fft_size, spec.hop
    window = _hann_periodic(fft_size)
    frames = np.fft.irfft(spec.bins.T, n=fft_size, axis=1)
    total = (spec.n_frames - 1) * hop + fft_size
    y = np.zeros(total)
    wsum = np.zeros(total)
    for m in range(spec.n_frames):
        sl = slice(m * hop, m * hop + fft_size)
        y[sl] += frames[m] * window
        wsum[sl] += window * window
    y = y / np.maximum(wsum, 1e-12)
    out_len = length if length is not None else spec.length
    if out_len is None:
        out_len = spec.n_frames * hop
    start = fft_size // 2
    out = y[start:start + out_len]
    if len(out) < out_len:
        out = np.pad(out, (0, out_len - len(out)))
    return AudioBuffer(out, spec.sample_rate)


def mel_project(spec: Spectrogram, fb: MelFilterbank) -> np.ndarray:
    """Project STFT magnitudes through the filterbank: (n_mels, n_frames)."""
    if fb.n_freq != spec.n_freq:
        raise ValueError(f"filterbank n_freq {fb.n_freq} != spectrogram n_freq {spec.n_freq}")
    return fb.weights @ spec.magnitude()


def log_mel(mel: np.ndarray, floor: float = LOG_MEL_FLOOR) -> np.ndarray:
    """Log-compress a mel magnitude matrix with the package-wide floor."""
    return np.log(np.maximum(mel, 0.0) + floor)


def spectral_convergence(est_mag: np.ndarray, target_mag: np.ndarray) -> float:
    """Relative Frobenius error between two magnitude matrices."""
    denom = np.linalg.norm(target_mag)
    if denom == 0.0:
        return 0.0 if np.linalg.norm(est_mag) == 0.0 else np.inf
    return float(np.linalg.norm(est_mag - target_mag) / denom)


def _mel_pseudo_inverse(fb: MelFilterbank, mel: np.ndarray) -> np.ndarray:
    """Approximate STFT magnitudes from mel values: pinv projection, clipped at 0."""
    return np.maximum(np.linalg.pinv(fb.weights) @ mel, 0.0)


def griffin_lim(target: np.ndarray, mode: str = "stft_magnitude",
                fb: MelFilterbank | None = None, iters: int = 32,
                rng_seed: int = 0, fft_size: int | None = None,
                hop: int | None = None, sample_rate: int = 8000,
                length: int | None = None, momentum: float = 0.99) -> AudioBuffer:
    """Iterative phase reconstruction from a magnitude target.

    Uses the momentum-accelerated update (the usual fast variant); set
    ``momentum=0`` for the plain alternating projections.

    Args:
        target: (n_freq, n_frames) STFT magnitudes, or (n_mels, n_frames)
            mel magnitudes when ``mode == "mel"``.
        mode: ``"stft_magnitude"`` or ``"mel"``. Mel targets are first lifted
            to STFT magnitudes through the filterbank pseudo-inverse
            (clipped at 0), then phase is estimated as usual.
        fb: filterbank, required in mel mode.
        iters: phase update count (>= 1).
        rng_seed: seed for the uniform random initial phase.
        fft_size: FFT size; inferred from n_freq in stft_magnitude mode.
        hop: hop size; defaults to fft_size // 4.
        length: output sample count; defaults to n_frames * hop.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    target = np.asarray(target, dtype=np.float64)
    if mode == "mel":
        if fb is None:
            raise ValueError("mel mode requires a filterbank")
        mag = _mel_pseudo_inverse(fb, target)
        fft_size = fft_size or 2 * (fb.n_freq - 1)
    elif mode == "stft_magnitude":
        mag = target
        fft_size = fft_size or 2 * (target.shape[0] - 1)
    else:
        raise ValueError(f"unknown griffin_lim mode {mode!r}")
    if mag.shape[0] != fft_size // 2 + 1:
        raise ValueError("magnitude rows inconsistent with fft_size")
    hop = hop or fft_size // 4
    out_len = length if length is not None else mag.shape[1] * hop
    rng = np.random.default_rng(rng_seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    momentum_prev = np.zeros_like(phase)
    audio = istft(Spectrogram(mag * phase, fft_size, hop, sample_rate, length=out_len))
    for _ in range(iters - 1):
        rebuilt = stft(audio, fft_size, hop).bins
        n = min(rebuilt.shape[1], mag.shape[1])
        stepped = rebuilt[:, :n] - (momentum / (1.0 + momentum)) * momentum_prev[:, :n]
        momentum_prev = rebuilt
        phase = stepped / np.maximum(np.abs(stepped), 1e-12)
        audio = istft(Spectrogram(mag[:, :n] * phase, fft_size, hop, sample_rate, length=out_len))
    return audio


def band_limit(audio: AudioBuffer, effective_rate: float) -> AudioBuffer:
    """Zero-phase low-pass at effective_rate/2, keeping length and sample grid.

    Implemented as a spectral projection (all rFFT bins above the cutoff
    zeroed), which is exactly idempotent and is the identity when
    effective_rate equals the sample rate.
    """
    if not 0 < effective_rate <= audio.sample_rate:
        raise ValueError(
            f"effective_rate {effective_rate} outside (0, {audio.sample_rate}]"
        )
    if effective_rate == audio.sample_rate:
        return audio.copy()
    n = len(audio)
    spectrum = np.fft.rfft(audio.samples)
    freqs = np.fft.rfftfreq(n, d=1.0 / audio.sample_rate)
    spectrum[freqs > effective_rate / 2.0] = 0.0
    return AudioBuffer(np.fft.irfft(spectrum, n=n), audio.sample_rate)


_DIRECT_CONV_LIMIT = 1 << 14


def convolve(dry: AudioBuffer, rir: AudioBuffer) -> AudioBuffer:
    """Full linear convolution; length = len(dry) + len(rir) - 1.

    Uses a direct sum for short inputs and FFT convolution for long ones;
    the two paths agree to ~1e-12 for unit-scale signals.
    """
    if dry.sample_rate != rir.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: dry {dry.sample_rate} Hz vs rir {rir.sample_rate} Hz"
        )
    if len(dry) * len(rir) <= _DIRECT_CONV_LIMIT:
        out = np.convolve(dry.samples, rir.samples)
    else:
        out = fftconvolve(dry.samples, rir.samples)
    return AudioBuffer(out, dry.sample_rate)


@dataclass(frozen=True)
class Fidelity:
    snr_db: float
    mse: float


def fidelity(ref: AudioBuffer, est: AudioBuffer) -> Fidelity:
    """SNR (dB, clamped at +120) and MSE between equal-length signals."""
    if len(ref) != len(est):
        raise ValueError(f"length mismatch: ref {len(ref)} vs est {len(est)}")
    if ref.sample_rate != est.sample_rate:
        raise ValueError("sample-rate mismatch between ref and est")
    r, e = ref.samples, est.samples
    ref_energy = float(np.sum(r * r))
    if ref_energy == 0.0:
        raise ValueError("SNR undefined for an all-zero reference")
    err = r - e
    err_energy = float(np.sum(err * err))
    if err_energy < 1e-24:
        snr = SNR_CLAMP_DB
    else:
        snr = min(10.0 * np.log10(ref_energy / err_energy), SNR_CLAMP_DB)
    return Fidelity(snr_db=float(snr), mse=float(np.mean(err * err)))


def match_length(ref: AudioBuffer, est: AudioBuffer) -> AudioBuffer:
    """Truncate or zero-pad ``est`` to the length of ``ref``."""
    if len(est) >= len(ref):
        return AudioBuffer(est.samples[:len(ref)], est.sample_rate)
    return AudioBuffer(np.pad(est.samples, (0, len(ref) - len(est))), est.sample_rate)

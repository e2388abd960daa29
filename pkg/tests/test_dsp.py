import numpy as np
import pytest

from rirflow.acoustics import estimate_rt60
from rirflow.audio import AudioBuffer
from rirflow.dsp import (Spectrogram, band_limit, convolve, fidelity, griffin_lim,
                         istft, match_length, mel_filterbank, mel_project,
                         spectral_convergence, stft)

from conftest import synthetic_decay

SR = 8000
FFT = 512
HOP = 128


def tone(freq, duration=1.0, sr=SR, amp=1.0):
    t = np.arange(int(duration * sr)) / sr
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), sr)


class TestStft:
    def test_silence_gives_zero_bins(self):
        spec = stft(AudioBuffer(np.zeros(SR), SR), FFT, HOP)
        assert np.all(spec.bins == 0)

    def test_sinusoid_bin_matches_direct_dft(self):
        buf = tone(1000.0)
        spec = stft(buf, FFT, HOP)
        # interior frames (away from reflect-padded edges) peak at bin 64
        interior = np.abs(spec.bins[:, 4:-4])
        assert np.all(np.argmax(interior, axis=0) == 64)
        # direct-DFT oracle on one interior frame extracted by hand
        m = 10
        start = m * HOP - FFT // 2
        frame = buf.samples[start:start + FFT] * (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(FFT) / FFT))
        oracle = np.array([np.sum(frame * np.exp(-2j * np.pi * k * np.arange(FFT) / FFT))
                           for k in range(FFT // 2 + 1)])
        assert np.allclose(spec.bins[:, m], oracle, atol=1e-9)

    def test_frame_count_is_ceil(self):
        assert stft(AudioBuffer(np.zeros(8000), SR), FFT, HOP).n_frames == 63
        assert stft(AudioBuffer(np.zeros(8192), SR), FFT, HOP).n_frames == 64

    def test_rejects_short_audio_and_bad_fft(self):
        with pytest.raises(ValueError):
            stft(AudioBuffer(np.zeros(100), SR), FFT, HOP)
        with pytest.raises(ValueError):
            stft(AudioBuffer(np.zeros(SR), SR), 500, 125)

    def test_parseval_consistency_interior(self):
        rng = np.random.default_rng(0)
        x = AudioBuffer(rng.standard_normal(1 << 15), SR)
        spec = stft(x, FFT, HOP)
        window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(FFT) / FFT)
        # frames fully inside the original signal
        first = FFT // HOP
        last = spec.n_frames - FFT // HOP - 1
        full_power = (np.abs(spec.bins[0, first:last]) ** 2
                      + 2 * np.sum(np.abs(spec.bins[1:-1, first:last]) ** 2, axis=0)
                      + np.abs(spec.bins[-1, first:last]) ** 2)
        est_energy = full_power.sum() / FFT / (window ** 2).sum() * HOP
        span = x.samples[(first - 1) * HOP:last * HOP]
        true_energy = np.sum(span ** 2)
        assert abs(est_energy - true_energy) / true_energy < 0.01


class TestIstft:
    def test_zero_spectrogram_gives_silence(self):
        spec = Spectrogram(np.zeros((FFT // 2 + 1, 20), dtype=complex), FFT, HOP, SR)
        out = istft(spec)
        assert np.all(out.samples == 0)
        assert len(out) == 20 * HOP

    def test_cola_roundtrip_white_noise(self):
        rng = np.random.default_rng(1)
        x = AudioBuffer(rng.standard_normal(SR), SR)
        back = istft(stft(x, FFT, HOP))
        assert len(back) == len(x)
        assert np.max(np.abs(back.samples - x.samples)) < 1e-6

    def test_roundtrip_preserves_rt60(self):
        x = synthetic_decay(0.5, seed=3)
        back = istft(stft(x, FFT, HOP))
        rt_in = estimate_rt60(x)
        rt_out = estimate_rt60(back)
        assert abs(rt_out - rt_in) / rt_in < 1e-3


class TestMelProject:
    def test_zero_spectrogram(self):
        fb = mel_filterbank(64, FFT, SR)
        spec = Spectrogram(np.zeros((FFT // 2 + 1, 5), dtype=complex), FFT, HOP, SR)
        assert np.all(mel_project(spec, fb) == 0)

    def test_flat_spectrum_maps_to_flat_mel(self):
        fb = mel_filterbank(64, FFT, SR)
        bins = np.full((FFT // 2 + 1, 7), 3.0, dtype=complex)
        spec = Spectrogram(bins, FFT, HOP, SR)
        mel = mel_project(spec, fb)
        assert np.allclose(mel, 3.0)

    def test_linearity_under_doubling(self):
        fb = mel_filterbank(64, FFT, SR)
        rng = np.random.default_rng(2)
        bins = rng.random((FFT // 2 + 1, 6)) * np.exp(1j * rng.random((FFT // 2 + 1, 6)))
        one = mel_project(Spectrogram(bins, FFT, HOP, SR), fb)
        two = mel_project(Spectrogram(2 * bins, FFT, HOP, SR), fb)
        assert np.allclose(two, 2 * one)

    def test_dimension_mismatch(self):
        fb = mel_filterbank(64, 256, SR)
        spec = Spectrogram(np.zeros((FFT // 2 + 1, 5), dtype=complex), FFT, HOP, SR)
        with pytest.raises(ValueError):
            mel_project(spec, fb)

    def test_rows_are_unit_sum_and_nonzero(self):
        for n_mels, fft, sr in [(64, 512, 8000), (128, 2048, 48000)]:
            fb = mel_filterbank(n_mels, fft, sr)
            assert np.allclose(fb.weights.sum(axis=1), 1.0)
            assert np.all((fb.weights > 0).sum(axis=1) >= 1)


class TestGriffinLim:
    def test_sinusoid_magnitudes_recovered(self):
        target = stft(tone(500.0), FFT, HOP).magnitude()
        out = griffin_lim(target, "stft_magnitude", iters=32, rng_seed=0,
                          fft_size=FFT, hop=HOP, sample_rate=SR)
        got = stft(out, FFT, HOP).magnitude()
        n = min(got.shape[1], target.shape[1])
        assert spectral_convergence(got[:, :n], target[:, :n]) < 0.1

    def test_zero_target_gives_silence(self):
        out = griffin_lim(np.zeros((FFT // 2 + 1, 10)), "stft_magnitude", iters=4,
                          fft_size=FFT, hop=HOP, sample_rate=SR)
        assert np.all(out.samples == 0)

    def test_error_non_increasing_over_iterations(self):
        for seed in range(20):
            target = stft(synthetic_decay(0.4, seed=seed), FFT, HOP).magnitude()

            def err(iters):
                out = griffin_lim(target, "stft_magnitude", iters=iters, rng_seed=seed,
                                  fft_size=FFT, hop=HOP, sample_rate=SR)
                got = stft(out, FFT, HOP).magnitude()
                n = min(got.shape[1], target.shape[1])
                return spectral_convergence(got[:, :n], target[:, :n])

            assert err(32) <= err(1) + 1e-12

    def test_mel_mode_requires_filterbank(self):
        with pytest.raises(ValueError):
            griffin_lim(np.zeros((64, 10)), "mel", fb=None)

    def test_mel_mode_runs(self):
        fb = mel_filterbank(64, FFT, SR)
        target = fb.weights @ stft(synthetic_decay(0.3, seed=1), FFT, HOP).magnitude()
        out = griffin_lim(target, "mel", fb=fb, iters=8, rng_seed=1,
                          fft_size=FFT, hop=HOP, sample_rate=SR, length=SR)
        assert len(out) == SR
        assert np.all(np.isfinite(out.samples))


class TestBandLimit:
    def test_identity_cutoff(self):
        rng = np.random.default_rng(5)
        x = AudioBuffer(rng.standard_normal(4096), SR)
        out = band_limit(x, SR)
        assert np.max(np.abs(out.samples - x.samples)) < 1e-9

    def test_stopband_attenuation(self):
        x = tone(3000.0)
        out = band_limit(x, 4000.0)
        ratio = np.sqrt(np.mean(out.samples ** 2) / np.mean(x.samples ** 2))
        assert 20 * np.log10(ratio) < -40.0

    def test_passband_preserved(self):
        x = tone(1000.0)
        out = band_limit(x, 4000.0)
        ratio = np.sqrt(np.mean(out.samples ** 2) / np.mean(x.samples ** 2))
        assert abs(20 * np.log10(ratio)) < 1.0

    def test_idempotent(self):
        rng = np.random.default_rng(6)
        x = AudioBuffer(rng.standard_normal(4000), SR)
        once = band_limit(x, 3000.0)
        twice = band_limit(once, 3000.0)
        assert np.max(np.abs(twice.samples - once.samples)) < 1e-6

    def test_rejects_out_of_range(self):
        x = tone(100.0)
        with pytest.raises(ValueError):
            band_limit(x, 0.0)
        with pytest.raises(ValueError):
            band_limit(x, SR + 1)


class TestConvolve:
    def test_unit_impulse_is_identity(self):
        rng = np.random.default_rng(7)
        dry = AudioBuffer(rng.standard_normal(200), SR)
        imp = AudioBuffer(np.r_[1.0, np.zeros(9)], SR)
        out = convolve(dry, imp)
        assert len(out) == 209
        assert np.allclose(out.samples[:200], dry.samples)
        # and the mirrored identity
        out2 = convolve(imp, dry)
        assert np.allclose(out2.samples[:200], dry.samples)

    def test_fft_path_matches_direct_sum(self):
        rng = np.random.default_rng(8)
        a = AudioBuffer(rng.standard_normal(256), SR)
        b = AudioBuffer(rng.standard_normal(256), SR)
        fast = convolve(a, b).samples
        slow = np.zeros(511)
        for n in range(511):
            for k in range(max(0, n - 255), min(n, 255) + 1):
                slow[n] += a.samples[k] * b.samples[n - k]
        assert np.max(np.abs(fast - slow)) < 1e-6

    def test_commutative_and_linear(self):
        rng = np.random.default_rng(9)
        a = AudioBuffer(rng.standard_normal(128), SR)
        b = AudioBuffer(rng.standard_normal(128), SR)
        c = AudioBuffer(rng.standard_normal(128), SR)
        assert np.allclose(convolve(a, b).samples, convolve(b, a).samples)
        lhs = convolve(AudioBuffer(a.samples + 2 * c.samples, SR), b).samples
        rhs = convolve(a, b).samples + 2 * convolve(c, b).samples
        assert np.allclose(lhs, rhs)

    def test_sample_rate_mismatch(self):
        with pytest.raises(ValueError):
            convolve(tone(100, sr=8000), tone(100, sr=16000))


class TestFidelity:
    def test_perfect_match_clamps(self):
        x = tone(440.0)
        fid = fidelity(x, x)
        assert fid.snr_db == 120.0
        assert fid.mse == 0.0

    def test_zero_estimate(self):
        x = tone(440.0)
        fid = fidelity(x, AudioBuffer(np.zeros(len(x)), SR))
        assert abs(fid.snr_db) < 1e-12
        assert np.isclose(fid.mse, np.mean(x.samples ** 2))

    def test_zero_reference_rejected(self):
        z = AudioBuffer(np.zeros(100), SR)
        with pytest.raises(ValueError):
            fidelity(z, z)

    def test_match_length(self):
        ref = tone(440.0)
        short = AudioBuffer(np.ones(10), SR)
        assert len(match_length(ref, short)) == len(ref)
        long = AudioBuffer(np.ones(2 * len(ref)), SR)
        assert len(match_length(ref, long)) == len(ref)

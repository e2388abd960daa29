import numpy as np
import pytest

from rirflow.acoustics import (RoomSpec, estimate_rt60, image_source_rir,
                               sabine_rt60, schroeder_edc, suggest_max_order)
from rirflow.audio import AudioBuffer

from conftest import synthetic_decay

SR = 8000


class TestRoomSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            RoomSpec((5, 5, 0), (0.2,) * 6, (1, 1, 1), (2, 2, 2))
        with pytest.raises(ValueError):
            RoomSpec((5, 5, 4), (1.5,) * 6, (1, 1, 1), (2, 2, 2))
        with pytest.raises(ValueError):
            RoomSpec((5, 5, 4), (0.2,) * 6, (6, 1, 1), (2, 2, 2))

    def test_dict_roundtrip(self, demo_room):
        assert RoomSpec.from_dict(demo_room.to_dict()) == demo_room


class TestSabine:
    def test_hand_value(self, demo_room):
        # 0.161 * 100 / (130 * 0.2)
        assert sabine_rt60(demo_room) == pytest.approx(0.161 * 100 / 26, rel=1e-12)

    def test_alpha_one_hand_value(self):
        room = RoomSpec((5, 5, 4), (1.0,) * 6, (1.5, 2.2, 1.7), (3.4, 3.1, 1.3))
        assert sabine_rt60(room) == pytest.approx(0.161 * 100 / 130, rel=1e-12)

    def test_doubling_absorption_halves_rt60(self, demo_room):
        doubled = RoomSpec(demo_room.dims, tuple(2 * a for a in demo_room.absorption),
                           demo_room.source, demo_room.mic)
        assert sabine_rt60(doubled) == pytest.approx(sabine_rt60(demo_room) / 2, rel=1e-12)

    def test_fully_reflective_rejected(self):
        room = RoomSpec((5, 5, 4), (0.0,) * 6, (1.5, 2.2, 1.7), (3.4, 3.1, 1.3))
        with pytest.raises(ValueError):
            sabine_rt60(room)


class TestImageSource:
    def test_free_field_direct_arrival(self):
        # d = 1 m at c = 343, sr = 8000: arrival near sample 23, amp ~ 1/(4 pi)
        room = RoomSpec((5, 5, 4), (1.0,) * 6, (2.0, 2.0, 1.5), (2.0, 2.0, 2.5))
        rir = image_source_rir(room, 0, SR, 0.05)
        peak = int(np.argmax(np.abs(rir.samples)))
        assert peak in (23, 24)
        assert rir.samples[peak] == pytest.approx(1.0 / (4 * np.pi), rel=0.2)

    def test_integer_delay_amplitude_exact(self):
        # distance chosen so the delay lands on the sample grid
        d = 343.0 * 24 / SR
        room = RoomSpec((5, 5, 4), (1.0,) * 6, (2.0, 2.0, 1.0), (2.0, 2.0, 1.0 + d))
        rir = image_source_rir(room, 0, SR, 0.05)
        assert rir.samples[24] == pytest.approx(1.0 / (4 * np.pi * d), rel=1e-6)

    def test_full_absorption_leaves_only_direct_path(self):
        room = RoomSpec((5, 5, 4), (1.0,) * 6, (1.5, 2.2, 1.7), (3.4, 3.1, 1.3))
        rir = image_source_rir(room, 30, SR, 0.5)
        direct = int(np.linalg.norm(np.subtract(room.source, room.mic)) / 343.0 * SR)
        tail = rir.samples[direct + 60:]
        assert np.sum(tail ** 2) < 1e-12

    def test_max_order_zero_equals_full_absorption(self):
        reflective = RoomSpec((5, 5, 4), (0.3,) * 6, (1.5, 2.2, 1.7), (3.4, 3.1, 1.3))
        order0 = image_source_rir(reflective, 0, SR, 0.1)
        absorbed = RoomSpec((5, 5, 4), (1.0,) * 6, (1.5, 2.2, 1.7), (3.4, 3.1, 1.3))
        free = image_source_rir(absorbed, 30, SR, 0.1)
        assert np.allclose(order0.samples, free.samples)

    def test_sabine_agreement_demo_room(self, demo_room):
        rir = image_source_rir(demo_room, suggest_max_order(demo_room), SR, 0.7)
        measured = estimate_rt60(rir)
        sabine = sabine_rt60(demo_room)
        assert abs(measured - sabine) / sabine < 0.25
        assert suggest_max_order(demo_room) >= 20

    def test_coincident_source_mic_rejected(self):
        with pytest.raises(ValueError):
            room = RoomSpec((5, 5, 4), (0.2,) * 6, (1.5, 2.2, 1.7), (1.5, 2.2, 1.7))
            image_source_rir(room, 10, SR, 0.5)

    def test_too_short_window_rejected(self, demo_room):
        with pytest.raises(ValueError):
            image_source_rir(demo_room, 10, SR, 0.0005)


class TestSchroederEdc:
    def test_unit_impulse(self):
        rir = AudioBuffer(np.r_[1.0, np.zeros(99)], SR)
        edc = schroeder_edc(rir)
        assert edc[0] == 0.0
        assert np.all(edc[1:] == -120.0)

    def test_ideal_exponential_slope(self):
        t60 = 0.5
        n = SR
        t = np.arange(n) / SR
        rir = AudioBuffer(10.0 ** (-3.0 * t / t60), SR)
        edc = schroeder_edc(rir)
        # closed form: EDC of exp envelope is a line of slope -60/T dB/s
        lo, hi = 100, int(0.6 * n)
        slope = np.polyfit(t[lo:hi], edc[lo:hi], 1)[0]
        assert slope == pytest.approx(-60.0 / t60, rel=0.01)

    def test_non_increasing(self):
        rng = np.random.default_rng(0)
        rir = AudioBuffer(rng.standard_normal(1000), SR)
        edc = schroeder_edc(rir)
        assert np.all(np.diff(edc) <= 1e-12)

    def test_zero_energy_rejected(self):
        with pytest.raises(ValueError):
            schroeder_edc(AudioBuffer(np.zeros(100), SR))


class TestEstimateRt60:
    @pytest.mark.parametrize("t60", [0.5, 2.0])
    def test_synthetic_decay_within_5pct(self, t60):
        duration = 1.0 if t60 <= 1.0 else 5.0
        estimates = [estimate_rt60(synthetic_decay(t60, duration=duration, seed=s))
                     for s in range(10)]
        assert np.mean(estimates) == pytest.approx(t60, rel=0.05)

    def test_time_reversed_rejected(self):
        # a reversed decay has no backward-integrable decay structure
        fwd = synthetic_decay(0.5, seed=1)
        rev = AudioBuffer(fwd.samples[::-1].copy(), SR)
        assert estimate_rt60(fwd, detailed=True).fit_rmse_db < 1.0
        with pytest.raises(ValueError):
            estimate_rt60(rev)

    def test_insufficient_decay_raises(self):
        # a flat signal never reaches -15 dB outside the truncation plunge
        flat = AudioBuffer(np.ones(1000), SR)
        with pytest.raises(ValueError):
            estimate_rt60(flat)
        with pytest.raises(ValueError):
            estimate_rt60(AudioBuffer(np.r_[1.0, np.zeros(99)], SR))

    def test_t10_fallback_flagged(self):
        # decays to about -18 dB over the buffer: T20 impossible, T10 works
        n = SR
        t = np.arange(n) / SR
        envelope = 10.0 ** (-18.0 / 20.0 * t)
        rng = np.random.default_rng(2)
        rir = AudioBuffer(rng.standard_normal(n) * envelope, SR)
        detailed = estimate_rt60(rir, detailed=True)
        assert detailed.fallback
        assert detailed.method == "t10"


class TestMonotonicity:
    def test_alpha_sweep_decreases_rt60(self):
        measured = []
        for alpha in (0.1, 0.17, 0.25, 0.33, 0.4):
            room = RoomSpec((5.0, 5.0, 4.0), (alpha,) * 6,
                            (1.5, 2.2, 1.7), (3.4, 3.1, 1.3))
            rir = image_source_rir(room, suggest_max_order(room), SR,
                                   min(1.0, sabine_rt60(room) * 0.7 + 0.15))
            measured.append(estimate_rt60(rir))
        assert all(a > b for a, b in zip(measured, measured[1:]))

    def test_energy_decay_after_direct_arrival(self, demo_room):
        rir = image_source_rir(demo_room, suggest_max_order(demo_room), SR, 0.6)
        energy = rir.samples ** 2
        direct = int(np.argmax(energy))
        window = 200
        blocks = [energy[i:i + window].sum()
                  for i in range(direct + window, len(energy) - window, window)]
        # non-increasing up to small fluctuation
        blocks = np.array(blocks)
        assert np.all(blocks[2:] <= blocks[:-2] * 1.5 + 1e-12)

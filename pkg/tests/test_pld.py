import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unipase.audio import Waveform
from unipase.pld import PacketLossMask, PldConfig, detect, mask_run_lengths
from tests.conftest import sine


def pld_oracle(samples, rate, cfg):
    """Packet-by-packet transcription of the detection rule."""
    p = int(round(rate * cfg.packet_duration))
    n = len(samples) // p
    mask = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        packet = samples[i * p : (i + 1) * p]
        ratio = np.count_nonzero(np.abs(packet) < cfg.amplitude_threshold) / p
        if ratio >= cfg.min_zero_ratio:
            mask[i] = 1
    return mask


class TestDetect:
    def test_all_silence_flagged(self):
        mask = detect(Waveform(np.zeros(16000), 16000))
        assert len(mask) == 50
        assert np.all(mask.flags == 1)

    def test_constant_amplitude_not_flagged(self):
        mask = detect(Waveform(np.full(16000, 0.5), 16000))
        assert np.all(mask.flags == 0)

    def test_zeroed_packets_flagged_exactly(self):
        wave = sine(440, 1.0, 16000)
        x = wave.samples.copy()
        x[3 * 320 : 8 * 320] = 0.0
        mask = detect(Waveform(x, 16000))
        expected = np.zeros(50, dtype=np.uint8)
        expected[3:8] = 1
        np.testing.assert_array_equal(mask.flags, expected)

    def test_matches_oracle_on_random_waveforms(self, rng):
        cfg = PldConfig()
        for _ in range(50):
            n = int(rng.integers(3200, 16001))
            x = rng.uniform(-1, 1, n) * rng.uniform(0, 1)
            # random zero spans
            for _ in range(int(rng.integers(0, 6))):
                start = int(rng.integers(0, n))
                span = int(rng.integers(100, 2000))
                x[start : start + span] = 0.0
            wave = Waveform(x, 16000)
            np.testing.assert_array_equal(
                detect(wave, cfg).flags, pld_oracle(x, 16000, cfg)
            )

    def test_non_integer_packet_errors(self):
        with pytest.raises(ValueError, match="non-integer"):
            detect(Waveform(np.zeros(1000), 16000), PldConfig(packet_duration=0.0003))

    def test_trailing_partial_packet_ignored(self):
        x = np.zeros(16000 + 100)
        x[:16000] = 0.5
        mask = detect(Waveform(x, 16000))
        assert len(mask) == 50  # floor division; the 100 trailing zeros never flagged

    def test_strictness_at_threshold(self):
        # samples exactly at the threshold are NOT counted silent (strict <)
        cfg = PldConfig(amplitude_threshold=1e-4)
        x = np.full(320, 1e-4)
        assert detect(Waveform(x, 16000), cfg).flags[0] == 0
        x2 = np.full(320, 0.99e-4)
        assert detect(Waveform(x2, 16000), cfg).flags[0] == 1

    def test_alignment_with_frame_count(self, rng):
        n = int(rng.integers(16000, 64000))
        wave = Waveform(rng.uniform(-1, 1, n), 16000)
        mask = detect(wave)
        assert len(mask) == n // 320
        assert mask.packet_samples == 320

    @given(gain=st.floats(min_value=1.0, max_value=1000.0))
    @settings(max_examples=25, deadline=None)
    def test_gain_idempotence(self, gain):
        # no sample in (0, threshold): zeros stay zero under gain, others stay above
        rng = np.random.default_rng(99)
        x = rng.uniform(0.001, 1.0, 6400) * rng.choice([-1, 1], 6400)
        x[640:1280] = 0.0
        base = detect(Waveform(x, 16000)).flags
        scaled = detect(Waveform(np.clip(x * gain, -1e6, 1e6), 16000)).flags
        np.testing.assert_array_equal(base, scaled)


class TestRunLengths:
    def test_no_losses(self):
        mask = PacketLossMask(np.zeros(3), 320)
        assert mask_run_lengths(mask) == []

    def test_enumerated_example(self):
        mask = PacketLossMask(np.array([0, 1, 1, 0, 1, 1, 1]), 320)
        assert mask_run_lengths(mask) == [(1, 2), (4, 3)]

    def test_matches_scan_oracle(self, rng):
        for _ in range(100):
            flags = rng.integers(0, 2, int(rng.integers(1, 80)))
            mask = PacketLossMask(flags, 320)
            runs = mask_run_lengths(mask)
            # linear scan oracle
            expected = []
            start = None
            for i, f in enumerate(flags):
                if f and start is None:
                    start = i
                elif not f and start is not None:
                    expected.append((start, i - start))
                    start = None
            if start is not None:
                expected.append((start, len(flags) - start))
            assert runs == expected

    def test_longest_burst_property(self):
        mask = PacketLossMask(np.array([1, 1, 0, 1, 1, 1, 0, 1]), 320)
        assert mask.longest_burst == 3
        assert mask.loss_fraction == pytest.approx(6 / 8)

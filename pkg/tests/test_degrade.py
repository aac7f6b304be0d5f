import os
import stat

import numpy as np
import pytest

from unipase.audio import Waveform, snr_db, stft
from unipase.degrade import (
    Banks,
    BandwidthSpec,
    ClippingSpec,
    CodecSpec,
    CodecToolError,
    CorpusManifest,
    DegradationRecipe,
    ManifestError,
    NoiseSpec,
    PacketLossSpec,
    apply_bandwidth_limit,
    apply_clipping,
    apply_codec,
    apply_packet_loss,
    apply_reverb,
    codec_surrogate,
    degrade,
    sample_recipe,
    scale_noise_to_snr,
    surrogate_bits,
)
from unipase.pld import detect
from tests.conftest import sine, white_noise


class TestSampleRecipe:
    def test_deterministic_under_seed(self):
        r1 = sample_recipe(np.random.default_rng(42))
        r2 = sample_recipe(np.random.default_rng(42))
        assert r1.to_dict() == r2.to_dict()

    def test_distinct_extra_types(self):
        for seed in range(500):
            recipe = sample_recipe(np.random.default_rng(seed))
            kinds = [e.kind for e in recipe.extra]
            assert len(set(kinds)) == len(kinds)
            assert len(kinds) <= 3

    def test_expected_extra_count(self):
        # arithmetic from the mixture: 0*0.25 + 1*0.40 + 2*0.20 + 3*0.15 = 1.25
        probs = (0.25, 0.40, 0.20, 0.15)
        expected = sum(k * p for k, p in enumerate(probs))
        assert expected == pytest.approx(1.25)
        assert expected / 4 == pytest.approx(0.3125)

    def test_marginals_monte_carlo(self):
        rng = np.random.default_rng(7)
        n = 20000
        counts = {k: 0 for k in ("clipping", "bandwidth", "codec", "packet_loss")}
        reverb = wind = 0
        for _ in range(n):
            r = sample_recipe(rng)
            for e in r.extra:
                counts[e.kind] += 1
            reverb += r.reverb_pick is not None
            wind += r.noise.is_wind
        for k, c in counts.items():
            assert c / n == pytest.approx(0.3125, abs=0.015), k
        assert reverb / n == pytest.approx(0.5, abs=0.015)
        assert wind / n == pytest.approx(0.05, abs=0.007)

    def test_parameter_ranges(self):
        rng = np.random.default_rng(3)
        for _ in range(2000):
            r = sample_recipe(rng)
            assert -5.0 <= r.noise.snr_db <= 15.0
            for e in r.extra:
                if e.kind == "clipping":
                    assert 0.0 <= e.qmin <= 0.1 and 0.9 <= e.qmax <= 1.0
                elif e.kind == "bandwidth":
                    assert e.limit_hz == 4000.0
                elif e.kind == "codec":
                    assert e.format in ("mp3", "ogg") and -1.0 <= e.qscale <= 10.0
                elif e.kind == "packet_loss":
                    assert 0.05 <= e.rate_fraction <= 0.25
                    assert e.duration_s == 0.020 and e.max_continuous == 10

    def test_round_trip_serialization(self):
        for seed in range(50):
            r = sample_recipe(np.random.default_rng(seed))
            assert DegradationRecipe.from_dict(r.to_dict()).to_dict() == r.to_dict()


class TestScaleNoiseToSnr:
    def test_equal_power_unit_gain(self, rng):
        clean = white_noise(0.5, 16000, rng)
        noise = Waveform(np.roll(clean.samples, 100), 16000)
        out = scale_noise_to_snr(clean, noise, 0.0)
        np.testing.assert_allclose(out.samples, clean.samples + noise.samples,
                                   atol=1e-12)

    def test_gain_power_law(self, rng):
        clean = white_noise(0.5, 16000, rng)
        noise = white_noise(0.5, 16000, np.random.default_rng(5))
        g0 = (scale_noise_to_snr(clean, noise, 0.0).samples - clean.samples)
        g20 = (scale_noise_to_snr(clean, noise, 20.0).samples - clean.samples)
        ratio = np.linalg.norm(g0) / np.linalg.norm(g20)
        assert ratio == pytest.approx(10.0, rel=1e-9)

    def test_round_trip_measurement(self, rng):
        clean = white_noise(0.7, 16000, rng)
        noise = white_noise(0.7, 16000, np.random.default_rng(9))
        out = scale_noise_to_snr(clean, noise, 7.3)
        residual = Waveform(out.samples - clean.samples, 16000)
        assert snr_db(clean, residual) == pytest.approx(7.3, abs=1e-6)

    def test_silent_inputs_error(self, rng):
        silent = Waveform(np.zeros(1600), 16000)
        live = white_noise(0.1, 16000, rng)
        with pytest.raises(ValueError, match="silent"):
            scale_noise_to_snr(silent, live, 0.0)
        with pytest.raises(ValueError, match="silent"):
            scale_noise_to_snr(live, silent, 0.0)


class TestApplyReverb:
    def test_unit_impulse_identity(self, rng):
        x = white_noise(0.3, 16000, rng)
        rir = Waveform(np.array([1.0]), 16000)
        np.testing.assert_allclose(apply_reverb(x, rir).samples, x.samples, atol=1e-15)

    def test_delayed_impulse_shifts(self, rng):
        x = white_noise(0.3, 16000, rng)
        d = 37
        rir = Waveform(np.eye(1, d + 1, d).ravel(), 16000)
        out = apply_reverb(x, rir)
        np.testing.assert_allclose(out.samples[d:], x.samples[:-d], atol=1e-12)
        np.testing.assert_allclose(out.samples[:d], 0.0, atol=1e-12)

    def test_matches_naive_convolution(self, rng):
        x = white_noise(0.1, 16000, rng)
        rir = Waveform(np.random.default_rng(3).standard_normal(200) * 0.1, 16000)
        out = apply_reverb(x, rir)
        oracle = np.zeros(len(x))
        for k, h in enumerate(rir.samples):
            seg = x.samples[: len(x) - k] if k else x.samples
            oracle[k:] += h * seg
        np.testing.assert_allclose(out.samples, oracle, atol=1e-6)

    def test_empty_rir_errors(self, rng):
        with pytest.raises(ValueError, match="empty"):
            apply_reverb(white_noise(0.1, 16000, rng), Waveform(np.zeros(0), 16000))

    def test_length_preserved(self, rng):
        x = white_noise(0.2, 16000, rng)
        rir = white_noise(0.05, 16000, np.random.default_rng(8))
        assert len(apply_reverb(x, rir)) == len(x)


class TestApplyClipping:
    def test_extreme_quantiles_identity(self, rng):
        x = white_noise(0.2, 16000, rng)
        np.testing.assert_array_equal(apply_clipping(x, 0.0, 1.0).samples, x.samples)

    def test_output_within_bounds(self, rng):
        x = white_noise(0.2, 16000, rng)
        out = apply_clipping(x, 0.05, 0.95)
        lo, hi = np.quantile(x.samples, [0.05, 0.95])
        assert out.samples.min() >= lo and out.samples.max() <= hi

    def test_uniform_ramp_quantiles(self):
        x = Waveform(np.linspace(-1.0, 1.0, 10001), 16000)
        out = apply_clipping(x, 0.05, 0.95)
        # sort-based quantile oracle on the ramp
        s = np.sort(x.samples)
        lo = s[int(round(0.05 * (len(s) - 1)))]
        hi = s[int(round(0.95 * (len(s) - 1)))]
        assert out.samples.min() == pytest.approx(lo, abs=1e-9)
        assert out.samples.max() == pytest.approx(hi, abs=1e-9)
        assert lo == pytest.approx(-0.9, abs=1e-3)
        assert hi == pytest.approx(0.9, abs=1e-3)

    def test_quantile_matches_sort_oracle(self, rng):
        x = white_noise(0.1, 16000, rng)
        out = apply_clipping(x, 0.03, 0.97)
        s = np.sort(x.samples)
        # linear-interpolation quantile oracle
        def q(p):
            idx = p * (len(s) - 1)
            lo_i, frac = int(np.floor(idx)), idx - int(np.floor(idx))
            return s[lo_i] * (1 - frac) + s[min(lo_i + 1, len(s) - 1)] * frac
        np.testing.assert_allclose(
            out.samples, np.clip(x.samples, q(0.03), q(0.97)), atol=1e-12
        )

    def test_out_of_range_errors(self, rng):
        with pytest.raises(ValueError):
            apply_clipping(white_noise(0.1, 16000, rng), 0.2, 0.95)


class TestApplyBandwidthLimit:
    def band_energy_db(self, wave, lo, hi):
        spec = stft(wave, 2048, 512)
        freqs = np.arange(spec.n_bins) * spec.bin_hz
        sel = (freqs >= lo) & (freqs < hi)
        interior = np.abs(spec.bins[:, 4:-4]) ** 2
        return 10 * np.log10(interior[sel].mean() + 1e-30)

    def test_passband_tone_preserved(self):
        x = sine(1000, 1.0, 16000, amplitude=0.5)
        out = apply_bandwidth_limit(x, 4000)
        inner = slice(2000, -2000)
        gain = 20 * np.log10(np.std(out.samples[inner]) / np.std(x.samples[inner]))
        assert abs(gain) <= 0.5

    def test_stopband_tone_attenuated(self):
        x = sine(7000, 1.0, 16000, amplitude=0.5)
        out = apply_bandwidth_limit(x, 4000)
        inner = slice(2000, -2000)
        atten = 20 * np.log10(np.std(out.samples[inner]) / np.std(x.samples[inner]))
        assert atten <= -40

    def test_band_energies_via_dft(self, rng):
        x = white_noise(1.0, 16000, rng)
        out = apply_bandwidth_limit(x, 4000)
        pass_db = self.band_energy_db(out, 100, 3800) - self.band_energy_db(x, 100, 3800)
        stop_db = self.band_energy_db(out, 4400, 7900) - self.band_energy_db(x, 4400, 7900)
        assert abs(pass_db) < 0.5
        assert stop_db < -40

    def test_silence_stays_silent(self):
        out = apply_bandwidth_limit(Waveform(np.zeros(8000), 16000), 4000)
        assert np.all(out.samples == 0)

    def test_limit_above_nyquist_errors(self, rng):
        with pytest.raises(ValueError):
            apply_bandwidth_limit(white_noise(0.1, 16000, rng), 9000)


class TestCodec:
    def test_surrogate_disabled_is_identity(self, rng):
        x = white_noise(0.2, 16000, rng)
        out = codec_surrogate(x, 16.0)
        np.testing.assert_array_equal(out.samples, x.samples)

    def test_surrogate_4bit_error_bound(self):
        x = sine(500, 0.5, 16000, amplitude=0.9)
        out = codec_surrogate(x, 4.0)
        inner = slice(1500, -1500)  # skip FIR edge transients
        err = np.max(np.abs(out.samples[inner] - x.samples[inner]))
        assert err <= 2 ** -4

    def test_qscale_bit_mapping(self):
        assert surrogate_bits(-1.0) == pytest.approx(10.0)
        assert surrogate_bits(10.0) == pytest.approx(4.0)

    def test_external_tool_round_trip(self, tmp_path, rng, monkeypatch):
        tool = tmp_path / "mock_codec.py"
        tool.write_text(
            "#!/usr/bin/env python3\n"
            "import shutil, sys\n"
            "shutil.copyfile(sys.argv[1], sys.argv[2])\n"
        )
        tool.chmod(tool.stat().st_mode | stat.S_IEXEC)
        monkeypatch.setenv("UNIPASE_CODEC_TOOL", str(tool))
        x = Waveform(np.zeros(3200), 16000)
        out = apply_codec(x, CodecSpec(format="mp3", qscale=2.0))
        assert np.max(np.abs(out.samples)) <= 1e-6  # silence within codec floor
        assert len(out) == len(x)

    def test_missing_tool_error_names_tool(self, rng, monkeypatch):
        monkeypatch.setenv("UNIPASE_CODEC_TOOL", "/nonexistent/codec-bin")
        with pytest.raises(CodecToolError, match="codec-bin"):
            apply_codec(white_noise(0.1, 16000, rng), CodecSpec())

    def test_failing_tool_error(self, tmp_path, rng, monkeypatch):
        tool = tmp_path / "bad_codec.py"
        tool.write_text("#!/usr/bin/env python3\nimport sys\nsys.exit(3)\n")
        tool.chmod(tool.stat().st_mode | stat.S_IEXEC)
        monkeypatch.setenv("UNIPASE_CODEC_TOOL", str(tool))
        with pytest.raises(CodecToolError, match="exited 3"):
            apply_codec(white_noise(0.1, 16000, rng), CodecSpec())

    def test_surrogate_used_without_tool(self, rng, monkeypatch):
        monkeypatch.delenv("UNIPASE_CODEC_TOOL", raising=False)
        x = white_noise(0.2, 16000, rng)
        out = apply_codec(x, CodecSpec(format="ogg", qscale=10.0))
        assert not np.array_equal(out.samples, x.samples)


class TestApplyPacketLoss:
    def test_quarter_rate_on_100_packets(self, rng):
        wave = white_noise(2.0, 16000, rng)  # 100 packets of 320
        out, mask = apply_packet_loss(wave, 0.25, rng=rng)
        assert mask.flags.sum() == 25
        assert mask.longest_burst <= 10
        for i in np.flatnonzero(mask.flags):
            assert np.all(out.samples[i * 320 : (i + 1) * 320] == 0)

    def test_minimum_rate_20_packets(self, rng):
        wave = white_noise(0.4, 16000, rng)  # 20 packets
        _, mask = apply_packet_loss(wave, 0.05, rng=rng)
        assert mask.flags.sum() == 1

    def test_detect_recovers_ground_truth(self, rng):
        wave = white_noise(2.0, 16000, rng, amplitude=0.4)
        out, mask = apply_packet_loss(wave, 0.2, rng=rng)
        detected = detect(out)
        # every zeroed packet is detected; extra detections only where the
        # original was already near-silent (none for dense white noise)
        np.testing.assert_array_equal(detected.flags, mask.flags)

    def test_legality_over_many_masks(self, rng):
        wave = white_noise(1.5, 16000, rng)
        n = len(wave) // 320
        for _ in range(200):
            frac = rng.uniform(0.05, 0.25)
            _, mask = apply_packet_loss(wave, frac, rng=rng)
            assert mask.longest_burst <= 10
            assert abs(mask.loss_fraction - frac) <= 1.0 / n

    def test_too_short_errors(self, rng):
        with pytest.raises(ValueError, match="shorter than one packet"):
            apply_packet_loss(Waveform(np.zeros(100), 16000), 0.1, rng=rng)

    def test_out_of_range_fraction(self, rng):
        with pytest.raises(ValueError):
            apply_packet_loss(white_noise(1.0, 16000, rng), 0.5, rng=rng)


class TestManifestAndBanks:
    def test_load_and_roles(self, corpus):
        manifest = CorpusManifest.load(corpus)
        assert len(manifest.by_role("clean")) == 4
        assert len(manifest.by_role("noise")) == 2
        assert len(manifest.by_role("wind")) == 1
        assert len(manifest.by_role("rir")) == 2

    def test_missing_file_errors(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"path": "gone.wav", "role": "clean", "rate": 16000, "duration_s": 1.0}\n')
        with pytest.raises(ManifestError, match="missing file"):
            CorpusManifest.load(bad)

    def test_malformed_line_errors(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("not json at all\n")
        with pytest.raises(ManifestError, match="bad manifest record"):
            CorpusManifest.load(bad)

    def test_unknown_role_errors(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"path": "x.wav", "role": "mystery", "rate": 16000, "duration_s": 1.0}\n')
        with pytest.raises(ManifestError, match="unknown role"):
            CorpusManifest.load(bad)

    def test_empty_role_errors(self, corpus):
        banks = Banks(CorpusManifest.load(corpus))
        manifest = CorpusManifest(banks.manifest.by_role("clean"),
                                  banks.manifest.base_dir)
        with pytest.raises(ManifestError, match="role 'wind'"):
            Banks(manifest).get("wind", 0, 16000)

    def test_noise_segment_tiles_short_clips(self, corpus):
        banks = Banks(CorpusManifest.load(corpus))
        seg = banks.noise_segment("noise", 0, 123, 16000, 16000 * 5)
        assert len(seg) == 16000 * 5


class TestDegrade:
    def test_empty_recipe_identity(self, corpus, rng):
        banks = Banks(CorpusManifest.load(corpus))
        clean = white_noise(1.0, 16000, rng)
        recipe = DegradationRecipe(reverb_pick=None, noise=None, extra=[])
        noisy, target, _ = degrade(clean, banks, recipe)
        np.testing.assert_array_equal(noisy.samples, clean.samples)
        np.testing.assert_array_equal(target.samples, clean.samples)

    def test_noise_only_hits_target_snr(self, corpus, rng):
        banks = Banks(CorpusManifest.load(corpus))
        clean = white_noise(1.0, 16000, rng)
        recipe = DegradationRecipe(
            reverb_pick=None,
            noise=NoiseSpec(pick=0, offset_pick=0, snr_db=0.0, is_wind=False),
            extra=[],
        )
        noisy, target, _ = degrade(clean, banks, recipe)
        residual = Waveform(noisy.samples - target.samples, 16000)
        assert snr_db(target, residual) == pytest.approx(0.0, abs=1e-6)

    def test_deterministic_under_fixed_recipe(self, corpus, rng):
        banks = Banks(CorpusManifest.load(corpus))
        clean = white_noise(1.0, 16000, rng)
        recipe = sample_recipe(np.random.default_rng(11))
        a, _, _ = degrade(clean, banks, recipe)
        b, _, _ = degrade(clean, banks, recipe)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_target_is_dry_clean(self, corpus, rng):
        banks = Banks(CorpusManifest.load(corpus))
        clean = white_noise(1.0, 16000, rng)
        for seed in range(10):
            recipe = sample_recipe(np.random.default_rng(seed))
            _, target, _ = degrade(clean, banks, recipe)
            np.testing.assert_array_equal(target.samples, clean.samples)

    def test_full_recipe_applies(self, corpus, rng):
        banks = Banks(CorpusManifest.load(corpus))
        clean = white_noise(2.0, 16000, rng)
        recipe = DegradationRecipe(
            reverb_pick=1,
            noise=NoiseSpec(pick=0, offset_pick=5, snr_db=10.0, is_wind=True),
            extra=[ClippingSpec(0.02, 0.98), BandwidthSpec(),
                   PacketLossSpec(rate_fraction=0.1, seed=3)],
        )
        noisy, target, _ = degrade(clean, banks, recipe)
        assert len(noisy) == len(clean)
        assert not np.array_equal(noisy.samples, clean.samples)

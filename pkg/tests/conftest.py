import json

import numpy as np
import pytest

from unipase.audio import Waveform, write_wav


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(freq_hz, duration_s, rate, amplitude=1.0, phase=0.0):
    t = np.arange(int(round(duration_s * rate))) / rate
    return Waveform(amplitude * np.sin(2 * np.pi * freq_hz * t + phase), rate)


def white_noise(duration_s, rate, rng, amplitude=0.3):
    n = int(round(duration_s * rate))
    return Waveform(amplitude * rng.standard_normal(n), rate)


@pytest.fixture
def tone():
    return sine


def speechlike(duration_s, rate, rng, f0=120.0):
    """Harmonic tone with slow amplitude/pitch modulation plus a noise floor;
    stands in for speech in synthetic corpora."""
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    f = f0 * (1.0 + 0.1 * np.sin(2 * np.pi * 0.7 * t + rng.uniform(0, 6)))
    phase = 2 * np.pi * np.cumsum(f) / rate
    x = np.zeros(n)
    for h, a in ((1, 1.0), (2, 0.5), (3, 0.3), (5, 0.15), (8, 0.08)):
        x += a * np.sin(h * phase + rng.uniform(0, 6))
    env = 0.4 + 0.35 * np.sin(2 * np.pi * rng.uniform(1.5, 3.5) * t + rng.uniform(0, 6))
    x = x * env + 0.01 * rng.standard_normal(n)
    return Waveform(0.5 * x / np.max(np.abs(x)), rate)


def build_corpus(root, rng, n_clean=4, n_noise=2, n_wind=1, n_rir=2,
                 clean_s=2.0, rate=16000, rates=None):
    """Write a small synthetic corpus plus manifest.jsonl; returns manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    records = []

    def add(name, wave, role):
        write_wav(root / name, wave, encoding="float32")
        records.append({"path": name, "role": role, "rate": wave.rate,
                        "duration_s": wave.duration_s})

    clean_rates = rates or [rate] * n_clean
    for i in range(n_clean):
        r = clean_rates[i % len(clean_rates)]
        add(f"clean_{i:03d}.wav", speechlike(clean_s, r, rng), "clean")
    for i in range(n_noise):
        add(f"noise_{i:03d}.wav", white_noise(clean_s, rate, rng, 0.2), "noise")
    for i in range(n_wind):
        low = white_noise(clean_s, rate, rng, 0.3)
        k = np.ones(50) / 50
        add(f"wind_{i:03d}.wav", Waveform(np.convolve(low.samples, k, "same"), rate),
            "wind")
    for i in range(n_rir):
        ir = np.zeros(int(0.12 * rate))
        ir[0] = 1.0
        decay = np.exp(-np.arange(len(ir)) / (0.02 * rate))
        ir += 0.3 * rng.standard_normal(len(ir)) * decay
        add(f"rir_{i:03d}.wav", Waveform(ir, rate), "rir")

    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return manifest


@pytest.fixture
def corpus(tmp_path, rng):
    return build_corpus(tmp_path / "corpus", rng)

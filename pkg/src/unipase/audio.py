"""Shared deterministic signal primitives.

STFT/iSTFT, rational-rate resampling, Mel filterbanks, SNR utilities and
WAV file I/O. Everything here is a pure function of its inputs; the STFT
pair is backed by torch so the same framing convention serves both the
offline operations and the differentiable synthesis heads.

Conventions (fixed, relied upon by every downstream module):
  * Framing: center-padded with zeros, frame count T = 1 + floor(L / hop).
  * Window: periodic windows from the table below; the perfect
    reconstruction (nonzero overlap-add) condition is checked up front.
  * Resampler: polyphase windowed-sinc, Kaiser design with 80 dB target
    attenuation and 32 taps per polyphase branch (>= 60 dB stopband with
    margin); output length round(L * target / source), ties rounded up.
  * Mel: HTK mel scale, triangular filters, magnitudes clamped at 1e-5
    before the natural log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch

#: Sampling rates accepted at pipeline boundaries.
BOUNDARY_RATES = (8000, 16000, 22050, 24000, 32000, 44100, 48000)

#: Magnitudes are clamped here before log compression (prevents -inf on silence).
MEL_LOG_FLOOR = 1e-5

#: Resampler design constants.
RESAMPLE_TAPS_PER_PHASE = 32
RESAMPLE_ATTENUATION_DB = 80.0

_WINDOW_NAMES = ("hann", "hamming", "blackman", "rect")


class UnsupportedWavError(ValueError):
    """WAV file uses an encoding outside mono 16-bit PCM / 32-bit float."""


@dataclass
class Waveform:
    """A mono sample sequence with its sampling rate."""

    samples: np.ndarray
    rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains NaN or Inf samples")
        if self.rate <= 0:
            raise ValueError(f"sampling rate must be positive, got {self.rate}")
        self.rate = int(self.rate)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.rate


@dataclass
class Spectrogram:
    """One-sided complex STFT grid plus its analysis parameters."""

    bins: np.ndarray  # complex, shape (F, T_frames)
    fft_size: int
    hop: int
    rate: int
    window: str = "hann"

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex128)
        if self.bins.ndim != 2:
            raise ValueError(f"spectrogram must be 2-D, got shape {self.bins.shape}")
        if self.bins.shape[0] != self.fft_size // 2 + 1:
            raise ValueError(
                f"bin count {self.bins.shape[0]} inconsistent with fft_size "
                f"{self.fft_size} (expected {self.fft_size // 2 + 1})"
            )
        if self.hop > self.fft_size:
            raise ValueError(f"hop {self.hop} exceeds fft_size {self.fft_size}")

    @property
    def n_bins(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    @property
    def bin_hz(self) -> float:
        """Frequency spacing of adjacent bins in Hz."""
        return self.rate / self.fft_size


@dataclass
class MelConfig:
    """Parameters of a log-Mel analysis."""

    fft_size: int
    hop: int
    n_mels: int
    rate: int
    fmin: float = 0.0
    fmax: float | None = None

    def __post_init__(self):
        if self.fmax is None:
            self.fmax = self.rate / 2
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not self.fmin < self.fmax <= self.rate / 2:
            raise ValueError(
                f"need fmin < fmax <= rate/2, got fmin={self.fmin} "
                f"fmax={self.fmax} rate={self.rate}"
            )


def freq_to_bin(freq_hz: float, fft_size: int, rate: int) -> int:
    """Nearest one-sided FFT bin index for a frequency."""
    return int(round(freq_hz * fft_size / rate))


@lru_cache(maxsize=None)
def _window_array(name: str, size: int) -> np.ndarray:
    n = np.arange(size)
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / size)
    if name == "hamming":
        return 0.54 - 0.46 * np.cos(2 * np.pi * n / size)
    if name == "blackman":
        return (0.42 - 0.5 * np.cos(2 * np.pi * n / size)
                + 0.08 * np.cos(4 * np.pi * n / size))
    if name == "rect":
        return np.ones(size)
    raise ValueError(f"unknown window {name!r}; choose from {_WINDOW_NAMES}")


def window_tensor(name: str, size: int, dtype: torch.dtype = torch.float32,
                  device: torch.device | str = "cpu") -> torch.Tensor:
    return torch.as_tensor(_window_array(name, size), dtype=dtype, device=device)


@lru_cache(maxsize=None)
def _check_perfect_reconstruction(window: str, fft_size: int, hop: int) -> None:
    """Raise unless (window, hop) admits perfect overlap-add reconstruction.

    The inverse divides by the squared-window envelope, so the applicable
    condition is NOLA (nonzero overlap-add of the squared window).
    """
    w = _window_array(window, fft_size)
    if not scipy.signal.check_NOLA(w, fft_size, fft_size - hop):
        raise ValueError(
            f"window {window!r} with fft_size={fft_size} hop={hop} does not "
            "satisfy the overlap-add reconstruction condition"
        )


def stft_tensor(x: torch.Tensor, fft_size: int, hop: int,
                window: str = "hann") -> torch.Tensor:
    """Differentiable one-sided STFT of a (L,) or (B, L) tensor.

    Center padding with zeros; T = 1 + floor(L / hop).
    """
    _check_perfect_reconstruction(window, fft_size, hop)
    w = window_tensor(window, fft_size, dtype=x.dtype, device=x.device)
    return torch.stft(
        x, fft_size, hop_length=hop, window=w, center=True,
        pad_mode="constant", return_complex=True, onesided=True,
    )


def istft_tensor(spec: torch.Tensor, fft_size: int, hop: int, out_len: int,
                 window: str = "hann") -> torch.Tensor:
    """Inverse of :func:`stft_tensor` for (F, T) or (B, F, T) complex input."""
    _check_perfect_reconstruction(window, fft_size, hop)
    real_dtype = torch.float64 if spec.dtype == torch.complex128 else torch.float32
    w = window_tensor(window, fft_size, dtype=real_dtype, device=spec.device)
    return torch.istft(
        spec, fft_size, hop_length=hop, window=w, center=True, length=out_len,
    )


def stft(wave: Waveform, fft_size: int, hop: int, window: str = "hann") -> Spectrogram:
    """One-sided STFT of a waveform.

    The signal must span at least one analysis frame.
    """
    if len(wave) < fft_size:
        raise ValueError(
            f"signal of {len(wave)} samples is shorter than one frame ({fft_size})"
        )
    bins = stft_tensor(torch.from_numpy(wave.samples), fft_size, hop, window)
    return Spectrogram(bins.numpy(), fft_size, hop, wave.rate, window)


def istft(spec: Spectrogram, out_len: int) -> Waveform:
    """Inverse STFT back to a waveform of ``out_len`` samples.

    ``out_len`` must be consistent with the stored frame count under the
    framing convention (T = 1 + floor(out_len / hop)).
    """
    expected_frames = 1 + out_len // spec.hop
    if spec.n_frames != expected_frames:
        raise ValueError(
            f"out_len {out_len} implies {expected_frames} frames but the "
            f"spectrogram has {spec.n_frames}"
        )
    y = istft_tensor(torch.from_numpy(spec.bins), spec.fft_size, spec.hop,
                     out_len, spec.window)
    return Waveform(y.numpy(), spec.rate)


@lru_cache(maxsize=64)
def _resample_filter(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    half_len = RESAMPLE_TAPS_PER_PHASE * max_rate
    beta = scipy.signal.kaiser_beta(RESAMPLE_ATTENUATION_DB)
    # cutoff at the smaller of the two Nyquists, in units of the upsampled rate
    return scipy.signal.firwin(2 * half_len + 1, 1.0 / max_rate,
                               window=("kaiser", beta))


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Rational-ratio polyphase resampling.

    Output length is round(L * target / source) with half-up tie breaking.
    A same-rate call is a bit-identical passthrough.
    """
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == wave.rate:
        return Waveform(wave.samples.copy(), wave.rate)
    g = gcd(wave.rate, target_rate)
    up, down = target_rate // g, wave.rate // g
    out = scipy.signal.resample_poly(wave.samples, up, down,
                                     window=_resample_filter(up, down))
    n_out = (len(wave) * up + down // 2) // down
    if len(out) < n_out:  # resample_poly returns ceil(L*up/down) >= round
        out = np.pad(out, (0, n_out - len(out)))
    return Waveform(out[:n_out], target_rate)


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular HTK-mel filterbank, shape (n_mels, fft_size // 2 + 1)."""
    n_bins = cfg.fft_size // 2 + 1
    freqs = np.arange(n_bins) * cfg.rate / cfg.fft_size
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (freqs - lo) / (ctr - lo)
        falling = (hi - freqs) / (hi - ctr)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_spectrogram(wave: Waveform, cfg: MelConfig) -> np.ndarray:
    """Log-compressed Mel magnitudes, shape (n_mels, T_frames)."""
    if wave.rate != cfg.rate:
        raise ValueError(f"waveform rate {wave.rate} != config rate {cfg.rate}")
    spec = stft(wave, cfg.fft_size, cfg.hop)
    mag = np.abs(spec.bins)
    mel = mel_filterbank(cfg) @ mag
    return np.log(np.maximum(mel, MEL_LOG_FLOOR))


def snr_db(signal: Waveform, noise: Waveform) -> float:
    """Signal-to-noise power ratio in dB: 10 log10(P_signal / P_noise)."""
    if len(signal) != len(noise) or signal.rate != noise.rate:
        raise ValueError("signal and noise must share length and rate")
    p_noise = float(np.mean(noise.samples ** 2))
    if p_noise == 0.0:
        raise ValueError("noise power is zero")
    p_signal = float(np.mean(signal.samples ** 2))
    if p_signal == 0.0:
        return -math.inf
    return 10.0 * math.log10(p_signal / p_noise)


def read_wav(path: str | Path) -> Waveform:
    """Read a mono WAV file (16-bit PCM or 32-bit float) into [-1, 1]."""
    try:
        rate, data = scipy.io.wavfile.read(str(path))
    except ValueError as exc:
        raise UnsupportedWavError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise UnsupportedWavError(
            f"{path}: only mono WAV is supported, got {data.shape[1]} channels"
        )
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedWavError(
            f"{path}: unsupported sample format {data.dtype}; "
            "use 16-bit PCM or 32-bit float"
        )
    return Waveform(samples, int(rate))


def write_wav(path: str | Path, wave: Waveform, encoding: str = "pcm16") -> None:
    """Write a waveform as 16-bit PCM or 32-bit float WAV."""
    if encoding == "pcm16":
        data = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = wave.samples.astype(np.float32)
    else:
        raise ValueError(f"unknown encoding {encoding!r}; use 'pcm16' or 'float32'")
    scipy.io.wavfile.write(str(path), wave.rate, data)

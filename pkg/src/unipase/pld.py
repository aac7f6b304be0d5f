"""Packet loss detection.

Segments a waveform into fixed-duration non-overlapping packets and flags
the nearly silent ones: a packet is lost when at least ``min_zero_ratio``
of its samples have amplitude strictly below ``amplitude_threshold``.
The trailing partial packet (samples beyond N * P) is never flagged; the
encoder framing drops the same samples, so mask length and frame count
always agree at 20 ms packets on 16 kHz audio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from unipase.audio import Waveform


@dataclass
class PldConfig:
    packet_duration: float = 0.020  # seconds
    amplitude_threshold: float = 1e-4
    min_zero_ratio: float = 0.99

    def __post_init__(self):
        if self.packet_duration <= 0:
            raise ValueError("packet_duration must be positive")
        if self.amplitude_threshold <= 0:
            raise ValueError("amplitude_threshold must be positive")
        if not 0 < self.min_zero_ratio <= 1:
            raise ValueError("min_zero_ratio must be in (0, 1]")


@dataclass
class PacketLossMask:
    """Per-packet binary mask; flags[i] == 1 means packet i is lost."""

    flags: np.ndarray
    packet_samples: int

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=np.uint8)
        if self.flags.ndim != 1:
            raise ValueError("mask flags must be 1-D")
        if not np.all((self.flags == 0) | (self.flags == 1)):
            raise ValueError("mask flags must be binary")
        if self.packet_samples < 1:
            raise ValueError("packet_samples must be >= 1")

    def __len__(self) -> int:
        return len(self.flags)

    @property
    def loss_fraction(self) -> float:
        return float(self.flags.mean()) if len(self.flags) else 0.0

    @property
    def longest_burst(self) -> int:
        runs = mask_run_lengths(self)
        return max((length for _, length in runs), default=0)


def packet_samples(rate: int, packet_duration: float) -> int:
    """Packet length in samples; the product must be an exact integer."""
    p = rate * packet_duration
    if abs(p - round(p)) > 1e-9 or round(p) < 1:
        raise ValueError(
            f"rate {rate} Hz with packet duration {packet_duration}s gives a "
            f"non-integer packet length {p}"
        )
    return int(round(p))


def detect(wave: Waveform, cfg: PldConfig | None = None) -> PacketLossMask:
    """Flag nearly silent packets.

    flags[i] = 1 iff (1/P) * #{ |x_j| < threshold : j in packet i } >= min_zero_ratio.
    """
    cfg = cfg or PldConfig()
    p = packet_samples(wave.rate, cfg.packet_duration)
    n = len(wave) // p
    if n == 0:
        return PacketLossMask(np.zeros(0, dtype=np.uint8), p)
    packets = wave.samples[: n * p].reshape(n, p)
    silent = np.abs(packets) < cfg.amplitude_threshold  # strict inequality
    ratio = silent.mean(axis=1)
    return PacketLossMask((ratio >= cfg.min_zero_ratio).astype(np.uint8), p)


def mask_run_lengths(mask: PacketLossMask) -> list[tuple[int, int]]:
    """Maximal runs of lost packets as (start, length) pairs, in order."""
    flags = mask.flags
    if len(flags) == 0:
        return []
    padded = np.concatenate(([0], flags, [0])).astype(np.int8)
    delta = np.diff(padded)
    starts = np.flatnonzero(delta == 1)
    ends = np.flatnonzero(delta == -1)
    return [(int(s), int(e - s)) for s, e in zip(starts, ends)]

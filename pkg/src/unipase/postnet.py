"""Bandwidth extension of upsampled 16 kHz content to genuine 48 kHz.

A band-split time-frequency refinement network predicts a full-band
residual spectrogram H from the input spectrogram X, and the output is

    Y(f, t) = X(f, t) + alpha(f) * H(f, t)

where alpha ramps linearly from 0 to 1 across a transition band just below
the cutoff: alpha = 0 at and below fc_bins - delta_bins, 1 above fc_bins.
Bins with alpha == 0 are copied from X bit for bit (the blend selects X
there rather than adding a zero term), so the reliable low band is never
altered. The blend is applied identically in training and inference.

Network: the one-sided spectrum splits into 62 uniform sub-bands of 12
bins plus one remainder band; each band embeds (real || imag) to a shared
embedding, then n_blocks of (per-band bidirectional recurrence over time,
then multi-head attention across bands per frame) run before per-band
linear decoding back to complex bins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from unipase.audio import Spectrogram, Waveform, istft_tensor, stft_tensor


@dataclass
class PostnetConfig:
    fft_size: int = 1536
    hop: int = 768
    rate: int = 48000
    embed_dim: int = 48
    rnn_hidden: int = 100
    n_heads: int = 4
    n_blocks: int = 5
    fc_hz: float = 8000.0
    fc_bins: int = 256
    delta_bins: int = 24
    band_width: int = 12

    def __post_init__(self):
        expected = round(self.fc_hz * self.fft_size / self.rate)
        if self.fc_bins != expected:
            raise ValueError(
                f"fc_bins {self.fc_bins} inconsistent with fc_hz {self.fc_hz} "
                f"(expected {expected})"
            )
        if self.delta_bins < 1:
            raise ValueError("delta_bins must be >= 1")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must divide evenly across heads")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class BlendProfile:
    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 1:
            raise ValueError("alpha must be a 1-D per-bin profile")
        if self.alpha.min() < 0 or self.alpha.max() > 1:
            raise ValueError("alpha values must lie in [0, 1]")


def blend_profile(cfg: PostnetConfig) -> BlendProfile:
    """Per-bin blend weights: 0 below the transition, linear ramp across
    delta_bins, 1 above fc_bins."""
    f = np.arange(cfg.n_bins, dtype=np.float64)
    ramp = (f - cfg.fc_bins + cfg.delta_bins) / cfg.delta_bins
    return BlendProfile(np.clip(ramp, 0.0, 1.0))


def blend(x_spec: Spectrogram, h_spec: Spectrogram,
          profile: BlendProfile) -> Spectrogram:
    """Y = X + alpha * H; bins with alpha == 0 are bit-identical to X."""
    for attr in ("fft_size", "hop", "rate", "window"):
        if getattr(x_spec, attr) != getattr(h_spec, attr):
            raise ValueError(f"spectrogram grids differ in {attr}")
    if x_spec.bins.shape != h_spec.bins.shape:
        raise ValueError(
            f"grid shape mismatch: {x_spec.bins.shape} vs {h_spec.bins.shape}"
        )
    if len(profile.alpha) != x_spec.n_bins:
        raise ValueError(
            f"profile covers {len(profile.alpha)} bins, grid has {x_spec.n_bins}"
        )
    alpha = profile.alpha[:, None]
    y = np.where(alpha == 0, x_spec.bins, x_spec.bins + alpha * h_spec.bins)
    return Spectrogram(y, x_spec.fft_size, x_spec.hop, x_spec.rate, x_spec.window)


class _TfBlock(nn.Module):
    """Per-band recurrence over time, then attention across bands per frame."""

    def __init__(self, embed: int, hidden: int, heads: int):
        super().__init__()
        self.lstm = nn.LSTM(embed, hidden, batch_first=True, bidirectional=True)
        self.lstm_proj = nn.Linear(2 * hidden, embed)
        self.norm_time = nn.LayerNorm(embed)
        self.attn = nn.MultiheadAttention(embed, heads, batch_first=True)
        self.norm_band = nn.LayerNorm(embed)

    def forward(self, z: torch.Tensor) -> torch.Tensor:  # (B, T, NB, E)
        b, t, nb, e = z.shape
        h = z.permute(0, 2, 1, 3).reshape(b * nb, t, e)
        out, _ = self.lstm(h)
        out = self.lstm_proj(out).reshape(b, nb, t, e).permute(0, 2, 1, 3)
        z = self.norm_time(z + out)
        h = z.reshape(b * t, nb, e)
        att, _ = self.attn(h, h, h, need_weights=False)
        z = self.norm_band(z + att.reshape(b, t, nb, e))
        return z


class PostNet(nn.Module):
    def __init__(self, cfg: PostnetConfig | None = None):
        super().__init__()
        self.cfg = cfg or PostnetConfig()
        n_bins = self.cfg.n_bins
        # uniform bands plus one wider top band absorbing the leftover bins
        # (769 bins at the default width of 12 -> 62 uniform + 25 remainder)
        n_uniform = max(1, n_bins // self.cfg.band_width - 2)
        widths = [self.cfg.band_width] * n_uniform
        widths.append(n_bins - n_uniform * self.cfg.band_width)
        self.band_widths = widths
        self.encoders = nn.ModuleList(
            nn.Linear(2 * w, self.cfg.embed_dim) for w in widths
        )
        self.blocks = nn.ModuleList(
            _TfBlock(self.cfg.embed_dim, self.cfg.rnn_hidden, self.cfg.n_heads)
            for _ in range(self.cfg.n_blocks)
        )
        self.decoders = nn.ModuleList(
            nn.Linear(self.cfg.embed_dim, 2 * w) for w in widths
        )
        alpha = blend_profile(self.cfg).alpha
        self.register_buffer("alpha", torch.as_tensor(alpha, dtype=torch.float32))

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        """(B, L) at 48 kHz -> (B, L); the low band passes through unchanged."""
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        length = wave.shape[-1]
        x_spec = stft_tensor(wave, self.cfg.fft_size, self.cfg.hop)  # (B, F, T)
        x_ri = torch.view_as_real(x_spec)  # (B, F, T, 2)
        bands = []
        lo = 0
        for w, enc in zip(self.band_widths, self.encoders):
            xb = x_ri[:, lo : lo + w]  # (B, w, T, 2)
            xb = xb.permute(0, 2, 1, 3).reshape(xb.shape[0], xb.shape[2], 2 * w)
            bands.append(enc(xb))
            lo += w
        z = torch.stack(bands, dim=2)  # (B, T, NB, E)
        for block in self.blocks:
            z = block(z)
        outs = []
        for i, (w, dec) in enumerate(zip(self.band_widths, self.decoders)):
            hb = dec(z[:, :, i])  # (B, T, 2w)
            hb = hb.reshape(hb.shape[0], hb.shape[1], w, 2).permute(0, 2, 1, 3)
            outs.append(torch.view_as_complex(hb.contiguous()))
        h_spec = torch.cat(outs, dim=1)  # (B, F, T)
        alpha = self.alpha.to(x_spec.real.dtype).view(1, -1, 1)
        y_spec = torch.where(alpha == 0, x_spec, x_spec + alpha * h_spec)
        return istft_tensor(y_spec, self.cfg.fft_size, self.cfg.hop, length)


def postnet_forward(wave48k: Waveform, postnet: PostNet) -> Waveform:
    """Refine one 48 kHz utterance, without gradients."""
    if wave48k.rate != postnet.cfg.rate:
        raise ValueError(
            f"expected {postnet.cfg.rate} Hz input, got {wave48k.rate}"
        )
    x = torch.as_tensor(wave48k.samples, dtype=torch.float32).unsqueeze(0)
    with torch.no_grad():
        out = postnet(x)
    return Waveform(out[0].numpy().astype(np.float64), wave48k.rate)

"""Shared generator backbone with two heads.

A ResNet stem, one multi-head self-attention block, and a ConvNeXt-style
1-D stack process (B, T, D) representations at a hidden width. The same
backbone is instantiated twice:

  * Adapter: representation -> representation. The conditioning stream is
    added elementwise to the input representation before the input
    projection, and a linear head maps back to the representation space.
  * Vocoder: representation -> waveform. A linear head emits log-magnitude
    and phase per STFT bin; magnitudes go through exp and are clipped at
    100 (no tanh anywhere), and the inverse STFT synthesizes exactly
    hop samples per input frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from unipase.audio import Waveform, istft_tensor
from unipase.backbone import Representation

MAGNITUDE_CLIP = 100.0


@dataclass
class VocosConfig:
    hidden_dim: int = 128
    n_resnet_blocks: int = 2
    n_convnext_blocks: int = 4
    intermediate_dim: int = 384
    has_attention: bool = True
    attn_heads: int = 4

    def __post_init__(self):
        if min(self.hidden_dim, self.n_resnet_blocks, self.n_convnext_blocks,
               self.intermediate_dim) < 1:
            raise ValueError("all VocosConfig counts must be >= 1")
        if self.has_attention and self.hidden_dim % self.attn_heads:
            raise ValueError("hidden_dim must divide evenly across attention heads")


#: Full-scale preset (hidden 1024, 4 ResNet blocks, 12 ConvNeXt blocks,
#: intermediate 3072); the desk-scale defaults above train on a CPU.
PAPER_VOCOS = VocosConfig(hidden_dim=1024, n_resnet_blocks=4,
                          n_convnext_blocks=12, intermediate_dim=3072,
                          attn_heads=8)


@dataclass
class IstftHeadConfig:
    fft_size: int = 1280
    hop: int = 320
    rate: int = 16000

    def __post_init__(self):
        if self.rate % self.hop:
            raise ValueError(
                f"hop {self.hop} must divide the rate {self.rate} so that "
                "hop * frame_rate == rate"
            )

    @property
    def frame_rate(self) -> float:
        return self.rate / self.hop


class _ResBlock1d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.1)
        h = self.conv2(h)
        return x + h


class _AttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, x):  # (B, T, H)
        h = self.norm(x)
        out, _ = self.attn(h, h, h, need_weights=False)
        return x + out


class _ConvNeXtBlock1d(nn.Module):
    def __init__(self, dim: int, intermediate_dim: int):
        super().__init__()
        self.dwconv = nn.Conv1d(dim, dim, 7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Linear(dim, intermediate_dim)
        self.pw2 = nn.Linear(intermediate_dim, dim)
        self.gamma = nn.Parameter(1e-2 * torch.ones(dim))

    def forward(self, x):  # (B, H, T)
        h = self.dwconv(x).transpose(1, 2)
        h = self.norm(h)
        h = self.pw2(F.gelu(self.pw1(h)))
        h = (self.gamma * h).transpose(1, 2)
        return x + h


class VocosBackbone(nn.Module):
    def __init__(self, in_dim: int, cfg: VocosConfig | None = None):
        super().__init__()
        self.cfg = cfg or VocosConfig()
        h = self.cfg.hidden_dim
        self.embed = nn.Conv1d(in_dim, h, 7, padding=3)
        self.resnet = nn.ModuleList(_ResBlock1d(h)
                                    for _ in range(self.cfg.n_resnet_blocks))
        self.attention = (_AttentionBlock(h, self.cfg.attn_heads)
                          if self.cfg.has_attention else None)
        self.convnext = nn.ModuleList(
            _ConvNeXtBlock1d(h, self.cfg.intermediate_dim)
            for _ in range(self.cfg.n_convnext_blocks)
        )
        self.final_norm = nn.LayerNorm(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, in_dim) -> (B, T, hidden_dim)."""
        h = self.embed(x.transpose(1, 2))
        for block in self.resnet:
            h = block(h)
        if self.attention is not None:
            h = self.attention(h.transpose(1, 2)).transpose(1, 2)
        for block in self.convnext:
            h = block(h)
        return self.final_norm(h.transpose(1, 2))


class Adapter(nn.Module):
    """Representation refiner conditioned by elementwise summation."""

    def __init__(self, rep_dim: int, cfg: VocosConfig | None = None):
        super().__init__()
        self.rep_dim = rep_dim
        self.backbone = VocosBackbone(rep_dim, cfg)
        self.head = nn.Linear(self.backbone.cfg.hidden_dim, rep_dim)

    def forward(self, degraded_ra: torch.Tensor,
                enhanced_rp: torch.Tensor) -> torch.Tensor:
        """Both inputs (B, T, D); returns the refined (B, T, D)."""
        if degraded_ra.shape != enhanced_rp.shape:
            raise ValueError(
                f"shape mismatch: {tuple(degraded_ra.shape)} vs "
                f"{tuple(enhanced_rp.shape)}"
            )
        # conditioning sum happens in raw representation space, pre-projection
        return self.head(self.backbone(degraded_ra + enhanced_rp))


class Vocoder(nn.Module):
    """Waveform synthesizer with a magnitude/phase inverse-STFT head."""

    def __init__(self, rep_dim: int, cfg: VocosConfig | None = None,
                 head_cfg: IstftHeadConfig | None = None):
        super().__init__()
        self.rep_dim = rep_dim
        self.head_cfg = head_cfg or IstftHeadConfig()
        self.backbone = VocosBackbone(rep_dim, cfg)
        n_bins = self.head_cfg.fft_size // 2 + 1
        self.head = nn.Linear(self.backbone.cfg.hidden_dim, 2 * n_bins)

    def forward(self, ra: torch.Tensor) -> torch.Tensor:
        """(B, T, D) -> (B, T * hop) samples."""
        n_frames = ra.shape[1]
        out = self.head(self.backbone(ra))  # (B, T, 2F)
        log_mag, phase = out.chunk(2, dim=-1)
        mag = torch.clip(torch.exp(log_mag), max=MAGNITUDE_CLIP)
        spec = torch.polar(mag, phase).transpose(1, 2)  # (B, F, T)
        # the framing convention needs T+1 frames for T*hop samples;
        # replicate the final frame to cover the tail
        spec = torch.cat([spec, spec[:, :, -1:]], dim=2)
        return istft_tensor(spec, self.head_cfg.fft_size, self.head_cfg.hop,
                            n_frames * self.head_cfg.hop)


def adapter_forward(degraded_ra: Representation, enhanced_rp: Representation,
                    adapter: Adapter) -> Representation:
    """Refine one utterance's acoustic stream, without gradients."""
    if degraded_ra.values.shape != enhanced_rp.values.shape:
        raise ValueError(
            f"shape mismatch: {degraded_ra.values.shape} vs {enhanced_rp.values.shape}"
        )
    a = torch.as_tensor(degraded_ra.values).unsqueeze(0)
    p = torch.as_tensor(enhanced_rp.values).unsqueeze(0)
    with torch.no_grad():
        out = adapter(a, p)
    return Representation(out[0].numpy(), "acoustic", degraded_ra.frame_rate)


def vocoder_forward(ra: Representation, vocoder: Vocoder) -> Waveform:
    """Synthesize one utterance from its acoustic stream, without gradients."""
    expected = vocoder.head_cfg.frame_rate
    if abs(ra.frame_rate - expected) > 1e-9:
        raise ValueError(
            f"representation frame rate {ra.frame_rate} Hz does not match the "
            f"head's {expected} Hz"
        )
    x = torch.as_tensor(ra.values).unsqueeze(0)
    with torch.no_grad():
        wave = vocoder(x)
    return Waveform(wave[0].numpy().astype(np.float64), vocoder.head_cfg.rate)

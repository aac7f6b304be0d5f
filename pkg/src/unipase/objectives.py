"""Training losses and discriminators.

Least-squares GAN objectives, MSE reconstruction, feature matching over
discriminator activations, the multi-scale representation discriminator
(MSRD), a multi-scale log-Mel reconstruction loss, and desk-scale waveform
discriminators (multi-period + multi-resolution STFT).

All losses are pure functions of torch tensors and differentiable.
Expectations are realized as per-batch means; when a loss receives a list
of score tensors (one per sub-discriminator) the result is the mean over
sub-discriminators of the per-tensor mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn

from unipase.audio import MelConfig, mel_filterbank, stft_tensor

#: Multi-scale Mel ladder: (window, n_mels); hop is window / 4.
MEL_SCALES = ((32, 5), (64, 10), (128, 20), (256, 40),
              (512, 80), (1024, 160), (2048, 320))

MEL_FLOOR = 1e-5


def _as_tensor_list(scores) -> list[torch.Tensor]:
    if isinstance(scores, torch.Tensor):
        return [scores]
    out = list(scores)
    if not out:
        raise ValueError("empty score collection")
    return out


def lsgan_g_loss(d_fake_scores) -> torch.Tensor:
    """Generator adversarial loss: mean of (score - 1)^2.

    Accepts one score tensor or a list of them (one per sub-discriminator).
    """
    tensors = _as_tensor_list(d_fake_scores)
    parts = [((s - 1.0) ** 2).mean() for s in tensors]
    return torch.stack(parts).mean()


def lsgan_d_loss(d_real_scores, d_fake_scores) -> torch.Tensor:
    """Discriminator loss: mean[(real - 1)^2] + mean[fake^2]."""
    real = _as_tensor_list(d_real_scores)
    fake = _as_tensor_list(d_fake_scores)
    real_part = torch.stack([((s - 1.0) ** 2).mean() for s in real]).mean()
    fake_part = torch.stack([(s ** 2).mean() for s in fake]).mean()
    return real_part + fake_part


def recon_loss(r: torch.Tensor, r_hat: torch.Tensor) -> torch.Tensor:
    """Elementwise mean squared error."""
    if r.shape != r_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(r.shape)} vs {tuple(r_hat.shape)}")
    return ((r - r_hat) ** 2).mean()


def feature_match_loss(real_feats, fake_feats) -> torch.Tensor:
    """(1 / (K * L)) * sum over sub-discriminators k and layers l of the
    per-map mean absolute difference between real and fake activations."""
    if len(real_feats) != len(fake_feats):
        raise ValueError("feature nests have different sub-discriminator counts")
    total = None
    n_maps = 0
    for real_maps, fake_maps in zip(real_feats, fake_feats):
        if len(real_maps) != len(fake_maps):
            raise ValueError("feature nests have different layer counts")
        for r_map, f_map in zip(real_maps, fake_maps):
            if r_map.shape != f_map.shape:
                raise ValueError(
                    f"feature map shape mismatch: {tuple(r_map.shape)} vs "
                    f"{tuple(f_map.shape)}"
                )
            term = (r_map - f_map).abs().mean()
            total = term if total is None else total + term
            n_maps += 1
    if total is None:
        raise ValueError("empty feature nests")
    return total / n_maps


@dataclass
class LossWeights:
    lambda_feat: float = 1.0
    lambda_rec: float = 200.0
    lambda_mel: float = 0.0

    def __post_init__(self):
        if min(self.lambda_feat, self.lambda_rec, self.lambda_mel) < 0:
            raise ValueError("loss weights must be nonnegative")


#: Representation-refinement composite: adv + 1 * feat + 200 * rec.
ADAPTER_WEIGHTS = LossWeights(lambda_feat=1.0, lambda_rec=200.0, lambda_mel=0.0)
#: Waveform-synthesis composite: adv + 1 * feat + 30 * mel.
VOCODER_WEIGHTS = LossWeights(lambda_feat=1.0, lambda_rec=0.0, lambda_mel=30.0)


def composite_g_loss(parts: dict, weights: LossWeights) -> torch.Tensor:
    """Weighted generator objective.

    ``parts`` maps any of {"adv", "feat", "rec", "mel"} to scalars; missing
    parts contribute zero. Result = adv + lambda_feat * feat
    + lambda_rec * rec + lambda_mel * mel.
    """
    weight_of = {"adv": 1.0, "feat": weights.lambda_feat,
                 "rec": weights.lambda_rec, "mel": weights.lambda_mel}
    unknown = set(parts) - set(weight_of)
    if unknown:
        raise ValueError(f"unknown loss parts: {sorted(unknown)}")
    total = None
    for name, value in parts.items():
        if not isinstance(value, torch.Tensor):
            value = torch.as_tensor(float(value), dtype=torch.float64)
        term = weight_of[name] * value
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total


@lru_cache(maxsize=None)
def _mel_basis(window: int, n_mels: int, rate: int, dtype_key: str) -> torch.Tensor:
    cfg = MelConfig(fft_size=window, hop=window // 4, n_mels=n_mels, rate=rate)
    fb = mel_filterbank(cfg)
    return torch.as_tensor(fb, dtype=getattr(torch, dtype_key))


def _log_mel(x: torch.Tensor, window: int, n_mels: int, rate: int) -> torch.Tensor:
    spec = stft_tensor(x, window, window // 4)
    mag = spec.abs()
    fb = _mel_basis(window, n_mels, rate, str(x.dtype).split(".")[-1])
    mel = fb.to(x.device) @ mag
    return torch.log(torch.clamp(mel, min=MEL_FLOOR))


def multiscale_mel_loss(x: torch.Tensor, x_hat: torch.Tensor,
                        rate: int = 16000) -> torch.Tensor:
    """Sum over the 7-scale ladder of the per-scale mean absolute difference
    between log-Mel matrices of two equal-length waveforms."""
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    total = None
    for window, n_mels in MEL_SCALES:
        term = (_log_mel(x, window, n_mels, rate)
                - _log_mel(x_hat, window, n_mels, rate)).abs().mean()
        total = term if total is None else total + term
    return total


@dataclass
class MsrdConfig:
    """Multi-scale representation discriminator layout.

    One sub-discriminator per entry of ``hidden_channels``; each is a stack
    of ``layers_per_sub`` 1-D convolutions (the first projects the input to
    the sub's width) followed by a 1-channel score convolution.
    """

    hidden_channels: tuple = (32, 64, 128, 256, 512, 1024)
    layers_per_sub: int = 4
    kernel_size: int = 5
    strides: tuple = (1, 2, 2, 2)
    score_kernel: int = 3
    leaky_slope: float = 0.1

    def __post_init__(self):
        self.hidden_channels = tuple(self.hidden_channels)
        self.strides = tuple(self.strides)
        if list(self.hidden_channels) != sorted(set(self.hidden_channels)):
            raise ValueError("hidden_channels must be strictly increasing")
        if len(self.strides) != self.layers_per_sub:
            raise ValueError("need one stride per conv layer")
        if self.layers_per_sub < 1:
            raise ValueError("layers_per_sub must be >= 1")


class _MsrdSub(nn.Module):
    def __init__(self, in_dim: int, width: int, cfg: MsrdConfig):
        super().__init__()
        k = cfg.kernel_size
        convs = [nn.Conv1d(in_dim, width, k, cfg.strides[0], padding=k // 2)]
        for stride in cfg.strides[1:]:
            convs.append(nn.Conv1d(width, width, k, stride, padding=k // 2))
        self.convs = nn.ModuleList(convs)
        self.score = nn.Conv1d(width, 1, cfg.score_kernel, 1,
                               padding=cfg.score_kernel // 2)
        self.slope = cfg.leaky_slope

    def forward(self, x: torch.Tensor):
        fmaps = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.slope)
            fmaps.append(x)
        return self.score(x), fmaps


class Msrd(nn.Module):
    """Bank of 1-D conv sub-discriminators over (T, D) representations,
    one per feature scale (hidden width)."""

    def __init__(self, in_dim: int, cfg: MsrdConfig | None = None):
        super().__init__()
        self.cfg = cfg or MsrdConfig()
        self.subs = nn.ModuleList(
            _MsrdSub(in_dim, w, self.cfg) for w in self.cfg.hidden_channels
        )

    def forward(self, rep: torch.Tensor):
        """rep: (T, D) or (B, T, D) -> (scores, feature_maps) nested per sub."""
        if rep.dim() == 2:
            rep = rep.unsqueeze(0)
        x = rep.transpose(1, 2)  # (B, D, T): channels = feature dim
        scores, fmaps = [], []
        for sub in self.subs:
            s, f = sub(x)
            scores.append(s)
            fmaps.append(f)
        return scores, fmaps


def msrd_forward(rep, msrd: Msrd):
    """Functional wrapper accepting a Representation or array/tensor."""
    values = rep if isinstance(rep, torch.Tensor) else getattr(rep, "values", rep)
    if not isinstance(values, torch.Tensor):
        values = torch.as_tensor(values, dtype=torch.float32)
    return msrd(values)


@dataclass
class WaveDiscConfig:
    """Desk-scale waveform discriminator bank: multi-period subs over raw
    samples plus multi-resolution subs over log-magnitude STFTs."""

    periods: tuple = (2, 3, 5, 7, 11)
    period_channels: tuple = (8, 16, 32)
    stft_sizes: tuple = (256, 512, 1024)
    stft_channels: tuple = (8, 16, 32)
    leaky_slope: float = 0.1


class _PeriodSub(nn.Module):
    def __init__(self, period: int, channels: tuple, slope: float):
        super().__init__()
        self.period = period
        self.slope = slope
        convs = []
        prev = 1
        for c in channels:
            convs.append(nn.Conv2d(prev, c, (5, 1), (3, 1), padding=(2, 0)))
            prev = c
        self.convs = nn.ModuleList(convs)
        self.score = nn.Conv2d(prev, 1, (3, 1), 1, padding=(1, 0))

    def forward(self, wave: torch.Tensor):
        b, length = wave.shape
        pad = (-length) % self.period
        if pad:
            wave = F.pad(wave, (0, pad))
        x = wave.view(b, 1, -1, self.period)
        fmaps = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.slope)
            fmaps.append(x)
        return self.score(x), fmaps


class _SpectrogramSub(nn.Module):
    def __init__(self, fft_size: int, channels: tuple, slope: float):
        super().__init__()
        self.fft_size = fft_size
        self.slope = slope
        convs = []
        prev = 1
        for c in channels:
            convs.append(nn.Conv2d(prev, c, 3, 2, padding=1))
            prev = c
        self.convs = nn.ModuleList(convs)
        self.score = nn.Conv2d(prev, 1, 3, 1, padding=1)

    def forward(self, wave: torch.Tensor):
        spec = stft_tensor(wave, self.fft_size, self.fft_size // 4)
        x = torch.log(spec.abs() + MEL_FLOOR).unsqueeze(1)  # (B, 1, F, T)
        fmaps = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.slope)
            fmaps.append(x)
        return self.score(x), fmaps


class WaveformDiscriminator(nn.Module):
    def __init__(self, cfg: WaveDiscConfig | None = None):
        super().__init__()
        self.cfg = cfg or WaveDiscConfig()
        subs = [_PeriodSub(p, self.cfg.period_channels, self.cfg.leaky_slope)
                for p in self.cfg.periods]
        subs += [_SpectrogramSub(n, self.cfg.stft_channels, self.cfg.leaky_slope)
                 for n in self.cfg.stft_sizes]
        self.subs = nn.ModuleList(subs)

    def forward(self, wave: torch.Tensor):
        """wave: (L,) or (B, L) -> (scores, feature_maps) nested per sub."""
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        scores, fmaps = [], []
        for sub in self.subs:
            s, f = sub(wave)
            scores.append(s)
            fmaps.append(f)
        return scores, fmaps

"""Dual-stream masked waveform encoder with distillation training.

A strided-conv downsampler followed by a pre-norm Transformer stack. CNN
output frames flagged by packet-loss detection are replaced with a single
shared learnable mask embedding before entering the Transformer. Two
representation streams are tapped: the first Transformer layer's output
(acoustic, fine-grained detail) and the final layer's output (phonetic,
context-dependent content).

The encoder trains as the student of a frozen teacher: the student sees
degraded audio plus the loss mask, the teacher sees the matching clean
audio, and the loss is the MSE between their phonetic streams over all
frames (masked frames included).

Each conv uses kernel == stride, so the frame count is exactly
floor(L / total_stride) and frames never observe samples outside their own
packet; this keeps the mask/frame alignment exact and substitution local.
A loader slot accepts externally pretrained weights with matching shapes.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from unipase.audio import Waveform
from unipase.checkpoints import CheckpointError, load_state_into, param_hash
from unipase.pld import PacketLossMask
from unipase.schedule import ScheduleConfig, lr_at

STREAMS = ("phonetic", "acoustic")


@dataclass
class EncoderConfig:
    cnn_channels: int = 64
    total_stride: int = 320  # 20 ms frames at 16 kHz
    n_layers: int = 4
    model_dim: int = 64
    n_heads: int = 4
    ffn_dim: int = 256

    def __post_init__(self):
        if self.n_layers < 2:
            raise ValueError("need >= 2 layers: first supplies the acoustic "
                             "stream, last the phonetic stream")
        if self.total_stride < 1:
            raise ValueError("total_stride must be >= 1")
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must divide evenly across heads")


@dataclass
class Representation:
    """A (T, D) feature matrix from one of the two encoder streams."""

    values: np.ndarray
    stream: str
    frame_rate: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"representation must be (T, D), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("representation contains NaN or Inf")
        if self.stream not in STREAMS:
            raise ValueError(f"stream must be one of {STREAMS}, got {self.stream!r}")


def stride_factors(total: int) -> list[int]:
    """Decompose a stride into conv-layer factors, each <= 8 where possible."""
    factors = []
    remaining = total
    while remaining > 1:
        for d in range(8, 1, -1):
            if remaining % d == 0:
                factors.append(d)
                remaining //= d
                break
        else:  # prime factor above 8: one conv absorbs it
            factors.append(remaining)
            remaining = 1
    return factors or [1]


def sinusoidal_positions(n_frames: int, dim: int, dtype=torch.float32,
                         device="cpu") -> torch.Tensor:
    position = torch.arange(n_frames, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64)
                    * (-math.log(10000.0) / dim))
    enc = torch.zeros(n_frames, dim, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(position * div)
    enc[:, 1::2] = torch.cos(position * div[: dim // 2])
    return enc.to(dtype=dtype, device=device)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        c = self.cfg.cnn_channels
        convs = []
        in_ch = 1
        for s in stride_factors(self.cfg.total_stride):
            convs.append(nn.Conv1d(in_ch, c, kernel_size=s, stride=s))
            in_ch = c
        self.convs = nn.ModuleList(convs)
        self.mask_embedding = nn.Parameter(torch.randn(c) * 0.02)
        self.proj = nn.Linear(c, self.cfg.model_dim)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=self.cfg.model_dim, nhead=self.cfg.n_heads,
                dim_feedforward=self.cfg.ffn_dim, dropout=0.0,
                activation="gelu", batch_first=True, norm_first=True,
            )
            for _ in range(self.cfg.n_layers)
        )

    @property
    def frame_rate(self) -> float:
        return 16000.0 / self.cfg.total_stride

    def cnn_features(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L) -> (B, C, T) with T = floor(L / total_stride)."""
        if x.shape[-1] < self.cfg.total_stride:
            raise ValueError(
                f"waveform of {x.shape[-1]} samples is shorter than one frame "
                f"({self.cfg.total_stride})"
            )
        h = x.unsqueeze(1)
        for conv in self.convs:
            h = torch.nn.functional.gelu(conv(h))
        return h

    def masked_features(self, x: torch.Tensor,
                        mask: torch.Tensor | None) -> torch.Tensor:
        """CNN features with mask-embedding substitution at flagged frames."""
        feats = self.cnn_features(x)
        if mask is None:
            return feats
        if mask.shape != (feats.shape[0], feats.shape[2]):
            raise ValueError(
                f"mask shape {tuple(mask.shape)} does not match frame grid "
                f"{(feats.shape[0], feats.shape[2])}"
            )
        emb = self.mask_embedding.to(feats.dtype).view(1, -1, 1)
        return torch.where(mask.unsqueeze(1), emb, feats)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None):
        """(B, L) [+ (B, T) bool mask] -> acoustic and phonetic streams,
        both (B, T, D)."""
        feats = self.masked_features(x, mask)
        h = self.proj(feats.transpose(1, 2))
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.dtype, h.device)
        r_a = None
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i == 0:
                r_a = h
        return r_a, h

    def load_pretrained(self, path) -> None:
        """Slot for externally pretrained weights with matching shapes."""
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"cannot read pretrained weights {path}: {exc}") from exc
        load_state_into(self, state, f"pretrained weights {path}")


def encode(wave: Waveform, mask: PacketLossMask | None,
           encoder: Encoder) -> tuple[Representation, Representation]:
    """Run the encoder on one 16 kHz waveform, without gradients."""
    if wave.rate != 16000:
        raise ValueError(f"encoder expects 16 kHz input, got {wave.rate}")
    x = torch.as_tensor(wave.samples, dtype=torch.float32).unsqueeze(0)
    m = None
    if mask is not None:
        n_frames = len(wave) // encoder.cfg.total_stride
        if len(mask) != n_frames:
            raise ValueError(
                f"mask has {len(mask)} packets but the waveform spans "
                f"{n_frames} frames"
            )
        m = torch.as_tensor(mask.flags, dtype=torch.bool).unsqueeze(0)
    encoder.eval()
    with torch.no_grad():
        r_a, r_p = encoder(x, m)
    rate = wave.rate / encoder.cfg.total_stride
    return (Representation(r_a[0].numpy(), "acoustic", rate),
            Representation(r_p[0].numpy(), "phonetic", rate))


def _values(rep) -> torch.Tensor:
    if isinstance(rep, torch.Tensor):
        return rep
    v = rep.values if isinstance(rep, Representation) else rep
    if not isinstance(v, torch.Tensor):
        v = torch.as_tensor(np.asarray(v))
    return v


def distill_loss(student_rp, teacher_rp) -> torch.Tensor:
    """MSE between phonetic streams over all T x D entries."""
    a, b = _values(student_rp), _values(teacher_rp)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def train_distillation(student: Encoder, teacher_frozen: Encoder, data_stream,
                       schedule: ScheduleConfig, total_steps: int,
                       ) -> tuple[dict, list[dict]]:
    """Optimize the student against teacher-on-clean targets.

    ``data_stream`` yields (noisy, clean, mask) batches: float tensors
    (B, L) and a bool mask (B, T) or None. The teacher is frozen for the
    whole run. Returns (checkpoint payload, per-step log records).
    """
    # The teacher is frozen by construction: its forward runs under no_grad
    # and its parameters never reach the optimizer. Modes and requires_grad
    # flags are left untouched because either difference switches torch onto
    # a different attention kernel, and student == teacher must yield a loss
    # of exactly zero (the architecture has no dropout or batch statistics,
    # so train mode is numerically inert).
    teacher_frozen.train()
    student.train()
    opt = torch.optim.AdamW(student.parameters(), lr=schedule.peak_lr)
    records = []
    stream = iter(data_stream)
    for step in range(total_steps):
        t0 = time.perf_counter()
        noisy, clean, mask = next(stream)
        with torch.no_grad():
            _, teacher_rp = teacher_frozen(clean)
        _, student_rp = student(noisy, mask)
        loss = distill_loss(student_rp, teacher_rp)
        lr = lr_at(step, total_steps, schedule)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad()
        loss.backward()
        opt.step()
        records.append({
            "step": step, "losses": {"distill": float(loss.detach())},
            "lr": lr, "wall_ms": (time.perf_counter() - t0) * 1e3,
        })
    checkpoint = {
        "stage": "backbone", "config": asdict(student.cfg),
        "step": total_steps, "state": student.state_dict(),
    }
    return checkpoint, records

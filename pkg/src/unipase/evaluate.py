"""Desk-scale evaluation harness.

Built-in signal-level metrics (scale-invariant SDR and a multi-scale
log-Mel distance), condition slicing by packet-loss statistics (loss
fraction and longest burst), and a plug-in interface that shells out to
external metric tools. External failures degrade to an absent value with a
warning record; they never abort a run.
"""

from __future__ import annotations

import logging
import math
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from unipase.audio import Waveform, write_wav
from unipase.objectives import multiscale_mel_loss
from unipase.pld import PacketLossMask

log = logging.getLogger(__name__)

SI_SDR_CAP_DB = 60.0

#: Loss-fraction bins in percent; lower-exclusive, upper-inclusive, except
#: that 0 falls in the first bin.
FRACTION_BINS = ((0, 10), (10, 20), (20, 30), (30, 40), (40, 100))
#: Longest-burst bins in packets, same inclusivity; values beyond the last
#: edge land in the final bin.
BURST_BINS = ((0, 6), (6, 25), (25, 50), (50, 150))

BUILTIN_METRICS = ("si_sdr", "log_mel_distance")


def si_sdr(ref: Waveform, est: Waveform) -> float:
    """Scale-invariant SDR in dB via projection onto the reference.

    Sign flips and gains cancel out; values cap at 60 dB so identical
    signals stay finite.
    """
    if len(ref) != len(est) or ref.rate != est.rate:
        raise ValueError("reference and estimate must share length and rate")
    r, e = ref.samples, est.samples
    ref_energy = float(np.dot(r, r))
    if ref_energy == 0.0:
        raise ValueError("silent reference")
    scale = float(np.dot(e, r)) / ref_energy
    target = scale * r
    residual = e - target
    num = float(np.dot(target, target))
    den = float(np.dot(residual, residual))
    if den == 0.0 or (num > 0 and 10.0 * math.log10(num / den) >= SI_SDR_CAP_DB):
        return SI_SDR_CAP_DB
    if num == 0.0:
        return -math.inf
    return 10.0 * math.log10(num / den)


def log_mel_distance(ref: Waveform, est: Waveform) -> float:
    """Multi-scale log-Mel distance reused as a metric (lower is better)."""
    if len(ref) != len(est) or ref.rate != est.rate:
        raise ValueError("reference and estimate must share length and rate")
    a = torch.as_tensor(ref.samples, dtype=torch.float64)
    b = torch.as_tensor(est.samples, dtype=torch.float64)
    return float(multiscale_mel_loss(a, b, rate=ref.rate))


@dataclass
class UtteranceReport:
    """Per-utterance metric values plus condition tags."""

    utt_id: str
    metrics: dict
    rate: int
    loss_fraction: float | None = None
    longest_burst: int | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "utt_id": self.utt_id, "metrics": dict(self.metrics),
            "rate": self.rate, "loss_fraction": self.loss_fraction,
            "longest_burst": self.longest_burst, "warnings": list(self.warnings),
        }


def _bin_label(value: float, bins, unit: str) -> str:
    # contiguous upper-inclusive bins; overflow lands in the final bin
    for lo, hi in bins:
        if value <= hi:
            return f"{lo}-{hi}{unit}"
    lo, hi = bins[-1]
    return f"{lo}-{hi}{unit}"


def fraction_bin_label(loss_fraction: float) -> str:
    return _bin_label(loss_fraction * 100.0, FRACTION_BINS, "%")


def burst_bin_label(longest_burst: int) -> str:
    return _bin_label(float(longest_burst), BURST_BINS, "")


def tag_report(report: UtteranceReport, mask: PacketLossMask) -> UtteranceReport:
    report.loss_fraction = mask.loss_fraction
    report.longest_burst = mask.longest_burst
    return report


def slice_by_plc_condition(reports: list[UtteranceReport],
                           masks: dict[str, PacketLossMask]) -> dict:
    """Per-bin metric means with counts along both condition axes."""
    axes = {
        "fraction": [f"{lo}-{hi}%" for lo, hi in FRACTION_BINS],
        "burst": [f"{lo}-{hi}" for lo, hi in BURST_BINS],
    }
    sums: dict = {ax: {label: {"count": 0, "sums": {}} for label in labels}
                  for ax, labels in axes.items()}
    for report in reports:
        mask = masks.get(report.utt_id)
        if mask is None:
            continue
        labels = {
            "fraction": fraction_bin_label(mask.loss_fraction),
            "burst": burst_bin_label(mask.longest_burst),
        }
        for ax, label in labels.items():
            cell = sums[ax][label]
            cell["count"] += 1
            for name, value in report.metrics.items():
                if value is not None and math.isfinite(value):
                    cell["sums"][name] = cell["sums"].get(name, 0.0) + value
    table: dict = {}
    for ax, labels in axes.items():
        table[ax] = {}
        for label in labels:
            cell = sums[ax][label]
            means = {k: v / cell["count"] for k, v in cell["sums"].items()}
            table[ax][label] = {"count": cell["count"], "means": means}
    return table


@dataclass
class ExternalMetricSpec:
    """How to run an external metric tool.

    ``command`` entries may contain the placeholders {ref} and {est}, which
    expand to WAV paths. The tool must print the metric value as the last
    whitespace-separated token on stdout.
    """

    name: str
    command: list[str]
    timeout_s: float = 60.0


def external_metric(name: str, invocation_spec: ExternalMetricSpec,
                    ref: Waveform, est: Waveform,
                    warnings: list | None = None) -> float | None:
    """Run an external metric tool on one utterance pair.

    Any failure (missing tool, nonzero exit, timeout, unparseable output)
    records a warning and returns None.
    """

    def warn(reason: str) -> None:
        record = {"metric": name, "reason": reason}
        log.warning("external metric %s absent: %s", name, reason)
        if warnings is not None:
            warnings.append(record)

    with tempfile.TemporaryDirectory(prefix="unipase_metric_") as tmp:
        ref_path = Path(tmp) / "ref.wav"
        est_path = Path(tmp) / "est.wav"
        write_wav(ref_path, ref, encoding="float32")
        write_wav(est_path, est, encoding="float32")
        cmd = [arg.format(ref=ref_path, est=est_path)
               for arg in invocation_spec.command]
        try:
            proc = subprocess.run(cmd, capture_output=True,
                                  timeout=invocation_spec.timeout_s)
        except (FileNotFoundError, PermissionError) as exc:
            warn(f"tool not runnable: {exc}")
            return None
        except subprocess.TimeoutExpired:
            warn(f"timed out after {invocation_spec.timeout_s}s")
            return None
    if proc.returncode != 0:
        warn(f"exited {proc.returncode}")
        return None
    tokens = proc.stdout.decode(errors="replace").split()
    if not tokens:
        warn("no output to parse")
        return None
    try:
        return float(tokens[-1])
    except ValueError:
        warn(f"unparseable output {tokens[-1]!r}")
        return None


def evaluate_pair(utt_id: str, ref: Waveform, est: Waveform,
                  metrics: list[str] | None = None,
                  external: list[ExternalMetricSpec] = (),
                  ) -> UtteranceReport:
    """Compute built-in metrics (plus any external ones) for one pair."""
    metrics = list(metrics) if metrics is not None else list(BUILTIN_METRICS)
    values: dict = {}
    warnings: list = []
    if "si_sdr" in metrics:
        values["si_sdr"] = si_sdr(ref, est)
    if "log_mel_distance" in metrics:
        values["log_mel_distance"] = log_mel_distance(ref, est)
    for spec in external:
        values[spec.name] = external_metric(spec.name, spec, ref, est, warnings)
    return UtteranceReport(utt_id=utt_id, metrics=values, rate=ref.rate,
                           warnings=warnings)

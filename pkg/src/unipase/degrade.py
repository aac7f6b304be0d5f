"""On-the-fly training-pair simulation.

Samples a degradation recipe per utterance (reverb, noise or wind mixing,
and up to three extra distortions) and applies it. All randomness used at
application time is captured inside the recipe, so
``degrade(clean, banks, recipe)`` is a pure function: the same recipe on
the same inputs reproduces the pair bit for bit. The training target is
always the dry clean utterance, whatever the recipe says.

Sampling scheme: reverb with p=0.5; noise always mixed, drawn from the
wind bank with p=0.05; SNR uniform in [-5, 15] dB; the number of extra
distortions k in {0,1,2,3} with p={0.25,0.40,0.20,0.15}; k distinct types
uniformly without replacement from {clipping, bandwidth, codec,
packet_loss}, applied in draw order. Each type's marginal probability is
therefore E[k]/4 = 1.25/4 = 0.3125.
"""

from __future__ import annotations

import json
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.signal

from unipase.audio import Waveform, read_wav, write_wav, snr_db
from unipase.pld import PacketLossMask, packet_samples

EXTRA_TYPES = ("clipping", "bandwidth", "codec", "packet_loss")
EXTRA_COUNT_PROBS = (0.25, 0.40, 0.20, 0.15)
REVERB_PROB = 0.5
WIND_PROB = 0.05
SNR_RANGE_DB = (-5.0, 15.0)
CODEC_FORMATS = ("mp3", "ogg")
QSCALE_RANGE = (-1.0, 10.0)
ROLES = ("clean", "noise", "wind", "rir")

#: Env var pointing at an external encode/decode binary; overrides CodecSpec.tool.
CODEC_TOOL_ENV = "UNIPASE_CODEC_TOOL"


class ManifestError(ValueError):
    """Corpus manifest is unreadable, malformed, or missing a needed role."""


class CodecToolError(RuntimeError):
    """External codec tool missing or failed."""


@dataclass
class ClippingSpec:
    qmin: float
    qmax: float
    kind: str = field(default="clipping", init=False)


@dataclass
class BandwidthSpec:
    limit_hz: float = 4000.0
    kind: str = field(default="bandwidth", init=False)


@dataclass
class CodecSpec:
    format: str = "mp3"
    qscale: float = 2.0
    tool: str | None = None  # None selects the built-in surrogate
    kind: str = field(default="codec", init=False)


@dataclass
class PacketLossSpec:
    rate_fraction: float
    duration_s: float = 0.020
    max_continuous: int = 10
    seed: int = 0  # packet pattern stream, fixed at sampling time
    kind: str = field(default="packet_loss", init=False)


@dataclass
class NoiseSpec:
    pick: int
    offset_pick: int
    snr_db: float
    is_wind: bool


@dataclass
class DegradationRecipe:
    """Full record of the distortions sampled for one training example."""

    reverb_pick: int | None
    noise: NoiseSpec | None
    extra: list

    def __post_init__(self):
        if len(self.extra) > 3:
            raise ValueError("at most 3 extra distortions per recipe")
        kinds = [e.kind for e in self.extra]
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"duplicate extra distortion types: {kinds}")
        if self.noise is not None and not (
            SNR_RANGE_DB[0] <= self.noise.snr_db <= SNR_RANGE_DB[1]
        ):
            raise ValueError(f"snr {self.noise.snr_db} outside {SNR_RANGE_DB}")

    def to_dict(self) -> dict:
        extras = []
        for e in self.extra:
            d = {"kind": e.kind}
            for k, v in vars(e).items():
                if k != "kind":
                    d[k] = v
            extras.append(d)
        noise = None
        if self.noise is not None:
            noise = {
                "pick": self.noise.pick,
                "offset_pick": self.noise.offset_pick,
                "snr_db": self.noise.snr_db,
                "is_wind": self.noise.is_wind,
            }
        return {"reverb_pick": self.reverb_pick, "noise": noise, "extra": extras}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationRecipe":
        spec_types = {
            "clipping": ClippingSpec,
            "bandwidth": BandwidthSpec,
            "codec": CodecSpec,
            "packet_loss": PacketLossSpec,
        }
        extras = []
        for e in d["extra"]:
            kwargs = {k: v for k, v in e.items() if k != "kind"}
            extras.append(spec_types[e["kind"]](**kwargs))
        noise = NoiseSpec(**d["noise"]) if d.get("noise") else None
        return cls(reverb_pick=d.get("reverb_pick"), noise=noise, extra=extras)


def _sample_extra(kind: str, rng: np.random.Generator):
    if kind == "clipping":
        return ClippingSpec(qmin=float(rng.uniform(0.0, 0.1)),
                            qmax=float(rng.uniform(0.9, 1.0)))
    if kind == "bandwidth":
        return BandwidthSpec()
    if kind == "codec":
        return CodecSpec(format=str(rng.choice(CODEC_FORMATS)),
                         qscale=float(rng.uniform(*QSCALE_RANGE)))
    if kind == "packet_loss":
        return PacketLossSpec(rate_fraction=float(rng.uniform(0.05, 0.25)),
                              seed=int(rng.integers(2 ** 63)))
    raise ValueError(kind)


def sample_recipe(rng: np.random.Generator) -> DegradationRecipe:
    """Draw one degradation recipe. Draw order is fixed for reproducibility."""
    reverb_pick = int(rng.integers(2 ** 31)) if rng.random() < REVERB_PROB else None
    is_wind = rng.random() < WIND_PROB
    noise = NoiseSpec(
        pick=int(rng.integers(2 ** 31)),
        offset_pick=int(rng.integers(2 ** 31)),
        snr_db=float(rng.uniform(*SNR_RANGE_DB)),
        is_wind=is_wind,
    )
    k = int(rng.choice(len(EXTRA_COUNT_PROBS), p=EXTRA_COUNT_PROBS))
    kinds = rng.choice(len(EXTRA_TYPES), size=k, replace=False)
    extra = [_sample_extra(EXTRA_TYPES[int(i)], rng) for i in kinds]
    return DegradationRecipe(reverb_pick=reverb_pick, noise=noise, extra=extra)


def scale_noise_to_snr(clean: Waveform, noise: Waveform,
                       snr_db_target: float) -> Waveform:
    """Mix ``clean + g * noise`` with g chosen to hit the target SNR exactly."""
    if len(clean) != len(noise) or clean.rate != noise.rate:
        raise ValueError("clean and noise must share length and rate")
    p_clean = float(np.mean(clean.samples ** 2))
    p_noise = float(np.mean(noise.samples ** 2))
    if p_clean == 0.0 or p_noise == 0.0:
        raise ValueError("cannot mix silent clean or noise at a target SNR")
    g = float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db_target / 10.0))))
    return Waveform(clean.samples + g * noise.samples, clean.rate)


def apply_reverb(clean: Waveform, rir: Waveform) -> Waveform:
    """Full convolution with the RIR, truncated to the input length."""
    if clean.rate != rir.rate:
        raise ValueError(f"rate mismatch: clean {clean.rate}, rir {rir.rate}")
    if len(rir) == 0:
        raise ValueError("empty RIR")
    wet = scipy.signal.fftconvolve(clean.samples, rir.samples)[: len(clean)]
    return Waveform(wet, clean.rate)


def apply_clipping(wave: Waveform, qmin_quantile: float,
                   qmax_quantile: float) -> Waveform:
    """Clamp samples to their signed-amplitude [qmin, qmax] quantiles."""
    if not (0.0 <= qmin_quantile <= 0.1 and 0.9 <= qmax_quantile <= 1.0):
        raise ValueError(
            f"quantiles out of range: qmin={qmin_quantile}, qmax={qmax_quantile}"
        )
    lo, hi = np.quantile(wave.samples, [qmin_quantile, qmax_quantile])
    return Waveform(np.clip(wave.samples, lo, hi), wave.rate)


def apply_bandwidth_limit(wave: Waveform, limit_hz: float = 4000.0) -> Waveform:
    """Kaiser-designed FIR lowpass.

    Passband ripple < 0.01 dB up to ``limit_hz``; >= 60 dB attenuation from
    1.1 * limit_hz upward (transition band spans [limit, 1.1 * limit]).
    """
    if not 0 < limit_hz < wave.rate / 2:
        raise ValueError(f"limit {limit_hz} Hz must be below Nyquist {wave.rate / 2}")
    nyq = wave.rate / 2
    width_hz = 0.1 * limit_hz
    numtaps, beta = scipy.signal.kaiserord(60.0, width_hz / nyq)
    numtaps |= 1
    h = scipy.signal.firwin(numtaps, limit_hz + width_hz / 2,
                            window=("kaiser", beta), fs=wave.rate)
    out = scipy.signal.fftconvolve(wave.samples, h, mode="same")
    return Waveform(out, wave.rate)


def surrogate_bits(qscale: float) -> float:
    """qscale in [-1, 10] maps linearly to surrogate bit depth in [10, 4]."""
    return 10.0 - (qscale + 1.0) * 6.0 / 11.0


def codec_surrogate(wave: Waveform, bits: float) -> Waveform:
    """Built-in codec stand-in: amplitude re-quantization then lowpass.

    ``bits >= 16`` disables the surrogate entirely (identity). The lowpass
    cutoff tracks the bit depth: 0.25 * rate at 4 bits up to 0.45 * rate at
    10 bits.
    """
    if bits >= 16:
        return Waveform(wave.samples.copy(), wave.rate)
    step = 2.0 ** (1.0 - bits)
    quantized = np.round(wave.samples / step) * step
    frac = 0.25 + (min(bits, 10.0) - 4.0) / 6.0 * 0.20
    return apply_bandwidth_limit(Waveform(quantized, wave.rate), frac * wave.rate)


def _external_codec(wave: Waveform, spec: CodecSpec, tool: str) -> Waveform:
    with tempfile.TemporaryDirectory(prefix="unipase_codec_") as tmp:
        src = Path(tmp) / "in.wav"
        dst = Path(tmp) / "out.wav"
        write_wav(src, wave, encoding="float32")
        cmd = [tool, str(src), str(dst), spec.format, str(spec.qscale)]
        try:
            proc = subprocess.run(cmd, capture_output=True, timeout=120)
        except (FileNotFoundError, PermissionError) as exc:
            raise CodecToolError(f"codec tool {tool!r} not runnable: {exc}") from exc
        except subprocess.TimeoutExpired as exc:
            raise CodecToolError(f"codec tool {tool!r} timed out") from exc
        if proc.returncode != 0:
            raise CodecToolError(
                f"codec tool {tool!r} exited {proc.returncode}: "
                f"{proc.stderr.decode(errors='replace')[:500]}"
            )
        if not dst.exists():
            raise CodecToolError(f"codec tool {tool!r} produced no output file")
        out = read_wav(dst)
    samples = out.samples
    if len(samples) >= len(wave):
        samples = samples[: len(wave)]
    else:
        samples = np.pad(samples, (0, len(wave) - len(samples)))
    return Waveform(samples, wave.rate)


def apply_codec(wave: Waveform, spec: CodecSpec) -> Waveform:
    """Codec artifact: external tool when configured, else the surrogate."""
    tool = os.environ.get(CODEC_TOOL_ENV) or spec.tool
    if tool:
        return _external_codec(wave, spec, tool)
    return codec_surrogate(wave, surrogate_bits(spec.qscale))


def _place_losses(n_packets: int, n_lost: int, max_run: int,
                  rng: np.random.Generator) -> np.ndarray:
    flags = np.zeros(n_packets, dtype=np.uint8)
    if n_lost <= 0:
        return flags
    for _ in range(100):
        flags[:] = 0
        placed = 0
        for idx in rng.permutation(n_packets):
            if placed == n_lost:
                break
            left = 0
            j = idx - 1
            while j >= 0 and flags[j]:
                left += 1
                j -= 1
            right = 0
            j = idx + 1
            while j < n_packets and flags[j]:
                right += 1
                j += 1
            if left + 1 + right <= max_run:
                flags[idx] = 1
                placed += 1
        if placed == n_lost:
            return flags
    raise RuntimeError(
        f"could not place {n_lost} losses in {n_packets} packets "
        f"with max run {max_run}"
    )


def apply_packet_loss(wave: Waveform, rate_fraction: float,
                      duration_s: float = 0.020, max_continuous: int = 10,
                      rng: np.random.Generator | None = None,
                      ) -> tuple[Waveform, PacketLossMask]:
    """Zero out random packets at the requested loss fraction.

    round(rate_fraction * N) packets are zeroed; no run of consecutive lost
    packets exceeds ``max_continuous``. Returns the ground-truth mask.
    """
    if not 0.05 <= rate_fraction <= 0.25:
        raise ValueError(f"loss fraction {rate_fraction} outside [0.05, 0.25]")
    rng = rng if rng is not None else np.random.default_rng()
    p = packet_samples(wave.rate, duration_s)
    n_packets = len(wave) // p
    if n_packets == 0:
        raise ValueError(
            f"utterance of {len(wave)} samples is shorter than one packet ({p})"
        )
    n_lost = int(round(rate_fraction * n_packets))
    flags = _place_losses(n_packets, n_lost, max_continuous, rng)
    out = wave.samples.copy()
    for i in np.flatnonzero(flags):
        out[i * p : (i + 1) * p] = 0.0
    return Waveform(out, wave.rate), PacketLossMask(flags, p)


@dataclass
class ManifestEntry:
    path: str
    role: str
    rate: int
    duration_s: float

    def __post_init__(self):
        if self.role not in ROLES:
            raise ManifestError(f"unknown role {self.role!r}; expected one of {ROLES}")


class CorpusManifest:
    """Line-delimited corpus index: one JSON object per line with keys
    path / role / rate / duration_s. Relative paths resolve against the
    manifest file's directory."""

    def __init__(self, entries: list[ManifestEntry], base_dir: Path | None = None):
        self.entries = entries
        self.base_dir = Path(base_dir) if base_dir else Path(".")

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        path = Path(path)
        if not path.is_file():
            raise ManifestError(f"manifest not found: {path}")
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                entries.append(ManifestEntry(
                    path=rec["path"], role=rec["role"],
                    rate=int(rec["rate"]), duration_s=float(rec["duration_s"]),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
        manifest = cls(entries, base_dir=path.parent)
        for e in entries:
            if not manifest.resolve(e).is_file():
                raise ManifestError(f"manifest references missing file: {e.path}")
        return manifest

    def save(self, path: str | Path) -> None:
        lines = [
            json.dumps({"path": e.path, "role": e.role, "rate": e.rate,
                        "duration_s": e.duration_s})
            for e in self.entries
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.base_dir / p

    def by_role(self, role: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == role]


class Banks:
    """Audio store over a manifest: resolves recipe picks to concrete clips,
    loading and resampling on demand with a small cache."""

    def __init__(self, manifest: CorpusManifest):
        self.manifest = manifest
        self._cache: dict[tuple[str, int], Waveform] = {}

    def _load(self, entry: ManifestEntry, rate: int) -> Waveform:
        from unipase.audio import resample

        key = (entry.path, rate)
        if key not in self._cache:
            wave = read_wav(self.manifest.resolve(entry))
            if wave.rate != rate:
                wave = resample(wave, rate)
            if len(self._cache) >= 512:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = wave
        return self._cache[key]

    def get(self, role: str, pick: int, rate: int) -> Waveform:
        entries = self.manifest.by_role(role)
        if not entries:
            raise ManifestError(f"manifest has no entries with role {role!r}")
        return self._load(entries[pick % len(entries)], rate)

    def noise_segment(self, role: str, pick: int, offset_pick: int,
                      rate: int, length: int) -> Waveform:
        noise = self.get(role, pick, rate)
        x = noise.samples
        if len(x) < length:
            reps = -(-length // len(x))
            x = np.tile(x, reps)
        offset = offset_pick % (len(x) - length + 1)
        return Waveform(x[offset : offset + length].copy(), rate)


def degrade(clean: Waveform, banks: Banks, recipe: DegradationRecipe,
            ) -> tuple[Waveform, Waveform, DegradationRecipe]:
    """Apply a recipe: reverb, then noise mixing, then extras in recipe order.

    The target of the returned pair is the untouched dry clean utterance.
    """
    target = Waveform(clean.samples.copy(), clean.rate)
    x = clean
    if recipe.reverb_pick is not None:
        rir = banks.get("rir", recipe.reverb_pick, clean.rate)
        x = apply_reverb(x, rir)
    if recipe.noise is not None:
        role = "wind" if recipe.noise.is_wind else "noise"
        noise = banks.noise_segment(role, recipe.noise.pick,
                                    recipe.noise.offset_pick, clean.rate, len(x))
        x = scale_noise_to_snr(x, noise, recipe.noise.snr_db)
    for spec in recipe.extra:
        if spec.kind == "clipping":
            x = apply_clipping(x, spec.qmin, spec.qmax)
        elif spec.kind == "bandwidth":
            x = apply_bandwidth_limit(x, spec.limit_hz)
        elif spec.kind == "codec":
            x = apply_codec(x, spec)
        elif spec.kind == "packet_loss":
            x, _ = apply_packet_loss(
                x, spec.rate_fraction, spec.duration_s, spec.max_continuous,
                np.random.default_rng(spec.seed),
            )
        else:
            raise ValueError(f"unknown distortion kind {spec.kind!r}")
    return x, target, recipe

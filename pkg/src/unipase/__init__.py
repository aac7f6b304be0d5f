"""Universal speech enhancement pipeline.

Degradation simulation, packet-loss detection, representation-distillation
enhancement, adversarially trained refinement, vocoding, and bandwidth
extension, with a batch CLI on top.
"""

__version__ = "0.1.0"

from unipase.audio import (  # noqa: F401
    MelConfig,
    Spectrogram,
    UnsupportedWavError,
    Waveform,
    read_wav,
    write_wav,
)
from unipase.pld import PacketLossMask, PldConfig, detect  # noqa: F401

"""Checkpoint container shared by every trainable module.

A checkpoint is a torch-saved dict of plain values and tensors:
  schema_version: 1
  stage:          which module produced it
  config:         the module's config as a plain dict
  step:           training steps completed
  state:          named parameter/buffer tensors (a state_dict)

Files are written as ``<stage>.pt`` inside a checkpoint directory.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch

SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file missing, corrupt, or shape-incompatible."""


class StageDependencyError(CheckpointError):
    """A training stage's upstream checkpoint is missing."""


def save_checkpoint(path: str | Path, stage: str, config: dict, step: int,
                    state: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"schema_version": SCHEMA_VERSION, "stage": stage, "config": dict(config),
         "step": int(step), "state": state},
        path,
    )
    return path


def load_checkpoint(path: str | Path, expect_stage: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    for key in ("schema_version", "stage", "config", "step", "state"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} missing field {key!r}")
    if payload["schema_version"] != SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has schema {payload['schema_version']}, "
            f"expected {SCHEMA_VERSION}"
        )
    if expect_stage is not None and payload["stage"] != expect_stage:
        raise CheckpointError(
            f"checkpoint {path} holds stage {payload['stage']!r}, "
            f"expected {expect_stage!r}"
        )
    return payload


def load_state_into(module: torch.nn.Module, state: dict, origin: str) -> None:
    """Strict state-dict load with checkpoint-typed errors."""
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{origin}: incompatible parameters: {exc}") from exc


def param_hash(module: torch.nn.Module) -> str:
    """SHA-256 over all named parameters and buffers, in order."""
    digest = hashlib.sha256()
    for name, tensor in list(module.named_parameters()) + list(module.named_buffers()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()

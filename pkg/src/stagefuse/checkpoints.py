"""Parameter checkpoints with JSON sidecars

A checkpoint is two files: ``<name>.pt`` holding the parameter state
(plus optional optimizer state) and ``<name>.json`` describing it. Both
are written to a temporary name and renamed into place; the sidecar is
written last, so a checkpoint counts as durable once its sidecar exists.
"""
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import CheckpointError, MissingCheckpoint

__all__ = [
    "Checkpoint",
    "load_checkpoint",
    "parameter_hash",
    "save_checkpoint",
    "sidecar_path",
]


def parameter_hash(state):
    """sha256 over names, dtypes, shapes and raw bytes, in state order"""
    digest = hashlib.sha256()
    for key, value in state.items():
        tensor = value.detach().cpu().contiguous()
        digest.update(key.encode())
        digest.update(f"{tensor.dtype}{tuple(tensor.shape)}".encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def _replace_atomically(path, write):
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_checkpoint(path, state, meta, extra=None):
    """Write ``state`` and its sidecar; return the sidecar dict"""
    path = Path(path)
    sidecar = dict(meta)
    sidecar.setdefault("parameter_count", sum(
        value.numel() for value in state.values()
        if value.is_floating_point()))
    sidecar["content_hash"] = parameter_hash(state)
    blob = {"parameters": state}
    if extra:
        blob["extra"] = extra
    text = json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _replace_atomically(path, lambda tmp: torch.save(blob, tmp))
        _replace_atomically(sidecar_path(path),
                            lambda tmp: tmp.write_text(text))
    except OSError as exc:
        raise CheckpointError(
            f"cannot write checkpoint {str(path)!r}: {exc}") from exc
    return sidecar


@dataclass(frozen=True, eq=False)
class Checkpoint:
    state: dict
    sidecar: dict
    extra: dict


def load_checkpoint(path):
    """Read a durable checkpoint and verify its content hash"""
    path = Path(path)
    meta = sidecar_path(path)
    if not (path.is_file() and meta.is_file()):
        raise MissingCheckpoint(f"no durable checkpoint at {str(path)!r}")
    try:
        sidecar = json.loads(meta.read_text())
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, ValueError, RuntimeError) as exc:
        raise CheckpointError(
            f"cannot read checkpoint {str(path)!r}: {exc}") from exc
    state = blob["parameters"]
    if parameter_hash(state) != sidecar.get("content_hash"):
        raise CheckpointError(
            f"checkpoint {str(path)!r} does not match its sidecar hash")
    return Checkpoint(state, sidecar, blob.get("extra", {}))

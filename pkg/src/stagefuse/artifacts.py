"""Run-directory ownership, deterministic artifact writers and manifests"""
import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoints import _replace_atomically
from .errors import RunLocked

__all__ = [
    "LOCK_NAME",
    "MANIFEST_NAME",
    "ManifestCheck",
    "file_hash",
    "run_lock",
    "verify_manifest",
    "write_frame",
    "write_json",
    "write_manifest",
]

logger = logging.getLogger(__name__)

LOCK_NAME = ".stagefuse.lock"
MANIFEST_NAME = "manifest.json"


@contextmanager
def run_lock(out_dir):
    """Own ``out_dir`` exclusively for the duration of the block"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(
            f"{str(out_dir)!r} is in use (remove {LOCK_NAME} if stale)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return value.as_posix()
    raise TypeError(f"not JSON serializable: {value!r}")


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _replace_atomically(path, lambda tmp: tmp.write_text(text))
    logger.debug("wrote %s", path)
    return path


def write_json(path, data):
    text = json.dumps(data, indent=2, sort_keys=True, default=_jsonable)
    return _write_text(path, text + "\n")


def write_frame(frame, path, index=False):
    """CSV with ``\\n`` line endings and shortest round-trip floats"""
    return _write_text(path, frame.to_csv(index=index, lineterminator="\n"))


def file_hash(path):
    digest = hashlib.sha256()
    with open(path, "rb") as file:
        for block in iter(lambda: file.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def _run_files(out_dir):
    for path in sorted(out_dir.rglob("*")):
        if not path.is_file() or path.name in (LOCK_NAME, MANIFEST_NAME):
            continue
        if path.name.startswith(".") and path.name.endswith(".tmp"):
            continue
        yield path.relative_to(out_dir).as_posix(), path


def write_manifest(out_dir):
    """Hash every file in ``out_dir`` into ``manifest.json``"""
    out_dir = Path(out_dir)
    files = {name: file_hash(path) for name, path in _run_files(out_dir)}
    write_json(out_dir / MANIFEST_NAME, {"files": files})
    logger.info("manifest lists %d files", len(files))
    return files


@dataclass(frozen=True)
class ManifestCheck:
    missing: tuple
    modified: tuple
    unlisted: tuple

    @property
    def ok(self):
        return not (self.missing or self.modified or self.unlisted)


def verify_manifest(out_dir):
    out_dir = Path(out_dir)
    manifest = out_dir / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {str(out_dir)!r}")
    listed = json.loads(manifest.read_text())["files"]
    present = dict(_run_files(out_dir))
    return ManifestCheck(
        missing=tuple(sorted(set(listed) - set(present))),
        modified=tuple(sorted(
            name for name in set(listed) & set(present)
            if file_hash(present[name]) != listed[name])),
        unlisted=tuple(sorted(set(present) - set(listed))),
    )

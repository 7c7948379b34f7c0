"""Run manifests, output-directory guards and the per-directory lock file."""

from __future__ import annotations

import hashlib
import logging
import os
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Final

from flows.checkpoint import canonical_json

MANIFEST_NAME: Final[str] = "manifest.json"
LOCK_NAME: Final[str] = ".flowbridge.lock"
_HASH_CHUNK: Final[int] = 1 << 20


class DataError(RuntimeError):
    """Input or output data unusable: grid mismatch, missing labels, occupied output directory."""


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(_HASH_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_files(paths: list[Path], root: Path) -> dict[str, str]:
    """sha256 per file, keyed by the path relative to ``root`` (or the file name outside it)."""
    hashes: dict[str, str] = {}
    for path in paths:
        try:
            key = path.relative_to(root).as_posix()
        except ValueError:
            key = path.name
        hashes[key] = file_sha256(path)
    return hashes


def content_hash(hashes: dict[str, str]) -> str:
    """One hash over a set of file hashes, independent of listing order."""
    lines = "".join(f"{name} {value}\n" for name, value in sorted(hashes.items()))
    return hashlib.sha256(lines.encode("utf-8")).hexdigest()


def write_manifest(
    directory: Path,
    *,
    command: str,
    config_hash: str,
    seed: int,
    inputs: dict[str, str],
    outputs: list[Path],
    extra: dict[str, Any] | None = None,
    name: str = MANIFEST_NAME,
) -> Path:
    """Canonical JSON manifest; it carries no timestamps, so reruns produce the same bytes."""
    output_hashes = hash_files(outputs, directory)
    payload: dict[str, Any] = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "inputs": inputs,
        "inputs_content_hash": content_hash(inputs),
        "outputs": output_hashes,
    }
    if extra:
        payload["extra"] = extra
    path = directory / name
    path.write_text(canonical_json(payload) + "\n", encoding="utf-8")
    return path


def prepare_output_dir(directory: Path, *, force: bool = False, allow_existing: bool = False) -> Path:
    """Create ``directory``; a non-empty one is an error unless ``force`` or ``allow_existing``."""
    if directory.exists() and not directory.is_dir():
        raise DataError(f"output path {directory} exists and is not a directory")
    if directory.exists() and any(p.name != LOCK_NAME for p in directory.iterdir()):
        if not (force or allow_existing):
            raise DataError(f"output directory {directory} is not empty; pass --force to overwrite")
        if force:
            logging.warning("writing into non-empty output directory %s", directory)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


@contextmanager
def output_lock(directory: Path) -> Iterator[Path]:
    """Exclusive lock on ``directory`` for one command; a concurrent invocation fails fast."""
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"output directory {directory} is locked by another run ({lock_path})") from None
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield lock_path
    finally:
        lock_path.unlink(missing_ok=True)

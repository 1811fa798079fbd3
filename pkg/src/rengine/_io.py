"""Small filesystem and hashing helpers shared by the on-disk formats."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class CorruptionError(Exception):
    """Raised when a file fails a checksum or structural check."""

    def __init__(self, message: str, path: str | os.PathLike | None = None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = None if path is None else Path(path)


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: str | os.PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode()


def with_checksum(obj: dict) -> dict:
    """Return a copy of ``obj`` carrying a sha256 of its canonical form."""
    body = {k: v for k, v in obj.items() if k != "checksum"}
    body["checksum"] = sha256_hex(canonical_json(body))
    return body


def verify_checksum(obj: dict, path) -> dict:
    if "checksum" not in obj:
        raise CorruptionError("missing checksum", path)
    body = {k: v for k, v in obj.items() if k != "checksum"}
    if sha256_hex(canonical_json(body)) != obj["checksum"]:
        raise CorruptionError("checksum mismatch", path)
    return body


def read_json(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return json.loads(fh.read())
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"unparseable JSON ({exc})", path) from exc


def atomic_write_bytes(path, data: bytes, fsync: bool = False) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        if fsync:
            fh.flush()
            os.fsync(fh.fileno())
    os.replace(tmp, path)


def fsync_tree(root) -> None:
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            fd = os.open(os.path.join(dirpath, name), os.O_RDONLY)
            try:
                os.fsync(fd)
            finally:
                os.close(fd)
        fd = os.open(dirpath, os.O_RDONLY)
        try:
            os.fsync(fd)
        finally:
            os.close(fd)


def tree_digest(root, exclude: tuple[str, ...] = ()) -> str:
    """Hash of relative paths and contents of every file below ``root``."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if any(rel == e or rel.startswith(e + "/") for e in exclude):
            continue
        digest.update(rel.encode() + b"\0")
        digest.update(file_sha256(path).encode())
    return digest.hexdigest()

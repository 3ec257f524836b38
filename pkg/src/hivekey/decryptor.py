"""Decrypt infected files from a solved key graph or a resolved key.

Decryption needs only relations: the keystream byte at file position p is
key[sp1 + p % 0x100000] ^ key[sp2 + p % 0x400], which a KeyGraph knows as soon
as both offsets share a component, anchored or not.
"""

from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .extraction import as_bytes_array
from .layout import KS1_MASK, KS2_MASK, SUFFIX, FileToken, MalformedName, decode_filename, encrypted_spans
from .solver import save_bitmap

log = logging.getLogger(__name__)


class Status(enum.Enum):
    FULL = "full"
    PARTIAL = "partial"
    FAILED = "failed"


def _status(done: int, total: int) -> Status:
    if done == total:
        return Status.FULL
    return Status.FAILED if done == 0 else Status.PARTIAL


def _keystream(key_source, token: FileToken, pos: np.ndarray):
    offs = token.offsets
    idx = pos & KS1_MASK
    return key_source.relations(idx + offs.sp1, (idx & KS2_MASK) + offs.sp2)


def decrypt_file(infected, token: FileToken, key_source) -> tuple[bytes, np.ndarray]:
    """Return (decrypted bytes, per-byte mask of bytes known to be plaintext).

    `key_source` is a KeyGraph or ResolvedKey (anything with `relations`).
    Encrypted bytes whose keystream is unknown stay as ciphertext with a
    False mask entry; bytes outside the encrypted spans are always True.
    """
    data = as_bytes_array(infected)
    out = np.array(data, dtype=np.uint8, copy=True)
    mask = np.ones(len(out), dtype=bool)
    layout = encrypted_spans(len(out))
    for start, stop in layout.chunks():
        pos = layout.positions(start, stop)
        ks, known = _keystream(key_source, token, pos)
        out[pos] ^= ks
        mask[pos] = known
    return out.tobytes(), mask


def file_resolution(file_size: int, token: FileToken, key_source) -> tuple[int, int]:
    """(decryptable encrypted bytes, total encrypted bytes) without touching data."""
    layout = encrypted_spans(file_size)
    done = 0
    for start, stop in layout.chunks():
        _, known = _keystream(key_source, token, layout.positions(start, stop))
        done += int(known.sum())
    return done, layout.encrypted_bytes


@dataclass
class FileResult:
    path: str
    status: Status
    bytes_decrypted: int
    bytes_total_encrypted: int
    output: str = ""
    error: str = ""

    def to_json(self) -> dict:
        d = {
            "path": self.path,
            "status": self.status.value,
            "bytes_decrypted": self.bytes_decrypted,
            "bytes_total_encrypted": self.bytes_total_encrypted,
            "output": self.output,
        }
        if self.error:
            d["error"] = self.error
        return d


@dataclass
class DecryptionReport:
    files: list[FileResult] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def _rate(self, status: Status) -> float:
        return sum(f.status is status for f in self.files) / len(self.files) if self.files else 0.0

    @property
    def full_rate(self) -> float:
        return self._rate(Status.FULL)

    @property
    def partial_rate(self) -> float:
        return self._rate(Status.PARTIAL)

    def to_json(self) -> dict:
        return {
            "full_rate": self.full_rate,
            "partial_rate": self.partial_rate,
            "files": [f.to_json() for f in self.files],
            "skipped": self.skipped,
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def output_path(infected: Path, original_name: str, out_dir: Path | None, root: Path) -> Path:
    if out_dir is None:
        target = infected.with_name(original_name)
    else:
        target = out_dir / infected.parent.relative_to(root) / original_name
    if target.exists():
        target = target.with_name(target.name + ".recovered")
    return target


def decrypt_corpus(root, key_source, key_tag: bytes | None = None, out_dir=None) -> DecryptionReport:
    """Decrypt every `.hive` file under root, never touching the infected file.

    Files whose token carries a different key tag are skipped. Partially
    decrypted files get a `<output>.mask` bitmap sidecar (1 bit per byte,
    LSB-first, set where the byte is plaintext).
    """
    root = Path(root)
    out_dir = Path(out_dir) if out_dir is not None else None
    report = DecryptionReport()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if not name.endswith(SUFFIX):
                continue
            path = Path(dirpath) / name
            try:
                original, token = decode_filename(name)
            except MalformedName:
                continue  # key files and foreign names
            if key_tag is not None and token.key_tag != key_tag:
                report.skipped.append(str(path))
                continue
            try:
                plain, mask = decrypt_file(path, token, key_source)
                total = encrypted_spans(len(mask)).encrypted_bytes
                done = total - int((~mask).sum())
                target = output_path(path, original, out_dir, root)
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(plain)
                status = _status(done, total)
                if status is not Status.FULL:
                    save_bitmap(mask, str(target) + ".mask")
                report.files.append(FileResult(str(path), status, done, total, str(target)))
            except OSError as exc:
                log.warning("cannot decrypt %s: %s", path, exc)
                report.files.append(FileResult(str(path), Status.FAILED, 0, 0, error=str(exc)))
    return report

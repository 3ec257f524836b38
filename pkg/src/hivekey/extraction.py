"""Known-plaintext equations over master-key offsets.

An (original, infected) pair, or a known magic prefix in an infected file,
exposes bytes of the per-file keystream. Each exposed byte at file position p
is a relation between two master-key bytes:

    key[sp1 + p % 0x100000] ^ key[sp2 + p % 0x400] == original[p] ^ infected[p]
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layout import (
    KEY_SIZE,
    KS1_LEN,
    KS1_MASK,
    KS2_MASK,
    EncryptionLayout,
    FileToken,
    encrypted_spans,
)

HEQS_MAGIC = b"HEQS"
HEQS_VERSION = 1
RECORD = np.dtype([("a", "<u4"), ("b", "<u4"), ("v", "u1")])

DEFAULT_SIGNATURES = """\
# extension,hex_magic,offset
pdf,255044462d,0
zip,504b0304,0
xlsx,504b0304,0
docx,504b0304,0
pptx,504b0304,0
png,89504e470d0a1a0a,0
jpg,ffd8ffe0,0
jpeg,ffd8ffe0,0
hwp,d0cf11e0a1b11ae1,0
"""


class ConflictingDuplicate(ValueError):
    """The same keystream index was exposed with two different values."""


class SignatureOutsideEncryptedRegion(ValueError):
    pass


class PairVerdict(enum.Enum):
    MATCH = "match"
    MISMATCH = "mismatch"


@dataclass(frozen=True)
class Equation:
    a: int
    b: int
    v: int

    def __post_init__(self):
        if not (0 <= self.a < KEY_SIZE and 0 <= self.b < KEY_SIZE and 0 <= self.v < 256):
            raise ValueError(f"equation out of range: {self}")


@dataclass
class EquationBatch:
    """All equations contributed by one source file.

    Stored compactly as Keystream1 indices plus values; the offsets follow
    from (sp1, sp2): a = sp1 + index, b = sp2 + index % 0x400.
    """

    source: str
    sp1: int
    sp2: int
    index: np.ndarray
    value: np.ndarray

    def __len__(self) -> int:
        return len(self.index)

    @property
    def a(self) -> np.ndarray:
        return (self.index + self.sp1).astype(np.uint32)

    @property
    def b(self) -> np.ndarray:
        return ((self.index & KS2_MASK) + self.sp2).astype(np.uint32)

    def equations(self) -> set[Equation]:
        return {Equation(int(a), int(b), int(v)) for a, b, v in zip(self.a, self.b, self.value)}

    def records(self) -> np.ndarray:
        out = np.empty(len(self), dtype=RECORD)
        out["a"], out["b"], out["v"] = self.a, self.b, self.value
        return out


def as_bytes_array(data) -> np.ndarray:
    """View bytes-like data, an ndarray or a path as a flat uint8 array."""
    if isinstance(data, (str, Path)):
        path = Path(data)
        if path.stat().st_size == 0:
            return np.empty(0, dtype=np.uint8)
        return np.memmap(path, dtype=np.uint8, mode="r")
    if isinstance(data, np.ndarray):
        return data.reshape(-1).view(np.uint8)
    return np.frombuffer(data, dtype=np.uint8)


def _gaps(layout: EncryptionLayout):
    prev = 0
    for off, length in layout.spans:
        if off > prev:
            yield prev, off
        prev = max(prev, off + length)
    if prev < layout.file_size:
        yield prev, layout.file_size


def verify_pair(original, infected) -> PairVerdict:
    """Match iff both files agree on every byte the malware leaves in clear."""
    orig = as_bytes_array(original)
    inf = as_bytes_array(infected)
    if len(orig) != len(inf):
        return PairVerdict.MISMATCH
    for lo, hi in _gaps(encrypted_spans(len(inf))):
        if not np.array_equal(orig[lo:hi], inf[lo:hi]):
            return PairVerdict.MISMATCH
    return PairVerdict.MATCH


def _index_slices(off: int, length: int):
    """Keystream1 index ranges touched by a span; a span wraps at most once."""
    i0 = off & KS1_MASK
    if i0 + length <= KS1_LEN:
        yield 0, length, i0
    else:
        cut = KS1_LEN - i0
        yield 0, cut, i0
        yield cut, length, 0


def extract_equations_pair(original, infected, token: FileToken, source: str = "") -> EquationBatch:
    """One equation per exposed keystream index, first occurrence wins."""
    orig = as_bytes_array(original)
    inf = as_bytes_array(infected)
    if len(orig) != len(inf):
        raise ValueError("original and infected differ in size")
    layout = encrypted_spans(len(inf))
    eks = np.zeros(KS1_LEN, dtype=np.uint8)
    seen = np.zeros(KS1_LEN, dtype=bool)
    for off, length in layout.spans:
        vals = orig[off : off + length] ^ inf[off : off + length]
        for lo, hi, i0 in _index_slices(off, length):
            n = hi - lo
            known = seen[i0 : i0 + n]
            cur = eks[i0 : i0 + n]
            v = vals[lo:hi]
            if (known & (cur != v)).any():
                bad = i0 + int(np.argmax(known & (cur != v)))
                raise ConflictingDuplicate(f"{source or 'pair'}: keystream index {bad:#x} exposed twice with different values")
            np.copyto(cur, v, where=~known)
            known[:] = True
    idx = np.flatnonzero(seen).astype(np.uint32)
    offs = token.offsets
    return EquationBatch(source, offs.sp1, offs.sp2, idx, eks[idx])


# --- signatures -----------------------------------------------------------


@dataclass(frozen=True)
class SignatureEntry:
    extension: str
    magic: bytes
    offset_in_file: int = 0

    def __post_init__(self):
        if not self.magic:
            raise ValueError("signature magic must be non-empty")
        if self.offset_in_file < 0:
            raise ValueError("signature offset must be non-negative")


def parse_signature_db(text: str) -> dict[str, SignatureEntry]:
    db = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            ext, magic, offset = (t.strip() for t in line.split(","))
            entry = SignatureEntry(ext.lower().lstrip("."), bytes.fromhex(magic), int(offset, 0))
        except ValueError as exc:
            raise ValueError(f"signature db line {lineno}: {exc}") from exc
        db[entry.extension] = entry
    return db


def load_signature_db(path=None) -> dict[str, SignatureEntry]:
    if path is None or str(path) == "default":
        return parse_signature_db(DEFAULT_SIGNATURES)
    return parse_signature_db(Path(path).read_text())


def extract_equations_signature(infected, token: FileToken, sig: SignatureEntry, source: str = "") -> EquationBatch:
    inf = as_bytes_array(infected)
    layout = encrypted_spans(len(inf))
    start = sig.offset_in_file
    stop = start + len(sig.magic)
    if stop > len(inf) or not all(layout.contains(p) for p in range(start, stop)):
        raise SignatureOutsideEncryptedRegion(f"{sig.extension} magic at {start:#x} is not fully encrypted")
    pos = np.arange(start, stop, dtype=np.int64)
    vals = np.frombuffer(sig.magic, dtype=np.uint8) ^ inf[start:stop]
    idx = pos & KS1_MASK
    order = np.argsort(idx, kind="stable")
    idx, first = np.unique(idx[order], return_index=True)
    offs = token.offsets
    return EquationBatch(source, offs.sp1, offs.sp2, idx.astype(np.uint32), vals[order][first])


# --- coverage -------------------------------------------------------------


def ks1_intervals(file_size: int) -> np.ndarray:
    """Keystream1 index intervals [lo, hi) touched by a file, wraps split."""
    layout = encrypted_spans(file_size)
    if not layout.spans:
        return np.empty((0, 2), dtype=np.int64)
    lo = layout.offsets & KS1_MASK
    hi = lo + layout.lengths
    wrap = hi > KS1_LEN
    lo = np.concatenate([lo, np.zeros(int(wrap.sum()), dtype=np.int64)])
    hi = np.concatenate([np.minimum(hi, KS1_LEN), hi[wrap] - KS1_LEN])
    return np.stack([lo, hi], axis=1)


def eks_coverage(file_size: int) -> tuple[int, int]:
    """(distinct Keystream1 indices, distinct Keystream2 indices) a file exposes."""
    iv = ks1_intervals(file_size)
    if len(iv) == 0:
        return 0, 0
    iv = iv[np.argsort(iv[:, 0], kind="stable")]
    reach = np.maximum.accumulate(iv[:, 1])
    prev = np.concatenate([[0], reach[:-1]])
    ks1 = int(np.maximum(0, iv[:, 1] - np.maximum(iv[:, 0], prev)).sum())
    # a Keystream2 index is i % 0x400 of a covered Keystream1 index
    longest = int((iv[:, 1] - iv[:, 0]).max())
    if longest >= KS2_MASK + 1:
        ks2 = KS2_MASK + 1
    else:
        hit = np.zeros(KS2_MASK + 1, dtype=bool)
        for lo, hi in iv:
            hit[np.arange(lo, hi) & KS2_MASK] = True
        ks2 = int(hit.sum())
    return ks1, ks2


# --- HEQS equation files --------------------------------------------------


def write_equations(path, batches) -> int:
    """Write batches in the HEQS format; returns the record count."""
    total = sum(len(b) for b in batches)
    with open(path, "wb") as fh:
        fh.write(HEQS_MAGIC + struct.pack("<IQ", HEQS_VERSION, total))
        for batch in batches:
            fh.write(batch.records().tobytes())
    return total


def read_equations(path) -> np.ndarray:
    """Read a HEQS file into a structured array with fields a, b, v."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != HEQS_MAGIC:
            raise ValueError(f"{path}: not a HEQS file")
        version, count = struct.unpack("<IQ", head[4:])
        if version != HEQS_VERSION:
            raise ValueError(f"{path}: unsupported HEQS version {version}")
        body = fh.read()
    if len(body) != count * RECORD.itemsize:
        raise ValueError(f"{path}: expected {count} records, found {len(body)} bytes")
    recs = np.frombuffer(body, dtype=RECORD)
    if len(recs) and (recs["a"].max() >= KEY_SIZE or recs["b"].max() >= KEY_SIZE):
        raise ValueError(f"{path}: offset out of range")
    return recs

"""On-disk format of Hive-infected files.

Block-size math, the map of encrypted spans inside a file, keystream offsets
derived from the per-file randoms, and the infected-filename codec.
"""

from __future__ import annotations

import base64
import binascii
import re
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

KEY_SIZE = 0xA00000
KS1_LEN = 0x100000
KS2_LEN = 0x400
KS1_MASK = KS1_LEN - 1
KS2_MASK = KS2_LEN - 1
BLOCK = 0x1000
SP1_MOD = KEY_SIZE - KS1_LEN  # 0x900000
SP2_MOD = KEY_SIZE - KS2_LEN  # 0x9FFC00

SUFFIX = ".hive"
KEY_SUFFIX = ".key.hive"
TOKEN_CHARS = 43
TAG_CHARS = 22
U64 = (1 << 64) - 1

_B64URL = re.compile(r"^[A-Za-z0-9_-]+$")

# (exclusive upper bound, percentage applied to FS >> 12); last row is the catch-all
_NBS_BRACKETS = (
    (0x20000, None),
    (0x100000, 30),
    (0xA00000, 20),
    (0x6400000, 10),
    (0x40000000, 5),
    (None, 1),
)


class MalformedName(ValueError):
    """Raised when an infected filename does not follow the Hive naming rule."""


def compute_nbs(file_size: int) -> int:
    """Size of the plaintext gap between two encrypted 0x1000-byte blocks."""
    if file_size < 0:
        raise ValueError("file_size must be non-negative")
    if file_size <= BLOCK:
        return 0
    blocks = file_size >> 12
    for bound, pct in _NBS_BRACKETS:
        if bound is None or file_size < bound:
            if pct is not None:
                blocks = (blocks * pct) // 100
            break
    if blocks == 1:
        return 0
    return (file_size - (blocks << 12)) // (blocks - 1)


def block_count(file_size: int) -> int:
    """Number of periodic 0x1000-byte blocks, excluding the trailing block.

    This is the quantity tabulated per size bracket; the trailing block
    encrypted from the end of the file is not part of it.
    """
    if file_size <= 0:
        return 0
    if file_size <= BLOCK:
        return 1
    return file_size // (BLOCK + compute_nbs(file_size))


@dataclass(frozen=True)
class EncryptionLayout:
    file_size: int
    nbs: int
    spans: tuple[tuple[int, int], ...]

    @property
    def period(self) -> int:
        return BLOCK + self.nbs

    @property
    def encrypted_bytes(self) -> int:
        return sum(length for _, length in self.spans)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.fromiter((o for o, _ in self.spans), dtype=np.int64, count=len(self.spans))

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.fromiter((n for _, n in self.spans), dtype=np.int64, count=len(self.spans))

    def positions(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Encrypted file positions of spans[start:stop], ascending, as int64."""
        offs = self.offsets[start:stop]
        lens = self.lengths[start:stop]
        if len(offs) == 0:
            return np.empty(0, dtype=np.int64)
        total = int(lens.sum())
        # run-length expansion: position = span offset + index within span
        starts = np.repeat(offs - np.concatenate(([0], np.cumsum(lens)[:-1])), lens)
        return starts + np.arange(total, dtype=np.int64)

    def chunks(self, max_bytes: int = 1 << 22):
        """Yield (start, stop) span-index ranges holding at most ~max_bytes each."""
        n = len(self.spans)
        i = 0
        while i < n:
            acc = 0
            j = i
            while j < n and (acc == 0 or acc + self.spans[j][1] <= max_bytes):
                acc += self.spans[j][1]
                j += 1
            yield i, j
            i = j

    def contains(self, pos: int) -> bool:
        idx = int(np.searchsorted(self.offsets, pos, side="right")) - 1
        return idx >= 0 and pos < self.spans[idx][0] + self.spans[idx][1]


def _clip_spans(periodic: list[tuple[int, int]], tail: tuple[int, int] | None) -> list[tuple[int, int]]:
    if tail is None:
        return periodic
    out = []
    for off, length in periodic:
        if off + length <= tail[0]:
            out.append((off, length))
        elif off < tail[0]:
            out.append((off, tail[0] - off))
        # spans starting inside the tail span are dropped: the tail wins
    out.append(tail)
    return out


def encrypted_spans(file_size: int) -> EncryptionLayout:
    if file_size < 0:
        raise ValueError("file_size must be non-negative")
    if file_size == 0:
        return EncryptionLayout(0, 0, ())
    if file_size <= BLOCK:
        return EncryptionLayout(file_size, 0, ((0, file_size),))
    nbs = compute_nbs(file_size)
    period = BLOCK + nbs
    iters = file_size // period
    periodic = [(k * period, BLOCK) for k in range(iters)]
    rest = file_size - iters * period
    if rest > BLOCK:
        tail = (file_size - BLOCK, BLOCK)
    elif rest > 0:
        tail = (file_size - rest, rest)
    else:
        tail = None
    return EncryptionLayout(file_size, nbs, tuple(_clip_spans(periodic, tail)))


@dataclass(frozen=True)
class KeystreamOffsets:
    sp1: int
    sp2: int


def keystream_offsets(r1: int, r2: int) -> KeystreamOffsets:
    # the randoms are read as unsigned 64-bit values
    return KeystreamOffsets((r1 & U64) % SP1_MOD, (r2 & U64) % SP2_MOD)


@dataclass(frozen=True)
class FileToken:
    key_tag: bytes
    r1: int
    r2: int

    def __post_init__(self):
        if len(self.key_tag) != 16:
            raise ValueError(f"key_tag must be 16 bytes, got {len(self.key_tag)}")
        for name in ("r1", "r2"):
            val = getattr(self, name)
            if not 0 <= val <= U64:
                raise ValueError(f"{name} out of u64 range: {val}")

    @property
    def offsets(self) -> KeystreamOffsets:
        return keystream_offsets(self.r1, self.r2)

    def payload(self) -> bytes:
        return self.key_tag + struct.pack("<QQ", self.r1, self.r2)


def b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    if not _B64URL.match(text):
        raise MalformedName(f"invalid base64url segment: {text!r}")
    try:
        raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (binascii.Error, ValueError) as exc:
        raise MalformedName(f"cannot decode {text!r}: {exc}") from exc
    if b64url(raw) != text:
        # non-canonical trailing bits would break the round trip
        raise MalformedName(f"non-canonical base64url segment: {text!r}")
    return raw


def encode_filename(original_name: str, token: FileToken) -> str:
    return f"{original_name}.{b64url(token.payload())}{SUFFIX}"


def decode_filename(infected_name: str) -> tuple[str, FileToken]:
    if not infected_name.endswith(SUFFIX) or infected_name.endswith(KEY_SUFFIX):
        raise MalformedName(f"not an infected file name: {infected_name!r}")
    stem = infected_name[: -len(SUFFIX)]
    original, sep, segment = stem.rpartition(".")
    if not sep or not original or len(segment) != TOKEN_CHARS:
        raise MalformedName(f"missing {TOKEN_CHARS}-char token in {infected_name!r}")
    raw = b64url_decode(segment)
    r1, r2 = struct.unpack("<QQ", raw[16:32])
    return original, FileToken(raw[:16], r1, r2)


def key_file_name(key_tag: bytes) -> str:
    if len(key_tag) != 16:
        raise ValueError("key_tag must be 16 bytes")
    return b64url(key_tag) + KEY_SUFFIX

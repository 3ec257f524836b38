import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hivekey.layout import (
    KEY_SIZE,
    KS1_LEN,
    KS2_LEN,
    FileToken,
    MalformedName,
    b64url,
    b64url_decode,
    block_count,
    compute_nbs,
    decode_filename,
    encode_filename,
    encrypted_spans,
    key_file_name,
    keystream_offsets,
)
from oracles import b64url_encode, encrypted_mask, nbs_algorithm1

EXAMPLE_NAME = "test.jpg.NjamyiabJDdT_5Kcg01TyiZ5ZpgHWzQutt1y7IKTGRQ.hive"
EXAMPLE_TAG = bytes.fromhex("3636a6ca269b243753ff929c834d53ca")
EXAMPLE_R1 = 0x2E345B0798667926
EXAMPLE_R2 = 0x14199382EC72DDB6

BOUNDARIES = [0x1000, 0x20000, 0x100000, 0xA00000, 0x6400000, 0x40000000]

u64 = st.integers(min_value=0, max_value=(1 << 64) - 1)
tags = st.binary(min_size=16, max_size=16)


# --- block size -------------------------------------------------------------


def test_nbs_matches_pseudocode_at_bracket_edges():
    sizes = [b + d for b in BOUNDARIES for d in range(-3, 4)] + [0, 1, 0x1001, 0x2000, 0x2001, 0x3000]
    for fs in sizes:
        assert compute_nbs(fs) == nbs_algorithm1(fs), hex(fs)


@given(st.integers(min_value=0, max_value=1 << 36))
def test_nbs_matches_pseudocode(fs):
    assert compute_nbs(fs) == nbs_algorithm1(fs)


def test_nbs_of_worked_example():
    # 0x667926 bytes: T = 327, NBS = (0x667926 - 327 * 0x1000) // 326
    assert compute_nbs(0x667926) == 0x406B


def test_small_files_are_fully_encrypted():
    for fs in (1, 0x400, 0xFFF, 0x1000):
        layout = encrypted_spans(fs)
        assert layout.spans == ((0, fs),)
        assert layout.nbs == 0
    assert encrypted_spans(0).spans == ()


def test_negative_size_rejected():
    with pytest.raises(ValueError):
        compute_nbs(-1)
    with pytest.raises(ValueError):
        encrypted_spans(-1)


# --- span map ---------------------------------------------------------------


def _mask(layout):
    m = np.zeros(layout.file_size, dtype=bool)
    for off, length in layout.spans:
        m[off : off + length] = True
    return m


@pytest.mark.parametrize("fs", [0x1001, 0x1FFF, 0x2000, 0x3001, 0x1F000, 0x20000, 0x20FFF, 0x54321, 0x100000, 0x133337, 0x667926])
def test_spans_match_block_walk(fs):
    assert np.array_equal(_mask(encrypted_spans(fs)), encrypted_mask(fs))


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=1, max_value=0x600000))
def test_spans_match_block_walk_random(fs):
    assert np.array_equal(_mask(encrypted_spans(fs)), encrypted_mask(fs))


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=1, max_value=1 << 33))
def test_span_invariants(fs):
    layout = encrypted_spans(fs)
    offs, lens = layout.offsets, layout.lengths
    assert len(offs) >= 1
    assert (lens > 0).all() and (lens <= 0x1000).all()
    assert offs[0] == 0
    assert (offs[1:] >= offs[:-1] + lens[:-1]).all(), "spans overlap or are unsorted"
    assert offs[-1] + lens[-1] == fs, "the last byte of a file is always encrypted"
    assert layout.encrypted_bytes == int(lens.sum())


def test_positions_and_contains():
    layout = encrypted_spans(0x54321)
    pos = layout.positions()
    assert np.array_equal(pos, np.flatnonzero(encrypted_mask(0x54321)))
    chunks = list(layout.chunks(max_bytes=0x3000))
    assert np.array_equal(np.concatenate([layout.positions(a, b) for a, b in chunks]), pos)
    mask = encrypted_mask(0x54321)
    for p in range(0, 0x54321, 97):
        assert layout.contains(p) == bool(mask[p])


def test_block_count_brackets_small_sample():
    ranges = [(0x1001, 0x20000, 1, 31), (0x20000, 0x100000, 8, 75), (0x100000, 0xA00000, 50, 510)]
    rng = np.random.default_rng(5)
    for lo, hi, a, b in ranges:
        counts = [block_count(int(s)) for s in rng.integers(lo, hi, 500)]
        assert a <= min(counts) and max(counts) <= b


# --- keystream offsets and filenames -----------------------------------------


def test_worked_example_decodes():
    original, token = decode_filename(EXAMPLE_NAME)
    assert original == "test.jpg"
    assert token.key_tag == EXAMPLE_TAG
    assert (token.r1, token.r2) == (EXAMPLE_R1, EXAMPLE_R2)
    offs = token.offsets
    assert (offs.sp1, offs.sp2) == (0x667926, 0x24F5B6)


def test_worked_example_encodes():
    token = FileToken(EXAMPLE_TAG, EXAMPLE_R1, EXAMPLE_R2)
    assert encode_filename("test.jpg", token) == EXAMPLE_NAME
    # payload is tag || r1 || r2, both randoms little endian
    assert token.payload() == EXAMPLE_TAG + struct.pack("<QQ", EXAMPLE_R1, EXAMPLE_R2)


def test_key_file_name():
    assert key_file_name(EXAMPLE_TAG) == "NjamyiabJDdT_5Kcg01Tyg.key.hive"
    assert b64url_decode(key_file_name(EXAMPLE_TAG)[:22]) == EXAMPLE_TAG


@given(st.binary(max_size=64))
def test_b64url_matches_bit_oracle(data):
    assert b64url(data) == b64url_encode(data)
    if data:
        assert b64url_decode(b64url(data)) == data


@given(st.text(alphabet=st.characters(blacklist_characters="/\\\x00"), min_size=1, max_size=40), tags, u64, u64)
def test_filename_round_trip(name, tag, r1, r2):
    token = FileToken(tag, r1, r2)
    infected = encode_filename(name, token)
    assert decode_filename(infected) == (name, token)


@given(u64, u64)
def test_offsets_in_range(r1, r2):
    offs = keystream_offsets(r1, r2)
    assert 0 <= offs.sp1 and offs.sp1 + KS1_LEN <= KEY_SIZE
    assert 0 <= offs.sp2 and offs.sp2 + KS2_LEN <= KEY_SIZE


def test_randoms_are_unsigned():
    # top bit set: a signed reading would give a different remainder
    r = 0xFFFFFFFFFFFFFFFF
    assert keystream_offsets(r, r).sp1 == r % 0x900000


@pytest.mark.parametrize(
    "name",
    [
        "test.jpg.hive",
        "test.jpg.NjamyiabJDdT_5Kcg01TyiZ5ZpgHWzQutt1y7IKTGR.hive",  # 42 chars
        "test.jpg.NjamyiabJDdT_5Kcg01TyiZ5ZpgHWzQutt1y7IKTGRQQ.hive",  # 44 chars
        "test.jpg.NjamyiabJDdT_5Kcg01TyiZ5ZpgHWzQutt1y7IKTG+Q.hive",  # '+' not url-safe
        "test.jpg.NjamyiabJDdT_5Kcg01TyiZ5ZpgHWzQutt1y7IKTGRR.hive",  # stray trailing bits
        "test.jpg.NjamyiabJDdT_5Kcg01TyiZ5ZpgHWzQutt1y7IKTGRQ.txt",
        ".NjamyiabJDdT_5Kcg01TyiZ5ZpgHWzQutt1y7IKTGRQ.hive",
        "NjamyiabJDdT_5Kcg01TyiZ5ZpgHWzQutt1y7IKTGRQ.hive",
        "NjamyiabJDdT_5Kcg01Tyg.key.hive",
    ],
)
def test_malformed_names(name):
    with pytest.raises(MalformedName):
        decode_filename(name)


def test_token_validation():
    with pytest.raises(ValueError):
        FileToken(b"short", 0, 0)
    with pytest.raises(ValueError):
        FileToken(EXAMPLE_TAG, -1, 0)
    with pytest.raises(ValueError):
        FileToken(EXAMPLE_TAG, 0, 1 << 64)

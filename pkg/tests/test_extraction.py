import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hivekey.extraction import (
    RECORD,
    ConflictingDuplicate,
    Equation,
    PairVerdict,
    SignatureEntry,
    SignatureOutsideEncryptedRegion,
    eks_coverage,
    extract_equations_pair,
    extract_equations_signature,
    load_signature_db,
    parse_signature_db,
    read_equations,
    verify_pair,
    write_equations,
)
from hivekey.layout import KS1_LEN, FileToken
from hivekey.simulator import encrypt_file
from oracles import encrypted_mask

TAG = bytes(range(16))


def _pair(key, size, r1=0x1111222233334444, r2=0x5555666677778888, seed=0):
    data = np.random.default_rng(seed).bytes(size)
    return data, encrypt_file(data, key, r1, r2), FileToken(TAG, r1, r2)


def _coverage_oracle(fs):
    """Distinct Keystream1 / Keystream2 indices from a per-byte bitmap."""
    pos = np.flatnonzero(encrypted_mask(fs))
    ks1 = np.zeros(KS1_LEN, dtype=bool)
    ks1[pos % KS1_LEN] = True
    ks2 = np.zeros(0x400, dtype=bool)
    ks2[pos % 0x400] = True
    return int(ks1.sum()), int(ks2.sum())


# --- equations ----------------------------------------------------------------


@pytest.mark.parametrize("size", [1, 0x1000, 0x3456, 0x54321, 0x180000, 0x8FC000])
def test_pair_equations_hold_on_true_key(master_key, size):
    data, infected, token = _pair(master_key, size)
    batch = extract_equations_pair(data, infected, token, "f")
    a, b, v = batch.a.astype(np.int64), batch.b.astype(np.int64), batch.value
    assert np.array_equal(master_key[a] ^ master_key[b], v)
    # one equation per distinct Keystream1 index
    assert len(batch) == _coverage_oracle(size)[0]
    assert len(np.unique(batch.index)) == len(batch)


def test_pair_accepts_paths(tmp_path, master_key):
    data, infected, token = _pair(master_key, 0x22222)
    (tmp_path / "o").write_bytes(data)
    (tmp_path / "i").write_bytes(infected)
    from_paths = extract_equations_pair(tmp_path / "o", tmp_path / "i", token)
    from_bytes = extract_equations_pair(data, infected, token)
    assert np.array_equal(from_paths.index, from_bytes.index)
    assert np.array_equal(from_paths.value, from_bytes.value)


def test_equation_sets(master_key):
    data, infected, token = _pair(master_key, 0x2000)
    eqs = extract_equations_pair(data, infected, token).equations()
    assert len(eqs) == 0x2000
    assert all(int(master_key[e.a]) ^ int(master_key[e.b]) == e.v for e in eqs)


def test_equation_range_checks():
    Equation(0, 0xA00000 - 1, 255)
    for bad in ((-1, 0, 0), (0, 0xA00000, 0), (0, 0, 256)):
        with pytest.raises(ValueError):
            Equation(*bad)


def test_conflicting_duplicate(master_key):
    # 0x8FC000 reuses Keystream1 indices: tamper with one reused position
    size = 0x8FC000
    data, infected, token = _pair(master_key, size)
    pos = np.flatnonzero(encrypted_mask(size))
    idx = pos % KS1_LEN
    _, first = np.unique(idx, return_index=True)
    repeat = np.setdiff1d(np.arange(len(pos)), first)[0]
    bad = bytearray(infected)
    bad[pos[repeat]] ^= 0x5A
    with pytest.raises(ConflictingDuplicate):
        extract_equations_pair(data, bytes(bad), token, "tampered")


def test_size_mismatch_rejected(master_key):
    data, infected, token = _pair(master_key, 0x3000)
    with pytest.raises(ValueError):
        extract_equations_pair(data, infected[:-1], token)


# --- pair verification --------------------------------------------------------------


def test_verify_pair(master_key):
    data, infected, _ = _pair(master_key, 0x54321)
    assert verify_pair(data, infected) is PairVerdict.MATCH
    clear = np.flatnonzero(~encrypted_mask(0x54321))
    enc = np.flatnonzero(encrypted_mask(0x54321))
    touched = bytearray(infected)
    touched[enc[10]] ^= 1
    # encrypted bytes carry no evidence, the gaps do
    assert verify_pair(data, bytes(touched)) is PairVerdict.MATCH
    touched[clear[10]] ^= 1
    assert verify_pair(data, bytes(touched)) is PairVerdict.MISMATCH
    assert verify_pair(data, infected + b"x") is PairVerdict.MISMATCH
    other = np.random.default_rng(1).bytes(0x54321)
    assert verify_pair(other, infected) is PairVerdict.MISMATCH


def test_verify_pair_fully_encrypted_file_matches_anything_same_size(master_key):
    data, infected, _ = _pair(master_key, 0x800)
    assert verify_pair(b"\0" * 0x800, infected) is PairVerdict.MATCH


# --- coverage ------------------------------------------------------------------------------


@pytest.mark.parametrize("size", [0x1000, 0x1001, 0x20000, 0x100000, 0x1FF000, 0x667926, 0x8FB000, 0x8FC000, 0x2817000])
def test_coverage_matches_bitmap(size):
    assert eks_coverage(size) == _coverage_oracle(size)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=0x3000000))
def test_coverage_matches_bitmap_random(size):
    assert eks_coverage(size) == _coverage_oracle(size)


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=1 << 32))
def test_coverage_bounds(size):
    ks1, ks2 = eks_coverage(size)
    assert 0 <= ks1 <= KS1_LEN and 0 <= ks2 <= 0x400
    assert ks1 <= size


def test_coverage_is_not_monotone():
    # larger files can expose less keystream than smaller ones
    sizes = range(0x100000, 0x3000000, 0x10000)
    cov = [eks_coverage(s)[0] for s in sizes]
    assert any(b < a for a, b in zip(cov, cov[1:]))


# --- signatures ------------------------------------------------------------------------------


def test_signature_db_parsing():
    db = parse_signature_db("# comment\npdf, 255044462d, 0\n\nPNG,89504e47,0x0  # trailing\n")
    assert db["pdf"] == SignatureEntry("pdf", b"%PDF-", 0)
    assert db["png"].magic == b"\x89PNG"
    with pytest.raises(ValueError):
        parse_signature_db("pdf,zz,0\n")
    with pytest.raises(ValueError):
        parse_signature_db("pdf,,0\n")
    with pytest.raises(ValueError):
        parse_signature_db("pdf,25,-1\n")
    default = load_signature_db()
    assert {"pdf", "zip", "png", "jpg", "hwp", "docx"} <= set(default)
    assert load_signature_db("default") == default


def test_signature_equations_hold(master_key):
    sig = load_signature_db()["png"]
    data = sig.magic + np.random.default_rng(2).bytes(0x30000)
    r1, r2 = 987654321, 123456789
    infected = encrypt_file(data, master_key, r1, r2)
    batch = extract_equations_signature(infected, FileToken(TAG, r1, r2), sig, "sig")
    assert len(batch) == len(sig.magic)
    a, b = batch.a.astype(np.int64), batch.b.astype(np.int64)
    assert np.array_equal(master_key[a] ^ master_key[b], batch.value)


def test_signature_outside_encrypted_region(master_key):
    size = 0x200000
    gap = int(np.flatnonzero(~encrypted_mask(size))[0])
    sig = SignatureEntry("odd", b"\x01\x02\x03", gap - 1)
    infected = encrypt_file(bytes(size), master_key, 1, 2)
    with pytest.raises(SignatureOutsideEncryptedRegion):
        extract_equations_signature(infected, FileToken(TAG, 1, 2), sig)
    with pytest.raises(SignatureOutsideEncryptedRegion):
        extract_equations_signature(b"\x01", FileToken(TAG, 1, 2), SignatureEntry("x", b"\x01\x02"))


# --- HEQS files ------------------------------------------------------------------------------


def test_heqs_round_trip(tmp_path, master_key):
    batches = [extract_equations_pair(*_pair(master_key, s, seed=s)) for s in (0x1000, 0x23456)]
    n = write_equations(tmp_path / "e.heqs", batches)
    recs = read_equations(tmp_path / "e.heqs")
    assert n == len(recs) == sum(len(b) for b in batches)
    assert RECORD.itemsize == 9
    raw = (tmp_path / "e.heqs").read_bytes()
    assert raw[:4] == b"HEQS" and struct.unpack("<IQ", raw[4:16]) == (1, n)
    first = batches[0]
    assert recs["a"][0] == first.a[0] and recs["b"][0] == first.b[0] and recs["v"][0] == first.value[0]


def test_heqs_rejects_bad_files(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        read_equations(tmp_path / "bad")
    (tmp_path / "short").write_bytes(b"HEQS" + struct.pack("<IQ", 1, 3) + bytes(9))
    with pytest.raises(ValueError):
        read_equations(tmp_path / "short")
    (tmp_path / "ver").write_bytes(b"HEQS" + struct.pack("<IQ", 2, 0))
    with pytest.raises(ValueError):
        read_equations(tmp_path / "ver")
    rec = np.zeros(1, dtype=RECORD)
    rec["a"] = 0xA00000
    (tmp_path / "range").write_bytes(b"HEQS" + struct.pack("<IQ", 1, 1) + rec.tobytes())
    with pytest.raises(ValueError):
        read_equations(tmp_path / "range")

import json

import numpy as np
import pytest

from hivekey.decryptor import Status, decrypt_corpus, decrypt_file, file_resolution
from hivekey.extraction import extract_equations_pair
from hivekey.harness import fully_resolved, mask_resolved, truth_resolved
from hivekey.layout import FileToken, encode_filename, encrypted_spans
from hivekey.simulator import encrypt_file, generate_master_key, wrap_master_key
from hivekey.solver import ResolvedKey, anchor_largest, build_graph, load_bitmap

R1, R2 = 0x0BADC0DE12345678, 0x0FEEDFACE8765432


@pytest.fixture(scope="module")
def key():
    return generate_master_key(77)


def test_full_key_decrypts(key):
    data = np.random.default_rng(0).bytes(0x345678)
    infected = encrypt_file(data, key, R1, R2)
    plain, mask = decrypt_file(infected, FileToken(bytes(16), R1, R2), truth_resolved(key))
    assert plain == data and mask.all()


def test_graph_alone_decrypts_its_sources(key):
    # relations are enough: no anchor needed to decrypt the files that built the graph
    data = np.random.default_rng(1).bytes(0x200000)
    tok = FileToken(bytes(16), R1, R2)
    infected = encrypt_file(data, key, R1, R2)
    graph = build_graph([extract_equations_pair(data, infected, tok)])
    plain, mask = decrypt_file(infected, tok, graph)
    assert plain == data and mask.all()


def test_partial_key_mask(key):
    data = np.random.default_rng(2).bytes(0x200000)
    tok = FileToken(bytes(16), R1, R2)
    infected = encrypt_file(data, key, R1, R2)
    partial = truth_resolved(key)
    sp1 = tok.offsets.sp1
    partial.resolved[sp1 + 0x100 : sp1 + 0x180] = False
    plain, mask = decrypt_file(infected, tok, partial)
    got, want = np.frombuffer(plain, np.uint8), np.frombuffer(data, np.uint8)
    assert not mask.all()
    assert np.array_equal(got[mask], want[mask])
    done, total = file_resolution(len(data), tok, partial)
    assert total - done == int((~mask).sum())
    assert done < total


def test_resolution_routes_agree(key):
    # prefix-sum check against the per-byte resolution count
    rng = np.random.default_rng(3)
    full = truth_resolved(key)
    sizes = [1, 0x800, 0x1000, 0x5000, 0x40000, 0x180000, 0x900000, 0x2817000]
    for trial in range(6):
        partial = mask_resolved(full, 0.97, trial, model="windows" if trial % 2 else "holes", hole=0x20000)
        prefix = np.concatenate([[0], np.cumsum(partial.resolved, dtype=np.int64)])
        for size in sizes:
            tok = FileToken(bytes(16), int(rng.integers(0, 2**63)), int(rng.integers(0, 2**63)))
            done, total = file_resolution(size, tok, partial)
            assert fully_resolved(size, tok, prefix) == (done == total), (trial, hex(size))


def test_empty_file_is_full(key):
    plain, mask = decrypt_file(b"", FileToken(bytes(16), 1, 2), ResolvedKey.empty())
    assert plain == b"" and mask.all()
    assert file_resolution(0, FileToken(bytes(16), 1, 2), ResolvedKey.empty()) == (0, 0)


def _infect_tree(root, key, sizes, tag=None):
    _, real_tag = wrap_master_key(key)
    tag = tag or real_tag
    rng = np.random.default_rng(4)
    originals = {}
    for i, size in enumerate(sizes):
        data = rng.bytes(size)
        r1, r2 = (int(x) for x in rng.integers(0, 2**63, 2))
        sub = root / ("a" if i % 2 else "b")
        sub.mkdir(parents=True, exist_ok=True)
        (sub / encode_filename(f"f{i}.dat", FileToken(tag, r1, r2))).write_bytes(encrypt_file(data, key, r1, r2))
        originals[f"{sub.name}/f{i}.dat"] = (data, FileToken(tag, r1, r2))
    return real_tag, originals


def test_decrypt_corpus(tmp_path, key):
    root = tmp_path / "victim"
    tag, originals = _infect_tree(root, key, [0, 100, 0x5000, 0x123456])
    _infect_tree(root / "other", key, [0x3000], tag=b"\xff" * 16)
    (root / "keyfile.key.hive").write_bytes(b"x")
    report = decrypt_corpus(root, truth_resolved(key), tag, tmp_path / "out")
    assert len(report.files) == 4 and len(report.skipped) == 1
    assert report.full_rate == 1.0
    for rel, (data, _) in originals.items():
        assert (tmp_path / "out" / rel).read_bytes() == data
    # infected files are never modified or removed
    assert len(list(root.rglob("*.hive"))) == 6


def test_decrypt_corpus_partial_and_collisions(tmp_path, key):
    root = tmp_path / "victim"
    tag, originals = _infect_tree(root, key, [0x200000, 0x300])
    partial = truth_resolved(key)
    big = originals["b/f0.dat"][1]
    partial.resolved[big.offsets.sp1 + 5] = False
    (root / "b" / "f0.dat").write_bytes(b"already here")
    report = decrypt_corpus(root, partial, tag)
    by_name = {r.output.rsplit("/", 1)[-1]: r for r in report.files}
    rec = by_name["f0.dat.recovered"]
    assert rec.status is Status.PARTIAL and rec.bytes_decrypted < rec.bytes_total_encrypted
    assert (root / "b" / "f0.dat").read_bytes() == b"already here"
    mask = load_bitmap(rec.output + ".mask", 0x200000)
    assert int((~mask).sum()) == rec.bytes_total_encrypted - rec.bytes_decrypted
    assert by_name["f1.dat"].status is Status.FULL
    assert report.partial_rate == 0.5
    report.dump(tmp_path / "r.json")
    dumped = json.loads((tmp_path / "r.json").read_text())
    assert {f["status"] for f in dumped["files"]} == {"full", "partial"}


def test_failed_status_when_nothing_resolved(tmp_path, key):
    root = tmp_path / "victim"
    tag, _ = _infect_tree(root, key, [0x2000])
    report = decrypt_corpus(root, ResolvedKey.empty(), tag, tmp_path / "out")
    assert report.files[0].status is Status.FAILED


def test_recovered_key_decrypts_its_component(key):
    # anchoring the largest component with a wrong guess still decrypts
    data = np.random.default_rng(5).bytes(0x300000)
    tok = FileToken(bytes(16), R1, R2)
    infected = encrypt_file(data, key, R1, R2)
    graph = build_graph([extract_equations_pair(data, infected, tok)])
    resolved = ResolvedKey.empty()
    anchor_largest(graph, resolved, guess=0x99)
    plain, mask = decrypt_file(infected, tok, resolved)
    got, want = np.frombuffer(plain, np.uint8), np.frombuffer(data, np.uint8)
    assert np.array_equal(got[mask], want[mask])
    assert encrypted_spans(len(data)).encrypted_bytes > int((~mask).sum())

"""Seeded experiment pipelines: simulate, recover and decrypt in memory.

Rows of an experiment config are corpora (size distribution and file count);
each row runs once per seed. The in-memory pipeline calls the same functions
the on-disk commands use, it just never writes the corpus out.
"""

from __future__ import annotations

import configparser
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decryptor import Status, _status, decrypt_file, file_resolution
from .extraction import PairVerdict, extract_equations_pair, verify_pair
from .layout import KEY_SIZE, KS1_LEN, KS2_LEN, SP1_MOD, SP2_MOD, FileToken
from .simulator import (
    CorpusSpec,
    SizeClass,
    corpus_file_bytes,
    draw_randoms,
    encrypt_file,
    generate_master_key,
    sample_sizes,
    wrap_master_key,
)
from .solver import (
    KeyGraph,
    ResolvedKey,
    anchor_largest,
    components,
    recovery_rate,
    solve_with_exclusions,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ["size_class", "file_count", "seed", "recovery_rate", "full_decrypt_rate", "wall_time"]


@dataclass
class ExperimentRow:
    name: str
    classes: list[SizeClass]
    file_count: int
    target: float | None = None
    stratified: bool = False

    def corpus(self, seed: int) -> CorpusSpec:
        return CorpusSpec(self.file_count, self.classes, seed, stratified=self.stratified)


@dataclass
class ExperimentSpec:
    rows: list[ExperimentRow]
    seeds: list[int]

    def __post_init__(self):
        if not self.rows or not self.seeds:
            raise ValueError("an experiment needs at least one row and one seed")

    @classmethod
    def from_cfg(cls, path) -> "ExperimentSpec":
        """Read an INI config: [experiment] seeds, then one section per row.

        A row has either `size = 21K±5K` with `files = 500`, or
        `mix = 1K*9, 2K-127K*24, ...` where the counts are exact.
        `target` is the expected recovery rate in percent (optional).
        """
        cp = configparser.ConfigParser()
        if not cp.read(path, encoding="utf-8"):
            raise FileNotFoundError(path)
        seeds = [int(s) for s in cp.get("experiment", "seeds", fallback="1").split(",")]
        rows = []
        for name in cp.sections():
            if name == "experiment":
                continue
            sec = cp[name]
            target = sec.getfloat("target", fallback=None)
            target = target / 100 if target is not None else None
            if "mix" in sec:
                classes = []
                for term in sec["mix"].split(","):
                    size, count = term.rsplit("*", 1)
                    classes.append(SizeClass.parse(size, float(count)))
                count = int(sum(c.weight for c in classes))
                rows.append(ExperimentRow(name, classes, sec.getint("files", count), target, stratified=True))
            else:
                rows.append(ExperimentRow(name, [SizeClass.parse(sec["size"])], sec.getint("files"), target))
        return cls(rows, seeds)


@dataclass
class PipelineResult:
    row: str
    file_count: int
    seed: int
    recovery_rate: float
    full_decrypt_rate: float
    wall_time: float
    errors: int
    equations: int
    components: int
    excluded: list[str] = field(default_factory=list)
    failed: bool = False

    def csv_row(self) -> list:
        return [self.row, self.file_count, self.seed, f"{self.recovery_rate:.6f}", f"{self.full_decrypt_rate:.6f}", f"{self.wall_time:.2f}"]


def run_pipeline(spec: CorpusSpec, name: str = "", check_bytes: bool = False) -> tuple[PipelineResult, KeyGraph, ResolvedKey]:
    """simulate -> infect -> extract -> solve -> anchor -> decrypt, in memory.

    The seed of `spec` also seeds the master key and the per-file randoms.
    Full-decryption status uses the recovered key (largest component anchored
    from one ground-truth byte). With check_bytes every file is decrypted for
    real and compared with its original.
    """
    t0 = time.perf_counter()
    seed = spec.seed
    key = generate_master_key(seed)
    _, tag = wrap_master_key(key)
    sizes = sample_sizes(spec)
    randoms = draw_randoms(seed, len(sizes))
    tokens = [FileToken(tag, r1, r2) for r1, r2 in randoms]

    batches = []
    for i, (size, tok) in enumerate(zip(sizes, tokens)):
        data = corpus_file_bytes(spec, i, size)
        infected = encrypt_file(data, key, tok.r1, tok.r2)
        if verify_pair(data, infected) is not PairVerdict.MATCH:
            raise AssertionError(f"file {i}: infection touched plaintext gaps")
        batches.append(extract_equations_pair(data, infected, tok, source=f"file_{i:05d}"))
        del data, infected
    graph, excluded = solve_with_exclusions(batches)
    n_eq = sum(len(b) for b in batches)
    del batches

    resolved = ResolvedKey.empty()
    anchor_largest(graph, resolved, truth=key)
    rate = recovery_rate(resolved, key)
    stats = components(graph)

    full = 0
    for i, (size, tok) in enumerate(zip(sizes, tokens)):
        if check_bytes:
            data = corpus_file_bytes(spec, i, size)
            plain, mask = decrypt_file(encrypt_file(data, key, tok.r1, tok.r2), tok, resolved)
            if plain != data and mask.all():
                raise AssertionError(f"file {i}: resolved bytes decrypt wrongly")
            full += bool(mask.all())
        else:
            done, total = file_resolution(size, tok, resolved)
            full += _status(done, total) is Status.FULL
    result = PipelineResult(
        name,
        len(sizes),
        seed,
        rate.rate,
        full / len(sizes),
        time.perf_counter() - t0,
        rate.errors,
        n_eq,
        stats.count,
        excluded,
    )
    return result, graph, resolved


def run_experiment(spec: ExperimentSpec, csv_path=None, check_bytes: bool = False, key_dir=None) -> list[PipelineResult]:
    """Run every row once per seed.

    A failing row is flagged (logged, rates written as nan) and the run goes
    on. With key_dir, each recovered key is saved as `<row>_<seed>.hmk`.
    """
    results = []
    for row in spec.rows:
        for seed in spec.seeds:
            t0 = time.perf_counter()
            try:
                res, _, resolved = run_pipeline(row.corpus(seed), row.name, check_bytes)
            except Exception as exc:  # noqa: BLE001 - keep the sweep going
                log.error("row %s seed %d failed: %s", row.name, seed, exc)
                nan = float("nan")
                res = PipelineResult(row.name, row.file_count, seed, nan, nan, time.perf_counter() - t0, -1, 0, 0, failed=True)
                results.append(res)
                continue
            if key_dir is not None:
                Path(key_dir).mkdir(parents=True, exist_ok=True)
                resolved.save(Path(key_dir) / f"{_slug(row.name)}_{seed}.hmk")
            log.info("%s seed=%d rate=%.4f full=%.4f (%.1fs)", row.name, seed, res.recovery_rate, res.full_decrypt_rate, res.wall_time)
            results.append(res)
    if csv_path is not None:
        write_csv(results, csv_path)
    return results


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def write_csv(results: list[PipelineResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in results:
            w.writerow(r.csv_row())


def mean_rates(results: list[PipelineResult]) -> dict[str, tuple[float, float]]:
    """Per row: (mean recovery rate, mean full-decrypt rate)."""
    by_row: dict[str, list[PipelineResult]] = {}
    for r in results:
        if r.failed:
            continue
        by_row.setdefault(r.row, []).append(r)
    return {k: (float(np.mean([r.recovery_rate for r in v])), float(np.mean([r.full_decrypt_rate for r in v]))) for k, v in by_row.items()}


# --- decryption rate under a partially recovered key ------------------------


def _coverage_mask(target: float, rng, hole: int) -> np.ndarray:
    """Resolved offsets as the union of collected keystream windows.

    Each collected file contributes its Keystream1 window [sp1, sp1 + 1 MiB)
    and Keystream2 window [sp2, sp2 + 1 KiB) at random offsets; windows are
    added until `target` is reached, the last one trimmed. Offsets near both
    key ends are covered by few windows and tend to stay unresolved.
    """
    res = np.zeros(KEY_SIZE, dtype=bool)
    goal = int(round(target * KEY_SIZE))
    count = 0
    while count < goal:
        sp1 = int(rng.integers(0, SP1_MOD))
        sp2 = int(rng.integers(0, SP2_MOD))
        fresh = np.zeros(KEY_SIZE, dtype=bool)
        fresh[sp1 : sp1 + KS1_LEN] = True
        fresh[sp2 : sp2 + KS2_LEN] = True
        add = np.flatnonzero(fresh & ~res)[: goal - count]
        res[add] = True
        count += len(add)
    return res


def _hole_mask(target: float, rng, hole: int) -> np.ndarray:
    """Fully resolved key with random contiguous holes punched until `target`."""
    res = np.ones(KEY_SIZE, dtype=bool)
    goal = int(round(target * KEY_SIZE))
    count = KEY_SIZE
    while count > goal:
        start = int(rng.integers(0, KEY_SIZE - hole + 1))
        drop = np.flatnonzero(res[start : start + hole])[: count - goal] + start
        res[drop] = False
        count -= len(drop)
    return res


MASK_MODELS = {"windows": _coverage_mask, "holes": _hole_mask}


def mask_resolved(resolved: ResolvedKey, target: float, seed: int, model: str = "windows", hole: int = 0x100000) -> ResolvedKey:
    """Copy of `resolved` restricted to a `target` fraction of the key."""
    rng = np.random.default_rng([seed, 5])
    keep = MASK_MODELS[model](target, rng, hole) & resolved.resolved
    values = np.where(keep, resolved.values, 0).astype(np.uint8)
    return ResolvedKey(values, keep, list(resolved.anchors))


def truth_resolved(key) -> ResolvedKey:
    key = np.asarray(key, dtype=np.uint8)
    return ResolvedKey(key.copy(), np.ones(KEY_SIZE, dtype=bool))


def decryption_rates(
    spec: CorpusSpec,
    targets,
    mask_seeds=(0,),
    model: str = "windows",
    hole: int = 0x100000,
    check_bytes: int = 0,
) -> dict[float, float]:
    """Mean full-decryption rate of a corpus per resolved-key fraction.

    The fully solved key comes from the ground truth and is masked down to
    each target once per mask seed. The first `check_bytes` files are also
    decrypted byte by byte and checked against their originals.
    """
    key = generate_master_key(spec.seed)
    _, tag = wrap_master_key(key)
    sizes = sample_sizes(spec)
    tokens = [FileToken(tag, r1, r2) for r1, r2 in draw_randoms(spec.seed, len(sizes))]
    full_key = truth_resolved(key)
    rates = {}
    for target in targets:
        got_rates = [_decrypt_fraction(spec, sizes, tokens, key, mask_resolved(full_key, target, ms, model, hole), check_bytes) for ms in mask_seeds]
        rates[target] = float(np.mean(got_rates))
    return rates


def fully_resolved(size: int, token: FileToken, prefix: np.ndarray) -> bool:
    """True if every keystream byte the file needs is resolved.

    `prefix` is the cumulative count of resolved offsets (length KEY_SIZE+1),
    so each needed window is checked in O(1) instead of per byte.
    """
    from .extraction import ks1_intervals

    offs = token.offsets
    iv = ks1_intervals(size)
    if len(iv) == 0:
        return True
    lo, hi = iv[:, 0] + offs.sp1, iv[:, 1] + offs.sp1
    if not np.array_equal(prefix[hi] - prefix[lo], hi - lo):
        return False
    # files under 1 KiB touch only the first `size` Keystream2 indices
    ks2 = min(KS2_LEN, size)
    return bool(prefix[offs.sp2 + ks2] - prefix[offs.sp2] == ks2)


def _decrypt_fraction(spec, sizes, tokens, key, partial: ResolvedKey, check_bytes: int) -> float:
    prefix = np.concatenate([[0], np.cumsum(partial.resolved, dtype=np.int64)])
    full = 0
    for i, (size, tok) in enumerate(zip(sizes, tokens)):
        is_full = fully_resolved(size, tok, prefix)
        if i < check_bytes:
            data = corpus_file_bytes(spec, i, size)
            plain, mask = decrypt_file(encrypt_file(data, key, tok.r1, tok.r2), tok, partial)
            got = np.frombuffer(plain, dtype=np.uint8)
            orig = np.frombuffer(data, dtype=np.uint8)
            if not np.array_equal(got[mask], orig[mask]) or bool(mask.all()) != is_full:
                raise AssertionError(f"file {i}: decryption disagrees with resolution count")
        full += is_full
    return full / len(sizes)


def coverage_sweep(max_size: int, step: int):
    """Yield (file_size, ks1_bytes, ks2_bytes) for step, 2*step, ... max_size."""
    from .extraction import eks_coverage

    if step <= 0 or max_size <= 0:
        raise ValueError("max_size and step must be positive")
    for size in range(step, max_size + 1, step):
        ks1, ks2 = eks_coverage(size)
        yield size, ks1, ks2

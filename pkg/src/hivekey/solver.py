"""XOR relation solving over the master-key bytes.

Every equation says key[a] ^ key[b] == v. Connected offsets form components
whose bytes are fixed up to one free byte; anchoring any member resolves the
whole component. The graph is a union-find where each node stores the XOR
distance to its parent (x_i == x_parent ^ delta_i), with path compression and
union by size, so a full 10 MiB key and ~10^8 equations stay tractable.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from numba import njit

from .extraction import Equation, EquationBatch
from .layout import KEY_SIZE

log = logging.getLogger(__name__)


class Outcome(enum.Enum):
    MERGED = "merged"
    REDUNDANT = "redundant"
    CONTRADICTION = "contradiction"


class AnchorConflict(ValueError):
    pass


@njit(cache=True)
def _find(parent, delta, x):
    root = x
    acc = 0
    while parent[root] != root:
        acc ^= delta[root]
        root = parent[root]
    # second pass: point every node on the path at the root
    cur = x
    cur_acc = acc
    while cur != root:
        nxt = parent[cur]
        d = delta[cur]
        parent[cur] = root
        delta[cur] = cur_acc
        cur_acc ^= d
        cur = nxt
    return root, acc


@njit(cache=True)
def _union_all(parent, delta, size, a, b, v, conflicts, implied):
    merged = 0
    nconf = 0
    for k in range(a.shape[0]):
        ra, da = _find(parent, delta, a[k])
        rb, db = _find(parent, delta, b[k])
        want = v[k] ^ da ^ db
        if ra == rb:
            if want != 0:
                conflicts[nconf] = k
                implied[nconf] = da ^ db
                nconf += 1
        else:
            if size[ra] < size[rb]:
                ra, rb = rb, ra
            parent[rb] = ra
            delta[rb] = want
            size[ra] += size[rb]
            merged += 1
    return merged, nconf


@njit(cache=True)
def _flatten(parent, delta):
    for i in range(parent.shape[0]):
        _find(parent, delta, i)


@dataclass(frozen=True)
class Contradiction:
    equation: Equation
    source: str
    implied: int


@dataclass
class BatchResult:
    merged: int
    redundant: int
    contradictions: int


class KeyGraph:
    """Parity-weighted union-find over `n` byte variables.

    Single writer: mutate from one thread. Reads are safe to share once
    `freeze()` has been called and no writer is active.
    """

    def __init__(self, n: int = KEY_SIZE):
        self.n = n
        self.parent = np.arange(n, dtype=np.int32)
        self.delta = np.zeros(n, dtype=np.uint8)
        self.size = np.ones(n, dtype=np.int32)
        self.sources: list[str] = []
        self._conflicts: list[tuple[str, np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
        self._flat = True
        self.key_tag: bytes | None = None  # tag of the corpus the equations came from

    # -- mutation --

    def add_arrays(self, a, b, v, source: str = "") -> BatchResult:
        a = np.ascontiguousarray(a, dtype=np.int64)
        b = np.ascontiguousarray(b, dtype=np.int64)
        v = np.ascontiguousarray(v, dtype=np.uint8)
        if len(a) and (a.min() < 0 or b.min() < 0 or a.max() >= self.n or b.max() >= self.n):
            raise ValueError("equation offset out of range")
        conflicts = np.empty(len(a), dtype=np.int64)
        implied = np.empty(len(a), dtype=np.uint8)
        merged, nconf = _union_all(self.parent, self.delta, self.size, a, b, v, conflicts, implied)
        if nconf:
            idx = conflicts[:nconf]
            self._conflicts.append((source, a[idx], b[idx], v[idx], implied[:nconf].copy()))
        if merged:
            self._flat = False
        if source and (not self.sources or self.sources[-1] != source):
            self.sources.append(source)
        return BatchResult(merged, len(a) - merged - nconf, nconf)

    def add_batch(self, batch: EquationBatch) -> BatchResult:
        return self.add_arrays(batch.a, batch.b, batch.value, batch.source)

    def add_equation(self, eq: Equation, source: str = "") -> Outcome:
        res = self.add_arrays([eq.a], [eq.b], [eq.v], source)
        if res.merged:
            return Outcome.MERGED
        return Outcome.CONTRADICTION if res.contradictions else Outcome.REDUNDANT

    # -- queries --

    def find(self, x: int) -> tuple[int, int]:
        root, acc = _find(self.parent, self.delta, x)
        return int(root), int(acc)

    def relation(self, a: int, b: int) -> int | None:
        """key[a] ^ key[b] if a and b are connected, else None."""
        ra, da = self.find(a)
        rb, db = self.find(b)
        return da ^ db if ra == rb else None

    def freeze(self) -> "KeyGraph":
        """Compress every path so parent[] holds roots and delta[] root distances."""
        if not self._flat:
            _flatten(self.parent, self.delta)
            self._flat = True
        return self

    def relations(self, a, b) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised relation(): (values, known mask) for offset arrays."""
        self.freeze()
        known = self.parent[a] == self.parent[b]
        vals = self.delta[a] ^ self.delta[b]
        return np.where(known, vals, 0).astype(np.uint8), known

    def members(self, offset: int) -> np.ndarray:
        self.freeze()
        return np.flatnonzero(self.parent == self.parent[offset])

    @property
    def contradictions(self) -> list[Contradiction]:
        out = []
        for source, a, b, v, implied in self._conflicts:
            out.extend(Contradiction(Equation(int(x), int(y), int(z)), source, int(w)) for x, y, z, w in zip(a, b, v, implied))
        return out

    @property
    def contradiction_count(self) -> int:
        return sum(len(c[1]) for c in self._conflicts)

    def blame(self) -> Counter:
        """Contradiction counts per source of the rejected (last) equation."""
        counts: Counter = Counter()
        for source, a, *_ in self._conflicts:
            counts[source] += len(a)
        return counts

    def component_sizes(self) -> dict[int, int]:
        self.freeze()
        roots = np.flatnonzero(self.parent == np.arange(self.n))
        return dict(zip(roots.tolist(), self.size[roots].tolist()))

    # -- persistence --

    def save(self, path) -> None:
        self.freeze()
        with open(path, "wb") as fh:
            extra = {"key_tag": np.frombuffer(self.key_tag, dtype=np.uint8)} if self.key_tag else {}
            np.savez(fh, parent=self.parent, delta=self.delta, size=self.size, **extra)

    @classmethod
    def load(cls, path) -> "KeyGraph":
        with np.load(path) as z:
            g = cls(len(z["parent"]))
            g.parent[:] = z["parent"]
            g.delta[:] = z["delta"]
            g.size[:] = z["size"]
            if "key_tag" in z:
                g.key_tag = z["key_tag"].tobytes()
        g._flat = False
        return g.freeze()


def build_graph(batches: Iterable[EquationBatch], n: int = KEY_SIZE) -> KeyGraph:
    g = KeyGraph(n)
    for batch in batches:
        g.add_batch(batch)
    return g


def exclude_source(batches: Iterable[EquationBatch], bad_source: str, n: int = KEY_SIZE) -> KeyGraph:
    """Rebuild the graph without the equations of `bad_source`."""
    return build_graph((b for b in batches if b.source != bad_source), n)


def solve_with_exclusions(batches: list[EquationBatch], n: int = KEY_SIZE, max_rounds: int = 50):
    """Build a contradiction-free graph, excluding blamed sources greedily.

    Blame is the source of the equation rejected at insertion. It is summed
    over a forward and a reverse insertion order, so a wrong file is blamed
    whether it lands before or after the files it disagrees with.
    Returns (graph, excluded sources in exclusion order).
    """
    excluded: list[str] = []
    active = list(batches)
    for _ in range(max_rounds):
        graph = build_graph(active, n)
        if not graph.contradiction_count:
            return graph, excluded
        blame = graph.blame() + build_graph(reversed(active), n).blame()
        worst = max(blame.items(), key=lambda kv: (kv[1], kv[0]))[0]
        log.info("excluding %s (%d contradictions blamed)", worst, blame[worst])
        excluded.append(worst)
        active = [b for b in active if b.source != worst]
    raise RuntimeError(f"still contradictory after excluding {len(excluded)} sources")


# --- component census -----------------------------------------------------


@dataclass
class ComponentStats:
    count: int  # components with at least two members
    sizes: list[int]  # their sizes, descending
    singletons: int
    largest: int
    largest_root: int
    total: int

    @property
    def largest_fraction(self) -> float:
        return self.largest / self.total

    @property
    def connected_offsets(self) -> int:
        return int(sum(self.sizes))


def components(graph: KeyGraph) -> ComponentStats:
    graph.freeze()
    roots = np.flatnonzero(graph.parent == np.arange(graph.n))
    sizes = graph.size[roots]
    # ties go to the lowest root, argmax returns the first maximum
    k = int(np.argmax(sizes))
    multi = np.sort(sizes[sizes > 1])[::-1]
    return ComponentStats(len(multi), multi.tolist(), len(roots) - len(multi), int(sizes[k]), int(roots[k]), graph.n)


# --- resolution -----------------------------------------------------------


@dataclass(frozen=True)
class Anchor:
    offset: int
    value: int
    provenance: str


@dataclass
class ResolvedKey:
    values: np.ndarray
    resolved: np.ndarray
    anchors: list[Anchor] = field(default_factory=list)
    # offsets assigned by the trial currently under validation (chaining only)
    trial: np.ndarray | None = None

    @classmethod
    def empty(cls, n: int = KEY_SIZE) -> "ResolvedKey":
        return cls(np.zeros(n, dtype=np.uint8), np.zeros(n, dtype=bool))

    @property
    def count(self) -> int:
        return int(self.resolved.sum())

    @property
    def rate(self) -> float:
        return self.count / len(self.values)

    def relations(self, a, b) -> tuple[np.ndarray, np.ndarray]:
        known = self.resolved[a] & self.resolved[b]
        vals = self.values[a] ^ self.values[b]
        return np.where(known, vals, 0).astype(np.uint8), known

    def save(self, path) -> None:
        """Write `<path>` (raw key, unresolved bytes zero) and `<path>.map`."""
        path = Path(path)
        np.where(self.resolved, self.values, 0).astype(np.uint8).tofile(path)
        save_bitmap(self.resolved, Path(str(path) + ".map"))

    @classmethod
    def load(cls, path) -> "ResolvedKey":
        path = Path(path)
        values = np.fromfile(path, dtype=np.uint8)
        resolved = load_bitmap(Path(str(path) + ".map"), len(values))
        return cls(values, resolved)


def save_bitmap(mask: np.ndarray, path) -> None:
    np.packbits(mask.astype(bool), bitorder="little").tofile(path)


def load_bitmap(path, n: int) -> np.ndarray:
    bits = np.fromfile(path, dtype=np.uint8)
    if len(bits) != (n + 7) // 8:
        raise ValueError(f"{path}: bitmap has {len(bits)} bytes, expected {(n + 7) // 8}")
    return np.unpackbits(bits, bitorder="little", count=n).astype(bool)


def _assign(graph: KeyGraph, resolved: ResolvedKey, members: np.ndarray, offset: int, value: int) -> int:
    root_val = value ^ int(graph.delta[offset])
    vals = (graph.delta[members] ^ root_val).astype(np.uint8)
    had = resolved.resolved[members]
    if (resolved.values[members][had] != vals[had]).any():
        raise AnchorConflict(f"anchor {offset:#x}={value:#04x} disagrees with resolved bytes")
    resolved.values[members] = vals
    resolved.resolved[members] = True
    return int((~had).sum())


def anchor(graph: KeyGraph, resolved: ResolvedKey, offset: int, value: int, provenance: str = "guess") -> int:
    """Fix key[offset] = value and resolve its whole component.

    Returns how many bytes became newly resolved.
    """
    if not 0 <= offset < graph.n:
        raise ValueError(f"offset {offset:#x} out of range")
    graph.freeze()
    newly = _assign(graph, resolved, graph.members(offset), offset, value & 0xFF)
    resolved.anchors.append(Anchor(offset, value & 0xFF, provenance))
    return newly


def anchor_largest(graph: KeyGraph, resolved: ResolvedKey, truth=None, guess: int = 0) -> int:
    """Anchor the largest component with one byte (from truth when given)."""
    stats = components(graph)
    off = stats.largest_root
    if truth is not None:
        return anchor(graph, resolved, off, int(truth[off]), "truth")
    return anchor(graph, resolved, off, guess, "guess")


def _component_groups(graph: KeyGraph, min_size: int):
    graph.freeze()
    order = np.argsort(graph.parent, kind="stable")
    roots_sorted = graph.parent[order]
    cuts = np.flatnonzero(np.diff(roots_sorted)) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts, [len(order)]])
    lens = stops - starts
    keep = np.flatnonzero(lens >= min_size)
    keep = keep[np.argsort(-lens[keep], kind="stable")]
    for k in keep:
        yield order[starts[k] : stops[k]]


@dataclass
class ChainReport:
    trials: int = 0
    chained: list[tuple[int, int]] = field(default_factory=list)  # (component offset, value of that offset)
    extended: int = 0
    ambiguous: list[int] = field(default_factory=list)
    rejected: list[int] = field(default_factory=list)

    @property
    def unanchored(self) -> list[int]:
        return self.ambiguous + self.rejected


Validator = Callable[[ResolvedKey], bool]


def chain_components(graph: KeyGraph, resolved: ResolvedKey, validator: Validator, min_size: int = 2, max_components: int | None = None) -> ChainReport:
    """Anchor further components by trying all 256 constants for each.

    Components are visited largest first. The validator sees `resolved` with
    the trial component filled in (offsets in `resolved.trial`); the storage
    is shared and only valid during the call. A component is kept only when
    exactly one constant passes.
    """
    if not resolved.resolved.any():
        raise ValueError("chaining needs at least one anchored component")
    report = ChainReport()
    done = 0
    for members in _component_groups(graph, min_size):
        had = resolved.resolved[members]
        if had.all():
            continue
        if had.any():
            # component grew after anchoring: extend from a resolved member
            off = int(members[np.argmax(had)])
            report.extended += _assign(graph, resolved, members, off, int(resolved.values[off]))
            continue
        if max_components is not None and done >= max_components:
            break
        done += 1
        base = members[0]
        rel = graph.delta[members] ^ graph.delta[base]
        accepted = []
        resolved.trial = members
        try:
            resolved.resolved[members] = True
            for c in range(256):
                resolved.values[members] = rel ^ c
                report.trials += 1
                if validator(resolved):
                    accepted.append(c)
        finally:
            resolved.resolved[members] = False
            resolved.values[members] = 0
            resolved.trial = None
        if len(accepted) == 1:
            _assign(graph, resolved, members, int(base), accepted[0])
            resolved.anchors.append(Anchor(int(base), accepted[0], "chained"))
            report.chained.append((int(base), accepted[0]))
        elif accepted:
            report.ambiguous.append(int(base))
        else:
            report.rejected.append(int(base))
    return report


def truth_validator(truth) -> Validator:
    truth = np.asarray(truth, dtype=np.uint8)

    def check(candidate: ResolvedKey) -> bool:
        t = candidate.trial
        return bool(np.array_equal(candidate.values[t], truth[t]))

    return check


def signature_validator(samples) -> Validator:
    """Validator from known plaintext bytes inside infected files.

    `samples` holds (a, b, cipher, plain) arrays: key offsets and the infected
    and expected bytes at positions covered by a known signature. A trial
    passes when every sample touching the trial component (with both offsets
    resolved) decrypts to the expected byte, and at least one does.
    """
    a, b, cipher, plain = (np.asarray(x) for x in samples)
    want = (cipher ^ plain).astype(np.uint8)
    order = np.argsort(np.concatenate([a, b]), kind="stable")
    ends = np.concatenate([a, b])[order]
    cache: dict = {"trial": None, "touch": None}

    def touching(trial: np.ndarray) -> np.ndarray:
        # samples with exactly one end inside the trial; relations internal
        # to the trial cancel the constant and cannot discriminate
        lo = np.searchsorted(ends, trial, side="left")
        hi = np.searchsorted(ends, trial, side="right")
        hits = np.concatenate([order[x:y] for x, y in zip(lo[hi > lo], hi[hi > lo])]) if (hi > lo).any() else np.empty(0, np.int64)
        hits = np.unique(hits % len(a))
        inside_a = np.isin(a[hits], trial)
        inside_b = np.isin(b[hits], trial)
        return hits[inside_a ^ inside_b]

    def check(candidate: ResolvedKey) -> bool:
        if cache["trial"] is not candidate.trial:
            cache["trial"], cache["touch"] = candidate.trial, touching(candidate.trial)
        idx = cache["touch"]
        idx = idx[candidate.resolved[a[idx]] & candidate.resolved[b[idx]]]
        if not len(idx):
            return False
        got = candidate.values[a[idx]] ^ candidate.values[b[idx]]
        return bool(np.array_equal(got, want[idx]))

    return check


@dataclass
class RecoveryRate:
    rate: float
    resolved: int
    errors: int | None


def recovery_rate(resolved: ResolvedKey, truth=None) -> RecoveryRate:
    count = resolved.count
    errors = None
    if truth is not None:
        truth = np.asarray(truth, dtype=np.uint8)
        errors = int((resolved.values[resolved.resolved] != truth[resolved.resolved]).sum())
    return RecoveryRate(count / len(resolved.values), count, errors)

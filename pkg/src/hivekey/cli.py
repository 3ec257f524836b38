"""hivekey command line: simulate | recover | decrypt | experiment | coverage | verify.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import harness
from .decryptor import decrypt_corpus
from .extraction import (
    ConflictingDuplicate,
    PairVerdict,
    SignatureOutsideEncryptedRegion,
    extract_equations_pair,
    extract_equations_signature,
    load_signature_db,
    verify_pair,
    write_equations,
)
from .layout import KS1_MASK, KS2_MASK, SUFFIX, MalformedName, decode_filename, encrypted_spans
from .simulator import (
    CorpusSpec,
    InfectionConfig,
    IoFailure,
    PartialInfection,
    SizeClass,
    generate_corpus,
    generate_master_key,
    infect_corpus,
    load_key,
)
from .solver import (
    KeyGraph,
    ResolvedKey,
    anchor_largest,
    chain_components,
    components,
    recovery_rate,
    signature_validator,
    solve_with_exclusions,
    truth_validator,
)

log = logging.getLogger("hivekey")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _size_class(text: str) -> SizeClass:
    """`21K±5K`, `2K-127K` or either followed by `*weight`."""
    body, _, weight = text.partition("*")
    try:
        return SizeClass.parse(body, float(weight) if weight else 1.0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _write_report(path, payload: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=1))


# --- simulate -------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.files <= 0:
        raise UsageError("--files must be positive")
    out = Path(args.out)
    originals, victim, keys = out / "originals", out / "victim", out / "keys"
    for d in (originals, victim):
        if d.exists() and any(d.iterdir()):
            raise UsageError(f"{d} is not empty")
    spec = CorpusSpec(
        args.files,
        args.size or [SizeClass.parse("1M±100K")],
        args.seed,
        content_model=args.content,
        extension=args.ext,
        stratified=args.stratified,
    )
    try:
        generate_corpus(spec, originals)
        shutil.copytree(originals, victim, dirs_exist_ok=True)
    except (IoFailure, OSError) as exc:
        log.error("cannot write corpus: %s", exc)
        return EXIT_FAIL
    key = generate_master_key(args.seed)
    config = InfectionConfig(victim, keys, privilege=args.privilege, jobs=args.jobs)
    try:
        report = infect_corpus(config, key, args.seed)
    except PartialInfection as exc:
        exc.report.dump(args.report or out / "infection_report.json")
        log.error("%d files failed to infect", len(exc.report.failures))
        return EXIT_FAIL
    except IoFailure as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    report_path = Path(args.report or out / "infection_report.json")
    report.dump(report_path)
    if args.emit_truth:
        # ground truth for experiments only
        key.tofile(out / "truth.key")
    print(f"infected {len(report.files)} files, key tag {report.key_tag.hex()}")
    print(f"report: {report_path}")
    return EXIT_OK


# --- recover --------------------------------------------------------------


def infected_files(root: Path):
    """(path, original name, token) for every decodable `.hive` file, sorted."""
    out = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if not name.endswith(SUFFIX):
                continue
            try:
                original, token = decode_filename(name)
            except MalformedName:
                continue
            out.append((Path(dirpath) / name, original, token))
    return out


def _original_index(root: Path) -> dict[str, list[Path]]:
    index: dict[str, list[Path]] = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            index.setdefault(name, []).append(Path(dirpath) / name)
    return index


def pair_candidates(infected_root: Path, originals_root: Path, items):
    """Match infected files to originals: same relative path first, then a unique name."""
    index = _original_index(originals_root)
    pairs, unpaired = [], []
    for path, original, token in items:
        same_place = originals_root / path.parent.relative_to(infected_root) / original
        if same_place.is_file():
            pairs.append((path, same_place, token))
        elif len(index.get(original, [])) == 1:
            pairs.append((path, index[original][0], token))
        else:
            unpaired.append((path, original, token))
    return pairs, unpaired


def _extension(name: str) -> str:
    return name.rpartition(".")[2].lower() if "." in name else ""


def signature_samples(items, db):
    """(a, b, cipher, plain) arrays for known magic bytes in infected files."""
    a, b, cipher, plain = [], [], [], []
    for path, original, token in items:
        sig = db.get(_extension(original))
        if sig is None:
            continue
        with open(path, "rb") as fh:
            fh.seek(sig.offset_in_file)
            got = fh.read(len(sig.magic))
        size = path.stat().st_size
        layout = encrypted_spans(size)
        pos = np.arange(sig.offset_in_file, sig.offset_in_file + len(got), dtype=np.int64)
        if len(got) < len(sig.magic) or not all(layout.contains(int(p)) for p in pos):
            continue
        offs = token.offsets
        a.append((pos & KS1_MASK) + offs.sp1)
        b.append((pos & KS2_MASK) + offs.sp2)
        cipher.append(np.frombuffer(got, dtype=np.uint8))
        plain.append(np.frombuffer(sig.magic, dtype=np.uint8))
    if not a:
        return None
    return tuple(np.concatenate(x) for x in (a, b, cipher, plain))


def cmd_recover(args) -> int:
    infected_root, originals_root = Path(args.infected_dir), Path(args.originals_dir)
    if not infected_root.is_dir() or not originals_root.is_dir():
        raise UsageError("infected_dir and originals_dir must be directories")
    items = infected_files(infected_root)
    tags = {tok.key_tag for _, _, tok in items}
    if args.key_tag:
        tag = bytes.fromhex(args.key_tag)
    elif len(tags) > 1:
        # several infections in one tree: take the most common tag
        tag = max(tags, key=lambda t: (sum(tok.key_tag == t for _, _, tok in items), t))
        log.warning("%d key tags present, using %s", len(tags), tag.hex())
    else:
        tag = next(iter(tags), None)
    items = [it for it in items if it[2].key_tag == tag]
    pairs, unpaired = pair_candidates(infected_root, originals_root, items)

    batches, rejected = [], []
    for inf, orig, token in pairs:
        source = str(orig)
        try:
            if verify_pair(orig, inf) is PairVerdict.MISMATCH:
                rejected.append(source)
                continue
            batches.append(extract_equations_pair(orig, inf, token, source))
        except ConflictingDuplicate as exc:
            log.warning("%s", exc)
            rejected.append(source)
    db = load_signature_db(args.signatures) if args.signatures else None
    if db is not None:
        for inf, original, token in unpaired:
            sig = db.get(_extension(original))
            if sig is None:
                continue
            try:
                batches.append(extract_equations_signature(inf, token, sig, f"signature:{inf}"))
            except SignatureOutsideEncryptedRegion:
                pass
    n_eq = sum(len(b) for b in batches)
    if n_eq == 0:
        log.error("no equations extracted (%d infected files, %d pairs)", len(items), len(pairs))
        return EXIT_FAIL
    if args.equations:
        write_equations(args.equations, batches)

    t0 = time.perf_counter()
    graph, excluded = solve_with_exclusions(batches)
    graph.key_tag = tag
    truth = load_key(args.truth) if args.truth else None
    resolved = ResolvedKey.empty()
    anchor_largest(graph, resolved, truth=truth, guess=args.anchor_value)

    chain = None
    validator = None
    if args.chain == "truth":
        if truth is None:
            raise UsageError("--chain truth needs --truth")
        validator = truth_validator(truth)
    elif args.chain == "signature":
        samples = signature_samples(items, db or load_signature_db())
        if samples is not None:
            validator = signature_validator(samples)
        else:
            log.warning("no signature samples for chaining")
    if validator is not None:
        chain = chain_components(graph, resolved, validator, max_components=args.max_chain)

    out = Path(args.out_key)
    out.parent.mkdir(parents=True, exist_ok=True)
    resolved.save(out)
    graph.save(out.with_suffix(".hkg"))
    stats = components(graph)
    rate = recovery_rate(resolved, truth)

    print(f"equations: {n_eq} from {len(batches)} sources ({len(rejected)} rejected pairs)")
    print(f"excluded sources: {', '.join(excluded) if excluded else 'none'}")
    print(f"components: {stats.count} (largest {stats.largest}, singletons {stats.singletons})")
    print(f"top component sizes: {stats.sizes[:10]}")
    if chain is not None:
        print(f"chained components: {len(chain.chained)}, ambiguous {len(chain.ambiguous)}, rejected {len(chain.rejected)}")
    print(f"recovery rate: {rate.rate * 100:.2f}% ({rate.resolved} bytes)")
    if rate.errors is not None:
        print(f"errors against truth: {rate.errors}")
    print(f"solve time: {time.perf_counter() - t0:.1f}s")
    _write_report(
        args.report,
        {
            "key_tag": tag.hex() if tag else None,
            "equations": n_eq,
            "sources": len(batches),
            "rejected_pairs": rejected,
            "excluded_sources": excluded,
            "components": stats.count,
            "component_sizes": stats.sizes[:100],
            "recovery_rate": rate.rate,
            "resolved": rate.resolved,
            "errors": rate.errors,
            "chained": len(chain.chained) if chain else 0,
            "key": str(out),
            "graph": str(out.with_suffix(".hkg")),
        },
    )
    return EXIT_OK


# --- decrypt --------------------------------------------------------------


def load_key_source(path: Path):
    """A KeyGraph (.hkg) or ResolvedKey (.hmk + .hmk.map) and its key tag."""
    if path.suffix == ".hkg":
        graph = KeyGraph.load(path)
        return graph, graph.key_tag
    key = ResolvedKey.load(path)
    graph_path = path.with_suffix(".hkg")
    tag = None
    if graph_path.exists():
        with np.load(graph_path) as z:
            if "key_tag" in z:
                tag = z["key_tag"].tobytes()
    return key, tag


def cmd_decrypt(args) -> int:
    infected_root = Path(args.infected_dir)
    if not infected_root.is_dir():
        raise UsageError(f"{infected_root} is not a directory")
    try:
        source, tag = load_key_source(Path(args.key))
    except (OSError, ValueError, KeyError) as exc:
        log.error("cannot read key %s: %s", args.key, exc)
        return EXIT_FAIL
    if args.key_tag:
        tag = bytes.fromhex(args.key_tag)
    report = decrypt_corpus(infected_root, source, tag, args.out_dir)
    report_path = args.report or Path(args.out_dir or infected_root) / "decryption_report.json"
    report.dump(report_path)
    print(f"files: {len(report.files)}, skipped {len(report.skipped)}")
    print(f"full decryption: {report.full_rate * 100:.2f}%, partial {report.partial_rate * 100:.2f}%")
    print(f"report: {report_path}")
    return EXIT_OK


# --- experiment / coverage / verify ---------------------------------------


def cmd_experiment(args) -> int:
    try:
        spec = harness.ExperimentSpec.from_cfg(args.config)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"bad experiment config: {exc}") from exc
    if args.seeds:
        spec.seeds = [int(s) for s in args.seeds.split(",")]
    results = harness.run_experiment(spec, args.out, check_bytes=args.check_bytes, key_dir=args.key_dir)
    if args.out is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(harness.CSV_COLUMNS)
        for r in results:
            w.writerow(r.csv_row())
    means = harness.mean_rates(results)
    for row in spec.rows:
        if row.name not in means:
            print(f"# {row.name}: all seeds failed", file=sys.stderr)
            continue
        rate, full = means[row.name]
        target = f" (target {row.target * 100:.2f}%)" if row.target is not None else ""
        print(f"# {row.name}: mean recovery {rate * 100:.2f}%{target}, full decryption {full * 100:.2f}%", file=sys.stderr)
    return EXIT_FAIL if any(r.failed for r in results) else EXIT_OK


def cmd_coverage(args) -> int:
    if args.step <= 0 or args.max_size <= 0:
        raise UsageError("--step and --max-size must be positive")
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    first_full = None
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file_size", "ks1_bytes", "ks2_bytes"])
        for size, ks1, ks2 in harness.coverage_sweep(args.max_size, args.step):
            w.writerow([size, ks1, ks2])
            if first_full is None and ks1 == KS1_MASK + 1:
                first_full = size
    finally:
        if fh is not sys.stdout:
            fh.close()
    msg = f"{first_full:#x}" if first_full is not None else "not reached"
    print(f"# first full Keystream1 coverage: {msg}", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        verdict = verify_pair(Path(args.original), Path(args.infected))
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    print(verdict.value)
    return EXIT_OK if verdict is PairVerdict.MATCH else EXIT_FAIL


# --- entry point ----------------------------------------------------------


def _int(text: str) -> int:
    return int(text, 0)


def _size(text: str) -> int:
    from .simulator import parse_size

    try:
        return _int(text)
    except ValueError:
        try:
            return parse_size(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_int, default=0, help="RNG seed (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker cap")
    common.add_argument("--signatures", metavar="DB", help="signature db file, or 'default'")
    common.add_argument("--report", metavar="PATH", help="write a JSON report here")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hivekey", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate, key and infect a corpus")
    s.add_argument("--files", type=int, required=True)
    s.add_argument("--size", type=_size_class, action="append", help="size class, repeatable (21K±5K, 2K-127K*24)")
    s.add_argument("--stratified", action="store_true", help="exact per-class counts from the weights")
    s.add_argument("--content", choices=["random", "signatured"], default="random")
    s.add_argument("--ext", default="bin")
    s.add_argument("--privilege", choices=["admin", "user"], default="admin")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--emit-truth", action="store_true", help="also write truth.key (experiments only)")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("recover", parents=[common], help="solve the master key from file pairs")
    r.add_argument("infected_dir")
    r.add_argument("originals_dir")
    r.add_argument("out_key", help="output .hmk path (.hmk.map and .hkg written alongside)")
    r.add_argument("--truth", help="ground-truth key, anchors and scores the result")
    r.add_argument("--anchor-value", type=_int, default=0, help="guessed value for the anchor byte without --truth")
    r.add_argument("--chain", choices=["none", "signature", "truth"], default="none")
    r.add_argument("--max-chain", type=int, default=None, help="cap on components tried by chaining")
    r.add_argument("--key-tag", help="hex tag of the infection to recover")
    r.add_argument("--equations", help="also dump equations in HEQS format")
    r.set_defaults(func=cmd_recover)

    d = sub.add_parser("decrypt", parents=[common], help="decrypt a corpus with a recovered key")
    d.add_argument("infected_dir")
    d.add_argument("key", help=".hmk or .hkg")
    d.add_argument("out_dir", nargs="?", help="output tree (default: next to the infected files)")
    d.add_argument("--key-tag", help="override the key tag filter (hex)")
    d.set_defaults(func=cmd_decrypt)

    e = sub.add_parser("experiment", parents=[common], help="run an experiment config")
    e.add_argument("config")
    e.add_argument("--out", help="CSV path (default stdout)")
    e.add_argument("--seeds", help="override the config seeds, comma separated")
    e.add_argument("--key-dir", help="save each recovered key as <row>_<seed>.hmk")
    e.add_argument("--check-bytes", action="store_true", help="decrypt every file for real")
    e.set_defaults(func=cmd_experiment)

    c = sub.add_parser("coverage", parents=[common], help="keystream coverage by file size")
    c.add_argument("--max-size", type=_size, default=0x3000000)
    c.add_argument("--step", type=_size, default=0x1000)
    c.add_argument("--out", help="CSV path (default stdout)")
    c.set_defaults(func=cmd_coverage)

    v = sub.add_parser("verify", parents=[common], help="check an original/infected pair")
    v.add_argument("original")
    v.add_argument("infected")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hivekey {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: build and update the report database, scan, evaluate, benchmark.

Exit codes: 0 success, 1 error, 2 partial failure (some inputs skipped or
per-item errors), 3 a scanned report was Malicious under --fail-on-detect,
64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from collections import Counter
from pathlib import Path
from typing import Sequence

from . import __version__
from .bench import BENCH_CANDIDATE_BUDGET, accuracy_curve, curve_csv, scaling_bench
from .detector import Decision, DetectorConfig, ItemError, Verdict, Vote, classify_batch
from .errors import BehavsigError, ConflictError, InvalidInputError
from .evaluation import FoldPlan, evaluate_attribution, evaluate_detection, load_records, size_stats
from .lsh import LshIndex, MinHashParams
from .reports import Label, LabelKind, ingest_report, read_manifest, report_id
from .store import ReportStore, StoredRecord, init_store, update_store
from .synth import SynthCorpusSpec, gen_corpus
from .vectorizer import IdfMode

log = logging.getLogger("behavsig")

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL, EXIT_DETECTED, EXIT_USAGE = 0, 1, 2, 3, 64

STORE_FILE = "store.jsonl"
INDEX_FILE = "index.jsonl"
MANIFEST_FILE = "manifest.json"
DB_ENV = "DYSIGN_DB"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _lsh_arg(text: str) -> MinHashParams:
    try:
        return MinHashParams.parse(text)
    except InvalidInputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _ladder_arg(text: str) -> list[int]:
    try:
        sizes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not sizes or sizes != sorted(set(sizes)):
        raise argparse.ArgumentTypeError("ladder must be strictly ascending")
    return sizes


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--db", default=os.environ.get(DB_ENV),
                   help=f"database directory (default: ${DB_ENV})")
    g.add_argument("--seed", type=int, default=None,
                   help="seed for minhash functions (default 1), fold shuffles (default 0) and synthetic corpora")
    g.add_argument("--threads", type=_pos_int, default=1, help="worker threads for ingestion and scanning (default 1)")
    g.add_argument("--idf-mode", choices=[m.value for m in IdfMode], default=IdfMode.LITERAL.value,
                   help="idf variant: literal ln(n/(1+df)), may be negative; floor0 clamps at 0 (default literal)")
    g.add_argument("--lsh", type=_lsh_arg, default=None, metavar="N,b,r",
                   help="minhash length, bands and rows per band; b*r must equal N (default 128,32,4)")
    g.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="stderr log level (default WARNING)")

    parser = _Parser(prog="behavsig", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"behavsig {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("build-db", parents=[common], help="create the database from labelled manifests",
                       description="Ingest malware and benign manifests into a new database directory.")
    p.add_argument("--malware", type=Path, help="manifest of malware reports (path<TAB>Malware<TAB>family)")
    p.add_argument("--benign", type=Path, help="manifest of benign reports (path alone or path<TAB>Benign<TAB>-)")
    p.add_argument("--force", action="store_true", help="overwrite an existing database")
    p.add_argument("--keep-raw", action="store_true", help="also copy raw report files to <db>/raw/<id>.txt")
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("update", parents=[common], help="add reports to an existing database",
                       description="Add one report, or poll a directory and add every new file.")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--report", type=Path, help="report file to add")
    src.add_argument("--watch", type=Path, metavar="DIR", help="directory to poll for new report files")
    p.add_argument("--label", required=True, choices=[LabelKind.BENIGN.value, LabelKind.MALWARE.value],
                   help="label of the added report(s)")
    p.add_argument("--family", help="malware family (required with --label Malware)")
    p.add_argument("--interval", type=float, default=2.0, help="seconds between polls with --watch (default 2)")
    p.add_argument("--max-polls", type=_nonneg_int, default=0,
                   help="stop --watch after this many polls; 0 polls until interrupted (default 0)")
    p.add_argument("--keep-raw", action="store_true", help="also copy added report files to <db>/raw/<id>.txt")
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("scan", parents=[common], help="classify reports against the database",
                       description="Print one verdict JSON line per report on stdout.")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--report", type=Path, help="report file to classify")
    src.add_argument("--batch", type=Path, metavar="MANIFEST", help="manifest of report files (labels ignored)")
    _detector_flags(p)
    p.add_argument("--exact-alg3", action="store_true",
                   help="rescore every stored report over the joint corpus instead of using the LSH index")
    p.add_argument("--fail-on-detect", action="store_true", help="exit 3 if any report is Malicious")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("evaluate", parents=[common], help="k-fold detection or attribution evaluation",
                       description="Write metrics, confusion-matrix and size CSVs for a labelled corpus.")
    p.add_argument("--mode", required=True, choices=["detection", "attribution"], help="what to evaluate")
    p.add_argument("--manifest", type=Path, help="labelled manifest (default: the database records)")
    p.add_argument("--folds", type=int, default=10, help="number of folds (default 10)")
    p.add_argument("--unstratified", action="store_true", help="do not stratify folds by class")
    p.add_argument("--out", type=Path, help="output directory (default: <db>/eval)")
    _detector_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", parents=[common], help="scalability benchmark on synthetic corpora",
                       description="Time tf-idf fingerprinting and LSH matching over a ladder of corpus sizes.")
    p.add_argument("--ladder", type=_ladder_arg, default=[1000, 2000, 4000],
                   help="ascending corpus sizes, comma separated (default 1000,2000,4000)")
    p.add_argument("--spec", type=Path, help="synthetic corpus spec JSON (default: built-in spec)")
    p.add_argument("--out", type=Path, help="scaling CSV path (default: <db>/scaling.csv)")
    p.add_argument("--repeats", type=_pos_int, default=3, help="timing repeats, best one kept (default 3)")
    p.add_argument("--max-candidates", type=_nonneg_int, default=BENCH_CANDIDATE_BUDGET,
                   help=f"re-ranking budget per query; 0 is unbounded (default {BENCH_CANDIDATE_BUDGET})")
    p.add_argument("--curve", type=Path, metavar="CSV",
                   help="also write ten-fold F1 per corpus size to this CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic labelled corpus",
                       description="Generate report files plus malware.tsv, benign.tsv and all.tsv manifests.")
    p.add_argument("--spec", type=Path, help="synthetic corpus spec JSON (default: built-in spec)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_gen_corpus, needs_db=False)
    return parser


def _detector_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=_pos_int, default=1, help="neighbours considered (default 1)")
    p.add_argument("--vote", choices=[v.value for v in Vote], default=Vote.NEAREST.value,
                   help="nearest: label of the top neighbour; majority: most common label among k (default nearest)")
    p.add_argument("--min-similarity", type=float, default=0.0,
                   help="answer Benign when the best cosine is below this (default 0)")
    p.add_argument("--max-candidates", type=_nonneg_int, default=0,
                   help="re-ranking budget per query; 0 is unbounded (default 0)")


# helpers ---------------------------------------------------------------


def _params(args: argparse.Namespace) -> MinHashParams:
    base = args.lsh or MinHashParams()
    seed = base.seed if args.seed is None else args.seed
    return MinHashParams(base.n_hashes, base.n_bands, base.rows_per_band, seed)


def _detector_config(args: argparse.Namespace, exact: bool = False) -> DetectorConfig:
    try:
        return DetectorConfig(
            k=args.k,
            vote=Vote(args.vote),
            min_similarity=args.min_similarity,
            idf_mode=IdfMode(args.idf_mode),
            exact_alg3=exact,
            max_candidates=args.max_candidates or None,
        )
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None


def _db(args: argparse.Namespace) -> Path:
    return Path(args.db)


def _write_db_manifest(db: Path, store: ReportStore, params: MinHashParams) -> None:
    counts = Counter(r.label.class_name for r in store)
    doc = {
        "created_at": store.created_at,
        "format_version": 1,
        "index_file": INDEX_FILE,
        "lsh": params.to_dict(),
        "record_count": len(store),
        "records_by_class": dict(sorted(counts.items())),
        "store_file": STORE_FILE,
        "tool": f"behavsig {__version__}",
    }
    tmp = db / (MANIFEST_FILE + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, db / MANIFEST_FILE)


def _open_db(args: argparse.Namespace) -> tuple[ReportStore, LshIndex]:
    db = _db(args)
    if not (db / STORE_FILE).exists():
        raise BehavsigError(f"no database at {db} (run build-db first)")
    store = ReportStore.load(db / STORE_FILE)
    expected = _params(args) if (args.lsh is not None or args.seed is not None) else None
    index = LshIndex.load(db / INDEX_FILE, expected)
    missing = [rec for rec in store.insertion_order() if rec.id not in index]
    for rec in missing:  # an update interrupted between the two appends
        log.warning("index lacks %s; adding it", rec.id)
        index.append(db / INDEX_FILE, rec.id, store.signature(rec.id, index.params))
    extra = set(index.signatures) - {r.id for r in store}
    if extra:
        raise BehavsigError(f"index has {len(extra)} ids missing from the store; rebuild with build-db --force")
    store.index = index
    return store, index


def _summary(store: ReportStore) -> str:
    counts = Counter(r.label.class_name for r in store)
    lines = [f"records: {len(store)}"]
    lines += [f"  {name}: {counts[name]}" for name in sorted(counts)]
    return "\n".join(lines)


# commands ----------------------------------------------------------------


def cmd_build_db(args: argparse.Namespace) -> int:
    if args.malware is None and args.benign is None:
        raise UsageError("give --malware and/or --benign")
    db = _db(args)
    if (db / STORE_FILE).exists() and not args.force:
        log.error("database already exists at %s (use --force to overwrite)", db)
        return EXIT_ERROR
    for m in (args.malware, args.benign):
        if m is not None and not m.is_file():
            log.error("manifest not found: %s", m)
            return EXIT_ERROR
    try:
        store = init_store(args.malware, args.benign, workers=args.threads)
    except InvalidInputError as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    params = _params(args)
    index = store.build_index(params)
    db.mkdir(parents=True, exist_ok=True)
    store.save(db / STORE_FILE)
    index.save(db / INDEX_FILE)
    _write_db_manifest(db, store, params)
    if args.keep_raw:
        for m, kind in ((args.malware, LabelKind.MALWARE), (args.benign, LabelKind.BENIGN)):
            if m is not None:
                for e in read_manifest(m, default_kind=kind):
                    _keep_raw(db, e.path, store)
    print(_summary(store))
    for err in store.ingest_errors:
        print(f"skipped {err.path}:{err.line}: {err.message}", file=sys.stderr)
    return EXIT_PARTIAL if store.ingest_errors else EXIT_OK


def _label(args: argparse.Namespace) -> Label:
    try:
        return Label.parse(args.label, args.family)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None


def _keep_raw(db: Path, path: Path, store: ReportStore) -> None:
    try:
        data = path.read_bytes()
    except OSError:
        return
    rid = report_id(data, path.stem)
    if rid in store:
        (db / "raw").mkdir(exist_ok=True)
        (db / "raw" / f"{rid}.txt").write_bytes(data)


def _add_report(db: Path, store: ReportStore, index: LshIndex, path: Path, label: Label,
                keep_raw: bool = False) -> StoredRecord:
    rep = ingest_report(path, label, store.tokenizer_config)
    if rep.id in store:
        raise ConflictError(f"report id {rep.id!r} already in store")
    update_store(store, rep)
    rec = store[rep.id]
    store.append_to(db / STORE_FILE, rec)
    index.append(db / INDEX_FILE, rec.id, index.signatures[rec.id])
    _write_db_manifest(db, store, index.params)
    if keep_raw:
        _keep_raw(db, path, store)
    return rec


def cmd_update(args: argparse.Namespace) -> int:
    label = _label(args)
    store, index = _open_db(args)
    db = _db(args)
    if args.report is not None:
        try:
            rec = _add_report(db, store, index, args.report, label, args.keep_raw)
        except ConflictError as exc:
            log.error("%s", exc)
            return EXIT_ERROR
        print(json.dumps({"added": rec.id, "label": rec.label.class_name, "records": len(store)}, sort_keys=True))
        return EXIT_OK
    return _watch(args, db, store, index, label)


def _watch(args: argparse.Namespace, db: Path, store: ReportStore, index: LshIndex, label: Label) -> int:
    if not args.watch.is_dir():
        log.error("not a directory: %s", args.watch)
        return EXIT_ERROR
    seen: dict[Path, tuple[int, int]] = {}
    polls = 0
    had_error = False
    try:
        while True:
            for path in sorted(p for p in args.watch.iterdir() if p.is_file()):
                try:
                    st = path.stat()
                except OSError:
                    continue
                stamp = (st.st_size, st.st_mtime_ns)
                if seen.get(path) == stamp:
                    continue
                seen[path] = stamp
                try:
                    rec = _add_report(db, store, index, path, label, args.keep_raw)
                except ConflictError:
                    log.info("already stored: %s", path)
                    continue
                except OSError as exc:
                    log.error("cannot read %s: %s", path, exc)
                    had_error = True
                    continue
                print(json.dumps({"added": rec.id, "label": rec.label.class_name, "records": len(store)},
                                 sort_keys=True), flush=True)
            polls += 1
            if args.max_polls and polls >= args.max_polls:
                break
            time.sleep(args.interval)
    except KeyboardInterrupt:
        pass
    return EXIT_PARTIAL if had_error else EXIT_OK


def cmd_scan(args: argparse.Namespace) -> int:
    cfg = _detector_config(args, exact=args.exact_alg3)
    store, index = _open_db(args)
    if args.report is not None:
        paths = [args.report]
    else:
        paths = [e.path for e in read_manifest(args.batch, default_kind=LabelKind.UNKNOWN)]
    results = classify_batch(store, index, paths, cfg, workers=args.threads)
    detected = errors = False
    for res in results:
        print(res.to_json())
        if isinstance(res, ItemError):
            errors = True
        elif res.decision is Decision.MALICIOUS:
            detected = True
    if args.fail_on_detect and detected:
        return EXIT_DETECTED
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _detector_config(args)
    params = _params(args)
    if args.manifest is not None:
        records, errors = load_records(args.manifest, workers=args.threads)
        source = str(args.manifest)
    else:
        store, _ = _open_db(args)
        records, errors = list(store), []
        source = str(_db(args) / STORE_FILE)
    for err in errors:
        print(f"skipped {err.path}:{err.line}: {err.message}", file=sys.stderr)
    seed = 0 if args.seed is None else args.seed
    plan = FoldPlan(args.folds, seed, stratified=not args.unstratified)
    try:
        run = evaluate_detection if args.mode == "detection" else evaluate_attribution
        result = run(records, plan, cfg, params=params)
    except InvalidInputError as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    out = args.out or _db(args) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "source": source,
        "lsh": f"N={params.n_hashes},b={params.n_bands},r={params.rows_per_band},seed={params.seed}",
        "idf_mode": cfg.idf_mode.value,
        "k": cfg.k,
        "vote": cfg.vote.value,
    }
    (out / f"metrics-{args.mode}.csv").write_text(result.metrics_csv(header), encoding="utf-8")
    (out / f"confusion-{args.mode}.csv").write_text(result.confusion.to_csv({"mode": args.mode, **header}),
                                                   encoding="utf-8")
    (out / "sizes.csv").write_text(size_stats(records).to_csv({"source": source}), encoding="utf-8")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    agg = result.aggregate
    print(f"{args.mode}: precision={agg.precision:.4f} recall={agg.recall:.4f} f1={agg.f1:.4f} ({out})")
    return EXIT_PARTIAL if errors else EXIT_OK


def _spec(args: argparse.Namespace) -> SynthCorpusSpec:
    spec = SynthCorpusSpec.load(args.spec) if args.spec else SynthCorpusSpec()
    if args.seed is not None:
        d = json.loads(spec.to_json())
        d["seed"] = args.seed
        spec = SynthCorpusSpec.from_json(json.dumps(d))
    return spec


def cmd_bench(args: argparse.Namespace) -> int:
    spec = _spec(args)
    cfg = DetectorConfig(idf_mode=IdfMode(args.idf_mode), max_candidates=args.max_candidates or None)
    params = _params(args)
    seed = 0 if args.seed is None else args.seed
    out = args.out or _db(args) / "scaling.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    result = scaling_bench(args.ladder, spec, cfg, params, repeats=args.repeats, seed=seed,
                           on_row=lambda r: log.info("rung %d done", r.n_reports))
    out.write_text(result.to_csv(), encoding="utf-8")
    print(f"wrote {out} ({len(result.rows)} rows)")
    if args.curve is not None:
        points = accuracy_curve(args.ladder, spec, DetectorConfig(idf_mode=cfg.idf_mode), params, seed=seed)
        args.curve.parent.mkdir(parents=True, exist_ok=True)
        args.curve.write_text(curve_csv(points, {"seed": seed}), encoding="utf-8")
        print(f"wrote {args.curve}")
    return EXIT_OK if len(result.rows) == len(args.ladder) else EXIT_PARTIAL


def cmd_gen_corpus(args: argparse.Namespace) -> int:
    corpus = gen_corpus(_spec(args), args.out)
    print(f"wrote {corpus.n_malware} malware and {corpus.n_benign} benign reports to {corpus.root}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    if getattr(args, "needs_db", True) and not args.db:
        parser.error(f"--db is required (or set {DB_ENV})")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (BehavsigError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    return EXIT_ERROR


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()

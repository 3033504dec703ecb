"""Command-line entry points: ingest, verify, localize, evaluate, gen-fixtures."""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import platform
import sqlite3
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .evaluator import EvaluationError, MatchRule, load_gold, load_reports, score_corpus
from .gateway import BackendConfig, BackendKind, GatewayError, RetryPolicy
from .notes import NoteError, ingest_notes
from .plan import DEFAULT_MASKING_ORDER, QueryPlan
from .query import Label, localize, verify
from .schema import SchemaError, load_profile
from .store import IngestError, RecordStore

log = logging.getLogger("ehrconsist")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# option name -> (type, default); shared by flags and the [run] section of a config file
RUN_OPTIONS: dict[str, tuple[type, Any]] = {
    "profile": (str, "mimic"),
    "db": (str, None),
    "notes": (str, None),
    "backend": (str, "scripted"),
    "script": (str, ""),
    "endpoint": (str, ""),
    "model": (str, ""),
    "temperature": (float, 0.0),
    "timeout": (float, 60.0),
    "retries": (int, 2),
    "max_concurrent": (int, 4),
    "cache_dir": (str, ""),
    "threshold": (float, 0.5),
    "l": (int, 1000),
    "n": (int, 3),
    "overlap": (int, 50),
    "masking_order": (str, ",".join(DEFAULT_MASKING_ORDER)),
    "parallelism": (int, 1),
    "out": (str, "out"),
    "section_filter": (str, ""),
    "lexicon": (str, ""),
    "schema_override": (str, ""),
}


class UsageError(Exception):
    pass


def _versions() -> dict[str, str]:
    import httpx

    return {"ehrconsist": __version__, "python": platform.python_version(), "sqlite": sqlite3.sqlite_version,
            "httpx": httpx.__version__}


def write_manifest(out: Path, command: str, config: dict[str, Any], timings: dict[str, Any],
                   extra: dict[str, Any] | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    data = {"command": command, "config": config, "versions": _versions(), "timings": timings}
    data.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise UsageError(f"cannot read config file {path}")
    if not cp.has_section("run"):
        raise UsageError(f"{path}: expected a [run] section")
    unknown = set(cp["run"]) - set(RUN_OPTIONS)
    if unknown:
        raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    return dict(cp["run"])


def resolve_options(args: argparse.Namespace) -> dict[str, Any]:
    """Flags win over the config file, which wins over built-in defaults."""
    file_opts = _read_config(getattr(args, "config", None))
    out = {}
    for name, (typ, default) in RUN_OPTIONS.items():
        flag = getattr(args, name, None)
        if flag is not None:
            out[name] = flag
        elif name in file_opts:
            try:
                out[name] = typ(file_opts[name])
            except ValueError:
                raise UsageError(f"config key {name}: cannot read {file_opts[name]!r}") from None
        else:
            out[name] = default
    return out


def build_run_config(opts: dict[str, Any]):
    from .verifier import RunConfig

    for req in ("db", "notes"):
        if not opts.get(req):
            raise UsageError(f"--{req} is required")
    try:
        kind = BackendKind(opts["backend"])
    except ValueError:
        raise UsageError(f"unknown backend {opts['backend']!r}") from None
    backend = BackendConfig(kind=kind, endpoint_url=opts["endpoint"], model=opts["model"],
                            temperature=opts["temperature"], max_concurrent_requests=opts["max_concurrent"],
                            timeout_seconds=opts["timeout"], retry=RetryPolicy(opts["retries"]),
                            script_path=opts["script"], cache_dir=opts["cache_dir"])
    order = tuple(x.strip() for x in str(opts["masking_order"]).split(",") if x.strip())
    cfg = RunConfig(profile=opts["profile"], db_dir=opts["db"], notes_path=opts["notes"], backend=backend,
                    threshold=opts["threshold"], l=opts["l"], n=opts["n"], overlap=opts["overlap"],
                    masking_order=order, parallelism=opts["parallelism"], output_dir=opts["out"],
                    section_filter_file=opts["section_filter"], lexicon_file=opts["lexicon"],
                    schema_override=opts["schema_override"])
    try:
        return cfg.validate()
    except (ValueError, GatewayError) as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands

def cmd_ingest(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    profile = load_profile(args.profile, args.schema_override)
    store = RecordStore(profile)
    counts = store.load_dir(args.db)
    store.freeze()
    summary: dict[str, Any] = {"tables": counts}
    if args.notes:
        summary["notes"] = len(ingest_notes(args.notes))
    print(json.dumps(summary, indent=1, sort_keys=True))
    if args.out:
        write_manifest(Path(args.out), "ingest", {"profile": args.profile, "db": args.db, "notes": args.notes},
                       {"total_seconds": round(time.perf_counter() - started, 3)}, summary)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    from .verifier import build_pipeline, summarize, verify_corpus, write_reports

    cfg = build_run_config(resolve_options(args))
    started = time.perf_counter()
    deps = build_pipeline(cfg)
    notes = ingest_notes(cfg.notes_path)
    loaded = time.perf_counter()
    reports = verify_corpus(notes, deps, cfg)
    done = time.perf_counter()
    out = write_reports(reports, deps.store, cfg.output_dir)
    summary = summarize(reports)
    write_manifest(out, "verify", cfg.to_json(), {
        "load_seconds": round(loaded - started, 3),
        "verify_seconds": round(done - loaded, 3),
        "per_note_seconds": {r.note_id: round(r.timing_seconds, 4) for r in reports},
    }, {"config_digest": cfg.digest(), "summary": summary})
    print(json.dumps(summary, indent=1))
    return EXIT_FAIL if summary["notes_with_errors"] else EXIT_OK


def cmd_localize(args: argparse.Namespace) -> int:
    """Re-run condition masking for the Inconsistent entities of existing reports."""
    started = time.perf_counter()
    profile = load_profile(args.profile, args.schema_override)
    store = RecordStore(profile)
    store.load_dir(args.db)
    store.freeze()
    results = []
    for rep in load_reports(args.reports):
        for ent in rep.get("entities", ()):
            if ent.get("label") != Label.INCONSISTENT.value:
                continue
            plans = [QueryPlan.from_json(p) for p in ent.get("plans", ())]
            failing = next((p for p in plans if verify(p, store) is Label.INCONSISTENT), None)
            if failing is None:
                results.append({"noteId": rep["noteId"], "entity": ent["mention"]["key"], "stale": True})
                continue
            attr = localize(failing, store, ent["mention"]["key"])
            results.append({"noteId": rep["noteId"], **attr.to_json()})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "localization.json").write_text(json.dumps(results, indent=1) + "\n", encoding="utf-8")
    write_manifest(out, "localize", {"profile": args.profile, "db": args.db, "reports": args.reports},
                   {"total_seconds": round(time.perf_counter() - started, 3)}, {"entities": len(results)})
    for r in results:
        cols = ", ".join("/".join(c) for c in r.get("error_columns", ())) or ("missing" if r.get("missing") else "-")
        print(f"{r['noteId']}\t{r['entity']}\t{cols}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    gold = load_gold(args.gold)
    reports = load_reports(args.reports)
    scores = score_corpus(gold, reports, MatchRule(args.match))
    print(scores.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(scores.to_json(), indent=1) + "\n", encoding="utf-8")
        (out / "metrics.txt").write_text(scores.table() + "\n", encoding="utf-8")
        write_manifest(out, "evaluate", {"gold": args.gold, "reports": args.reports, "match": args.match},
                       {"total_seconds": round(time.perf_counter() - started, 3)})
    return EXIT_OK


def cmd_gen_fixtures(args: argparse.Namespace) -> int:
    from .fixtures import InjectionSpec, generate

    started = time.perf_counter()
    spec = InjectionSpec(seed=args.seed, notes=args.notes, entities_per_note=args.entities_per_note,
                         time_shift=args.time_shift, value_perturb=args.value_perturb, unit_swap=args.unit_swap,
                         missing_entity=args.missing, compound=args.compound, extras=not args.no_extras)
    fx = generate(spec)
    out = fx.write(args.out)
    write_manifest(out, "gen-fixtures", spec.to_json(), {"total_seconds": round(time.perf_counter() - started, 3)},
                   {"entities": fx.entity_count, "injected": fx.injected_count})
    print(f"wrote {len(fx.notes)} notes, {fx.entity_count} entities, {fx.injected_count} injected errors to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with a [run] section; flags override it")
    p.add_argument("--profile", choices=("mimic", "omop"))
    p.add_argument("--db", help="directory of <Table>.csv files")
    p.add_argument("--notes", help="notes JSONL file")
    p.add_argument("--backend", choices=[k.value for k in BackendKind])
    p.add_argument("--script", help="scripted answers JSON (scripted backend)")
    p.add_argument("--endpoint", help="chat-completions URL (remote backend)")
    p.add_argument("--model")
    p.add_argument("--temperature", type=float)
    p.add_argument("--timeout", type=float)
    p.add_argument("--retries", type=int)
    p.add_argument("--max-concurrent", dest="max_concurrent", type=int)
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--threshold", type=float)
    p.add_argument("--l", type=int, help="sub-text token limit")
    p.add_argument("--n", type=int, help="sections per segmentation round")
    p.add_argument("--overlap", type=int)
    p.add_argument("--masking-order", dest="masking_order", help="comma list, e.g. value,unit,time")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--out")
    p.add_argument("--section-filter", dest="section_filter")
    p.add_argument("--lexicon")
    p.add_argument("--schema-override", dest="schema_override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehrconsist", description="Check clinical notes against EHR tables.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load and validate tables (and notes)")
    p.add_argument("--profile", default="mimic", choices=("mimic", "omop"))
    p.add_argument("--db", required=True)
    p.add_argument("--notes")
    p.add_argument("--schema-override", dest="schema_override")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("verify", help="run the full pipeline and write reports")
    _add_run_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("localize", help="re-run condition masking on existing reports")
    p.add_argument("--profile", default="mimic", choices=("mimic", "omop"))
    p.add_argument("--db", required=True)
    p.add_argument("--reports", required=True, help="report directory (or a verify output directory)")
    p.add_argument("--schema-override", dest="schema_override")
    p.add_argument("--out", default="out-localize")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="score reports against gold labels")
    p.add_argument("--gold", required=True)
    p.add_argument("--reports", required=True)
    p.add_argument("--match", default=MatchRule.SURFACE_LINE.value, choices=[m.value for m in MatchRule])
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gen-fixtures", help="generate a synthetic corpus with injected errors")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--notes", type=int, default=20)
    p.add_argument("--entities-per-note", dest="entities_per_note", type=int, default=10)
    p.add_argument("--time-shift", dest="time_shift", type=int, default=12)
    p.add_argument("--value-perturb", dest="value_perturb", type=int, default=12)
    p.add_argument("--unit-swap", dest="unit_swap", type=int, default=8)
    p.add_argument("--missing", type=int, default=8)
    p.add_argument("--compound", type=int, default=4)
    p.add_argument("--no-extras", dest="no_extras", action="store_true")
    p.set_defaults(func=cmd_gen_fixtures)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, IngestError, NoteError, SchemaError, EvaluationError, GatewayError) as exc:
        print(f"{parser.prog}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

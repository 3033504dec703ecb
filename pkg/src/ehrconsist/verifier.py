"""Per-note orchestration of all stages, corpus runs and report assembly."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

from .entities import EntityMention, EntityType, TablePair, TimeRegime, TimeTag, UNSPECIFIED
from .gateway import Backend, BackendConfig, GatewayError, make_backend
from .itemsearch import ExpansionLexicon, ItemIndex, default_lexicon
from .notes import Note, apply_section_filter, default_section_patterns
from .plan import DEFAULT_MASKING_ORDER, QueryPlan
from .query import (ErrorAttribution, Label, NoItem, NoTemplate, WindowError, build_plan,
                    compute_window, localize, verify_all)
from .schema import ColumnRole, SchemaProfile
from .segment import BackendSplitter, SubText, segment
from .stages import (AuditLog, StageContext, StageParseError, assign_ordinals, build_pseudo_rows,
                     filter_time, identify_tables, recognize_entities, reformat_values, select_row,
                     self_correct)
from .store import Provenance, RecordStore
from .entities import Anchor, AnchorKind

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class Reason(str, Enum):
    HISTORY = "history"
    NO_TABLE = "no-table"
    NO_ITEM = "no-item"
    NO_TEMPLATE = "no-template"
    STAGE_PARSE_FAILURE = "stage-parse-failure"
    TYPE3 = "type3"


UNVERIFIABLE = "Unverifiable"


@dataclass(frozen=True)
class RunConfig:
    profile: str = "mimic"
    db_dir: str = ""
    notes_path: str = ""
    backend: BackendConfig = field(default_factory=BackendConfig)
    threshold: float = 0.5
    l: int = 1000
    n: int = 3
    overlap: int = 50
    masking_order: tuple[str, ...] = DEFAULT_MASKING_ORDER
    parallelism: int = 1
    output_dir: str = "out"
    section_filter_file: str = ""
    lexicon_file: str = ""
    schema_override: str = ""
    multiset_bigrams: bool = True

    def validate(self) -> "RunConfig":
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.l < 1 or self.n < 2 or self.overlap < 0:
            raise ValueError("segmentation needs l >= 1, n >= 2, overlap >= 0")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if sorted(self.masking_order) != sorted(set(self.masking_order)) or \
                not set(self.masking_order) <= set(DEFAULT_MASKING_ORDER):
            raise ValueError(f"masking order must be a permutation drawn from {DEFAULT_MASKING_ORDER}")
        self.backend.validate()
        return self

    def analytic_json(self) -> dict[str, Any]:
        """Settings that can change results; paths, parallelism and output location are left out."""
        b = self.backend
        return {
            "profile": self.profile, "threshold": self.threshold, "l": self.l, "n": self.n,
            "overlap": self.overlap, "masking_order": list(self.masking_order),
            "multiset_bigrams": self.multiset_bigrams,
            "backend": {"kind": b.kind.value, "model": b.model, "temperature": b.temperature},
            "section_filter": _file_digest(self.section_filter_file),
            "lexicon": _file_digest(self.lexicon_file),
            "schema_override": _file_digest(self.schema_override),
        }

    def digest(self) -> str:
        blob = json.dumps(self.analytic_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self) -> dict[str, Any]:
        d = self.analytic_json()
        d.update(db_dir=self.db_dir, notes_path=self.notes_path, parallelism=self.parallelism,
                 output_dir=self.output_dir, backend=self.backend.to_json())
        return d


def _file_digest(path: str) -> str | None:
    if not path:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


@dataclass
class Pipeline:
    """Module handles shared by every note of a run (all read-only during verification)."""

    profile: SchemaProfile
    store: RecordStore
    backend: Backend
    lexicon: ExpansionLexicon = field(default_factory=default_lexicon)
    section_patterns: Sequence[str] = field(default_factory=default_section_patterns)
    index: ItemIndex | None = None
    template_dir: str | None = None
    query_path: Provenance = Provenance.SQL

    def __post_init__(self) -> None:
        if self.store.profile is not self.profile and self.store.profile != self.profile:
            raise ValueError("store and pipeline profiles differ")
        if self.index is None:
            self.index = ItemIndex.build(self.store)


@dataclass
class EntityResult:
    mention: EntityMention
    label: str
    reason: Reason | None = None
    detail: str = ""
    tag: TimeTag | None = None
    pair: TablePair | None = None
    plans: list[QueryPlan] = field(default_factory=list)
    attribution: ErrorAttribution | None = None

    def to_json(self, store: RecordStore) -> dict[str, Any]:
        return {
            "mention": self.mention.to_json(),
            "label": self.label,
            "reason": self.reason.value if self.reason else None,
            "detail": self.detail,
            "time": self.tag.to_json() if self.tag else None,
            "table_pair": list(self.pair) if self.pair else None,
            "plans": [{**p.to_json(), "sql": store.render_sql(p)} for p in self.plans],
            "attribution": self.attribution.to_json() if self.attribution else None,
        }


@dataclass
class VerificationReport:
    note_id: str
    category: str
    config_digest: str
    entities: list[EntityResult] = field(default_factory=list)
    removed_lines: tuple[int, ...] = ()
    segmentation: list[dict[str, Any]] = field(default_factory=list)
    error: str | None = None
    transcripts: list[dict[str, Any]] = field(default_factory=list)
    timing_seconds: float = 0.0

    def to_json(self, store: RecordStore) -> dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "noteId": self.note_id,
            "category": self.category,
            "config_digest": self.config_digest,
            "error": self.error,
            "removed_lines": list(self.removed_lines),
            "segmentation": self.segmentation,
            "entities": [e.to_json(store) for e in self.entities],
        }

    def dumps(self, store: RecordStore) -> str:
        return json.dumps(self.to_json(store), indent=1, sort_keys=False, ensure_ascii=False) + "\n"


class _Unverifiable(Exception):
    def __init__(self, reason: Reason, detail: str = "") -> None:
        super().__init__(detail or reason.value)
        self.reason = reason
        self.detail = detail


@dataclass
class _PairOutcome:
    pair: TablePair
    label: Label
    plans: list[QueryPlan]
    failing: QueryPlan | None


def effective_tag(tag: TimeTag, time_value) -> TimeTag:
    """Reconcile the time filter's tag with the time the row actually carries."""
    if tag.regime is TimeRegime.UNSPECIFIED:
        return tag
    if time_value is None:
        return replace(UNSPECIFIED, in_current_stay=tag.in_current_stay)
    if tag.regime is TimeRegime.EXACT:
        return TimeTag(TimeRegime.EXACT, Anchor(AnchorKind.LITERAL, literal=time_value),
                       tag.in_current_stay, tag.expression)
    return tag


def _verify_pair(mention: EntityMention, sub: SubText, pair: TablePair, tag: TimeTag, hits,
                 note: Note, ctx: StageContext, deps: Pipeline, cfg: RunConfig) -> _PairOutcome:
    rows = build_pseudo_rows(mention, sub, pair, ctx)
    if not rows:
        raise _Unverifiable(Reason.STAGE_PARSE_FAILURE, f"no pseudo rows for {pair[0]}")
    ev = deps.profile.table(pair[0])
    values = mention.raw_values or (None,)
    multi = len(values) > 1
    plans = []
    for v in values:
        variant = v if multi else None
        row = select_row(rows, v)
        checked = self_correct(row, mention, sub, ctx, variant)
        if v is not None and ev.has_role(ColumnRole.VALUE) and ColumnRole.VALUE not in checked.cells:
            checked.cells[ColumnRole.VALUE] = v
        formatted = reformat_values(checked, mention, ctx, variant)
        eff = effective_tag(tag, formatted.time_value())
        try:
            window = compute_window(eff, note)
            plan = build_plan(formatted, hits, window, note, deps.profile, mention.entity_type,
                              cfg.masking_order)
        except NoItem as exc:
            raise _Unverifiable(Reason.NO_ITEM, str(exc)) from None
        except NoTemplate as exc:
            raise _Unverifiable(Reason.NO_TEMPLATE, str(exc)) from None
        except WindowError as exc:
            raise _Unverifiable(Reason.HISTORY, str(exc)) from None
        plans.append(plan)
    label, failing = verify_all(plans, deps.store, deps.query_path)
    return _PairOutcome(pair, label, plans, failing)


def verify_mention(mention: EntityMention, sub: SubText, note: Note, ctx: StageContext,
                   deps: Pipeline, cfg: RunConfig) -> EntityResult:
    if mention.entity_type is EntityType.TYPE3:
        return EntityResult(mention, UNVERIFIABLE, Reason.TYPE3)
    try:
        tag = filter_time(mention, sub, ctx)
        if not tag.in_current_stay:
            return EntityResult(mention, UNVERIFIABLE, Reason.HISTORY, tag=tag)
        try:
            pairs = identify_tables(mention, ctx)
        except StageParseError as exc:
            return EntityResult(mention, UNVERIFIABLE, Reason.STAGE_PARSE_FAILURE, str(exc), tag)
        if not pairs:
            return EntityResult(mention, UNVERIFIABLE, Reason.NO_TABLE, tag=tag)
        hits = deps.index.search(mention.surface, deps.lexicon, cfg.threshold, cfg.multiset_bigrams)
        outcomes: list[_PairOutcome] = []
        first_failure: _Unverifiable | None = None
        for pair in pairs:
            try:
                outcomes.append(_verify_pair(mention, sub, pair, tag, hits, note, ctx, deps, cfg))
            except _Unverifiable as exc:
                first_failure = first_failure or exc
    except GatewayError as exc:
        log.warning("note %s entity %s: backend failure %s", note.note_id, mention.key, exc)
        return EntityResult(mention, UNVERIFIABLE, Reason.STAGE_PARSE_FAILURE, f"{type(exc).__name__}: {exc}")

    for o in outcomes:
        if o.label is Label.CONSISTENT:
            return EntityResult(mention, o.label.value, tag=tag, pair=o.pair, plans=o.plans)
    if outcomes:
        o = outcomes[0]
        attribution = localize(o.failing, deps.store, mention.key, deps.query_path)
        return EntityResult(mention, o.label.value, tag=tag, pair=o.pair, plans=o.plans,
                            attribution=attribution)
    return EntityResult(mention, UNVERIFIABLE, first_failure.reason, first_failure.detail, tag)


def _owning_sub(subs: Sequence[SubText], line_no: int) -> SubText:
    for s in subs:
        if s.in_core(line_no):
            return s
    raise LookupError(line_no)


def verify_note(note: Note, deps: Pipeline, cfg: RunConfig) -> VerificationReport:
    started = time.perf_counter()
    filtered = apply_section_filter(note, deps.section_patterns)
    audit = AuditLog()
    ctx = StageContext(deps.backend, deps.profile, filtered, audit, deps.template_dir)
    splitter = BackendSplitter(deps.backend, note.note_id, deps.template_dir)
    seg = segment(filtered, cfg.l, cfg.n, splitter, cfg.overlap)
    mentions: list[EntityMention] = []
    for sub in seg.subtexts:
        mentions.extend(recognize_entities(sub, ctx))
    mentions = assign_ordinals(mentions)
    results = [verify_mention(m, _owning_sub(seg.subtexts, m.line_no), filtered, ctx, deps, cfg)
               for m in mentions]
    seg_info = [{"index": s.index, "lines": list(s.line_range), "core_tokens": s.core_tokens}
                for s in seg.subtexts]
    if seg.fallbacks:
        seg_info.append({"fallbacks": list(seg.fallbacks)})
    return VerificationReport(
        note_id=note.note_id, category=note.category.value, config_digest=cfg.digest(),
        entities=results, removed_lines=filtered.removed_lines, segmentation=seg_info,
        transcripts=audit.sorted_records(), timing_seconds=time.perf_counter() - started)


def _safe_verify(note: Note, deps: Pipeline, cfg: RunConfig) -> VerificationReport:
    try:
        return verify_note(note, deps, cfg)
    except Exception as exc:  # one note never takes the corpus down
        log.exception("note %s failed", note.note_id)
        return VerificationReport(note.note_id, note.category.value, cfg.digest(),
                                  error=f"{type(exc).__name__}: {exc}")


def verify_corpus(notes: Sequence[Note], deps: Pipeline, cfg: RunConfig,
                  parallelism: int | None = None) -> list[VerificationReport]:
    workers = cfg.parallelism if parallelism is None else parallelism
    if workers < 1:
        raise ValueError("parallelism must be >= 1")
    ordered = sorted(notes, key=lambda x: x.note_id)
    if workers == 1:
        return [_safe_verify(x, deps, cfg) for x in ordered]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda x: _safe_verify(x, deps, cfg), ordered))


# ---------------------------------------------------------------------------
# outputs

def summarize(reports: Sequence[VerificationReport]) -> dict[str, Any]:
    labels: Counter = Counter()
    reasons: Counter = Counter()
    columns: Counter = Counter()
    compound = missing = 0
    for r in reports:
        for e in r.entities:
            labels[e.label] += 1
            if e.reason:
                reasons[e.reason.value] += 1
            a = e.attribution
            if a is not None:
                missing += a.missing
                compound += a.compound
                for t, c in a.error_columns:
                    columns[f"{t}.{c}"] += 1
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "notes": len(reports),
        "notes_with_errors": sum(1 for r in reports if r.error),
        "labels": dict(sorted(labels.items())),
        "unverifiable_reasons": dict(sorted(reasons.items())),
        "error_columns": dict(sorted(columns.items())),
        "missing_entities": missing,
        "compound_errors": compound,
    }


def write_reports(reports: Sequence[VerificationReport], store: RecordStore, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "transcripts").mkdir(parents=True, exist_ok=True)
    for r in reports:
        (out / "reports" / f"{r.note_id}.json").write_text(r.dumps(store), encoding="utf-8")
        with open(out / "transcripts" / f"{r.note_id}.jsonl", "w", encoding="utf-8") as fh:
            for rec in r.transcripts:
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    (out / "summary.json").write_text(json.dumps(summarize(reports), indent=1) + "\n", encoding="utf-8")
    return out


def build_pipeline(cfg: RunConfig, store: RecordStore | None = None, backend: Backend | None = None) -> Pipeline:
    """Load every handle a run needs from a validated config."""
    from .notes import load_patterns_text
    from .schema import load_profile

    profile = load_profile(cfg.profile, cfg.schema_override or None)
    if store is None:
        store = RecordStore(profile)
        store.load_dir(cfg.db_dir)
        store.freeze()
    lexicon = ExpansionLexicon.load(cfg.lexicon_file) if cfg.lexicon_file else default_lexicon()
    patterns = (load_patterns_text(Path(cfg.section_filter_file).read_text(encoding="utf-8"))
                if cfg.section_filter_file else default_section_patterns())
    return Pipeline(profile, store, backend or make_backend(cfg.backend), lexicon, patterns)

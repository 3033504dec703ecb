"""Prompt-driven extraction stages, each with a strict parser for the backend's answer."""
from __future__ import annotations

import logging
import re
import threading
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any, Sequence

from .entities import (Anchor, AnchorKind, EntityMention, EntityType, PromptColumn, PseudoRow,
                       ReformattedRow, TablePair, TimeRegime, TimeTag, UNSPECIFIED)
from .gateway import Backend, GatewayError, PromptInstance, render
from .notes import Note
from .schema import TIME_ROLES, ColumnRole, SchemaProfile
from .segment import SubText
from .timeexpr import parse_literal, resolve_time_text, strip_brackets
from .values import format_datetime, parse_decimal

log = logging.getLogger(__name__)


class StageParseError(ValueError):
    """The backend answer does not follow the stage's grammar."""


class AuditLog:
    """Thread-safe collector of stage transcripts (prompt, raw answer, parsed result)."""

    def __init__(self) -> None:
        self.records: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def add(self, stage: str, prompt: PromptInstance | None, answer: str | None, parsed: Any,
            error: str | None = None) -> None:
        rec = {
            "stage": stage,
            "note_id": prompt.note_id if prompt else "",
            "entity": prompt.entity if prompt else "",
            "prompt_sha256": prompt.digest if prompt else "",
            "prompt": prompt.rendered_text if prompt else "",
            "answer": answer,
            "parsed": parsed,
            "error": error,
        }
        with self._lock:
            self.records.append(rec)

    def sorted_records(self) -> list[dict[str, Any]]:
        with self._lock:
            return sorted(self.records, key=lambda r: (r["entity"], r["stage"], r["prompt_sha256"]))


@dataclass
class StageContext:
    backend: Backend
    profile: SchemaProfile
    note: Note
    audit: AuditLog = field(default_factory=AuditLog)
    template_dir: str | None = None

    def ask(self, template: str, values: dict[str, str], entity: str) -> tuple[PromptInstance, str]:
        prompt = render(template, values, note_id=self.note.note_id, entity=entity,
                        template_dir=self.template_dir)
        return prompt, self.backend.complete(prompt)


def _fmt(d) -> str:
    return format_datetime(d)


def highlight(text: str, surface: str) -> str:
    pat = _surface_pattern(surface)
    return pat.sub(lambda m: "{{**" + m.group(0) + "**}}", text, count=1)


def _surface_pattern(surface: str) -> re.Pattern:
    return re.compile(r"(?<![A-Za-z0-9])" + re.escape(surface.strip()) + r"(?![A-Za-z0-9])", re.IGNORECASE)


def _mention_text(sub: SubText, mention: EntityMention) -> str:
    lines = []
    for n, t in sub.lines:
        lines.append(highlight(t, mention.surface) if n == mention.line_no else t)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# stage 2: named entity recognition

_ITEM = re.compile(r"^(?P<surface>.+?)\s+-\s+category\s*(?P<cat>[123])\s*(?:\((?P<detail>.*)\))?\s*\.?$",
                   re.IGNORECASE | re.DOTALL)
_NUMBER = re.compile(r"(?<![\d.])\d+(?:\.\d+)?(?![\d])")


@dataclass(frozen=True)
class NerItem:
    surface: str
    category: int
    values: tuple[str, ...]


def _split_top_level(text: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth = max(0, depth - 1)
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p.strip() for p in parts if p.strip()]


def parse_ner_answer(answer: str) -> list[NerItem]:
    items: list[NerItem] = []
    saw_nothing = False
    saw_items = False
    for raw in answer.splitlines():
        line = raw.strip()
        if line.lower().startswith("answer:"):
            line = line[len("answer:"):].strip()
        if not line:
            continue
        if line.rstrip(".").lower() == "nothing":
            saw_nothing = True
            continue
        if not re.search(r"-\s*category\s*[123]", line, re.IGNORECASE):
            continue
        saw_items = True
        for chunk in _split_top_level(line):
            m = _ITEM.match(chunk)
            if not m:
                log.info("dropping unparseable entity item %r", chunk)
                continue
            cat = int(m.group("cat"))
            surface = m.group("surface").strip().strip("'\"`")
            values: tuple[str, ...] = ()
            if cat == 1:
                values = tuple(_NUMBER.findall(m.group("detail") or ""))
                if not values:
                    log.info("dropping category-1 item without numbers %r", chunk)
                    continue
            if surface:
                items.append(NerItem(surface, cat, values))
    if not saw_items and not saw_nothing:
        raise StageParseError("no entity list and no 'Nothing' in the answer")
    return items


def _value_pattern(value: str) -> re.Pattern:
    return re.compile(r"(?<![\d.])" + re.escape(value) + r"(?![\d])")


def locate_items(items: Sequence[NerItem], sub: SubText) -> list[EntityMention]:
    """Place each parsed item on the core lines of ``sub`` that contain it."""
    out: list[EntityMention] = []
    seen: set[tuple[str, int, str | None]] = set()
    core = sub.core_lines
    for item in items:
        pat = _surface_pattern(item.surface)
        lines = [(n, t) for n, t in core if pat.search(t)]
        if not lines:
            log.info("entity %r not found in core lines %s", item.surface, sub.line_range)
            continue
        etype = EntityType(item.category)
        if etype is EntityType.TYPE1:
            # values sharing a line stay one mention (e.g. 120/80)
            per_line: dict[int, list[str]] = {}
            for v in item.values:
                vp = _value_pattern(v)
                for n, t in lines:
                    if vp.search(t) and (item.surface, n, v) not in seen:
                        seen.add((item.surface, n, v))
                        per_line.setdefault(n, []).append(v)
                        break
            for n in sorted(per_line):
                out.append(EntityMention(item.surface, etype, n, raw_values=tuple(per_line[n])))
        else:
            for n, _ in lines:
                if (item.surface, n, None) not in seen:
                    seen.add((item.surface, n, None))
                    out.append(EntityMention(item.surface, etype, n))
    return out


def recognize_entities(sub: SubText, ctx: StageContext) -> list[EntityMention]:
    if not sub.lines:
        return []
    prompt, answer = ctx.ask("ner", {"CLINICAL_NOTE": sub.text}, entity=f"sub{sub.index}")
    try:
        items = parse_ner_answer(answer)
    except StageParseError as exc:
        log.warning("note %s sub %d: %s", ctx.note.note_id, sub.index, exc)
        ctx.audit.add("ner", prompt, answer, [], str(exc))
        return []
    mentions = locate_items(items, sub)
    ctx.audit.add("ner", prompt, answer, [m.to_json() for m in mentions])
    return mentions


def assign_ordinals(mentions: Sequence[EntityMention]) -> list[EntityMention]:
    """Number repeated surfaces in line order (values of one line share an ordinal)."""
    from dataclasses import replace

    ordered = sorted(mentions, key=lambda m: (m.line_no, m.surface.lower(), m.raw_values))
    counters: dict[str, int] = {}
    last_line: dict[str, int] = {}
    out = []
    for m in ordered:
        key = m.surface.lower()
        if last_line.get(key) != m.line_no:
            counters[key] = counters.get(key, 0) + 1
            last_line[key] = m.line_no
        out.append(replace(m, mention_ordinal=counters[key]))
    return out


# ---------------------------------------------------------------------------
# stage 3: time filtering

_A1 = re.compile(r"\[Answer\s*1\]\s*[:\-]?\s*(yes|no)\b", re.IGNORECASE)
_A2_TIME = re.compile(r"Time\s*:\s*[`'\"‘“]?(.*?)[`'\"’”]?\s*$", re.IGNORECASE | re.MULTILINE)
_A3 = re.compile(r"\[Answer\s*3\]\s*(.*)", re.IGNORECASE | re.DOTALL)
_NO_TIME = {"", "nan", "none", "null", "n/a", "na", "-"}


def parse_narrative_anchor(text: str) -> Anchor | None:
    m = re.search(r"\b(?:HD|hospital\s+day)\s*#?\s*(\d{1,3})\b", text, re.IGNORECASE)
    if m and int(m.group(1)) >= 1:
        return Anchor(AnchorKind.HOSPITAL_DAY, day=int(m.group(1)))
    low = text.lower()
    if re.search(r"\byesterday\b", low):
        return Anchor(AnchorKind.YESTERDAY)
    if re.search(r"\b(?:admission|admit|admitted|presentation)\b", low):
        return Anchor(AnchorKind.ADMISSION)
    if re.search(r"\bdischarge[d]?\b", low):
        return Anchor(AnchorKind.DISCHARGE)
    if re.search(r"\b(?:today|this (?:morning|afternoon|evening)|tonight|this am|this pm)\b", low):
        return Anchor(AnchorKind.CHART_DATE)
    return None


def parse_time_answer(answer: str, note: Note) -> TimeTag:
    m1 = _A1.search(answer)
    m3 = _A3.search(answer)
    if not m1 or not m3:
        raise StageParseError("missing [Answer 1] or [Answer 3]")
    if m1.group(1).lower() == "no":
        return TimeTag(TimeRegime.UNSPECIFIED, None, in_current_stay=False)
    a2_start = answer.lower().find("[answer 2]")
    a2 = answer[a2_start:m3.start()] if 0 <= a2_start < m3.start() else ""
    mt = _A2_TIME.search(a2)
    time_text = mt.group(1).strip() if mt else ""
    if time_text.lower() in _NO_TIME:
        time_text = ""
    choice = m3.group(1).lower()
    if "indeterminate" in choice:
        return TimeTag(TimeRegime.UNSPECIFIED, expression=time_text or None)
    if "directly written" in choice or "yyyy-mm-dd" in choice:
        lit = parse_literal(time_text, note.chart_date) if time_text else None
        if lit is None:
            log.info("explicit time %r unresolvable; treating as unspecified", time_text)
            return TimeTag(TimeRegime.UNSPECIFIED, expression=time_text or None)
        return TimeTag(TimeRegime.EXACT, Anchor(AnchorKind.LITERAL, literal=lit), expression=time_text)
    if "inferable" in choice or "narrative" in choice:
        anchor = parse_narrative_anchor(time_text) if time_text else None
        if anchor is None:
            log.info("narrative time %r unresolvable; treating as unspecified", time_text)
            return TimeTag(TimeRegime.UNSPECIFIED, expression=time_text or None)
        return TimeTag(TimeRegime.NARRATIVE, anchor, expression=time_text)
    raise StageParseError(f"unrecognized option in [Answer 3]: {choice[:60]!r}")


def filter_time(mention: EntityMention, sub: SubText, ctx: StageContext) -> TimeTag:
    note = ctx.note
    prompt, answer = ctx.ask("time_filter", {
        "ENTITY": mention.surface,
        "ADMISSION": _fmt(note.admit_time),
        "CHARTTIME": _fmt(note.chart_time),
        "CLINICAL_NOTE": _mention_text(sub, mention),
    }, entity=mention.key)
    try:
        tag = parse_time_answer(answer, note)
    except StageParseError as exc:
        log.warning("time filter for %s: %s; using the conservative default", mention.key, exc)
        ctx.audit.add("time_filter", prompt, answer, UNSPECIFIED.to_json(), str(exc))
        return UNSPECIFIED
    ctx.audit.add("time_filter", prompt, answer, tag.to_json())
    return tag


# ---------------------------------------------------------------------------
# stage 4: table identification

def schema_overview(profile: SchemaProfile) -> str:
    lines = []
    for t in profile.tables:
        cols = ", ".join(c for c, _ in t.columns)
        lines.append(f"- {t.name}: {cols}")
    for j in profile.joins:
        lines.append(f"- {j.child_table}.{j.child_column} references {j.dict_table}.{j.dict_column}")
    return "\n".join(lines)


def pair_text(pair: TablePair) -> str:
    ev, d = pair
    return "{" + ev + (", " + d if d else "") + "}"


def parse_table_answer(answer: str, profile: SchemaProfile) -> list[TablePair]:
    idx = answer.lower().rfind("selected-table")
    tail = answer[idx:] if idx >= 0 else answer
    m = re.search(r"\[(.*?)\]", tail, re.DOTALL)
    if not m:
        raise StageParseError("no bracketed table list")
    content = m.group(1)
    groups = re.findall(r"\{([^{}]*)\}", content)
    if not groups:
        if re.search(r"none", content, re.IGNORECASE):
            return []
        raise StageParseError(f"unreadable table list [{content[:60]}]")
    legal = {(e.lower(), d.lower() if d else None): (e, d) for e, d in profile.legal_pairs}
    out: list[TablePair] = []
    for g in groups:
        names = [x.strip().strip("'\"`").lower() for x in g.split(",") if x.strip()]
        key = (names[0], names[1] if len(names) > 1 else None) if names else None
        if key is None or len(names) > 2 or key not in legal:
            log.info("dropping illegal table pair {%s}", g)
            continue
        if legal[key] not in out:
            out.append(legal[key])
    return out


def identify_tables(mention: EntityMention, ctx: StageContext) -> list[TablePair]:
    pairs = ", ".join(pair_text(p) for p in ctx.profile.legal_pairs)
    prompt, answer = ctx.ask("table_identification", {
        "ENTITY": mention.surface,
        "TABLE_PAIRS": pairs,
        "SCHEMA": schema_overview(ctx.profile),
    }, entity=mention.key)
    try:
        out = parse_table_answer(answer, ctx.profile)
    except StageParseError as exc:
        ctx.audit.add("table_identification", prompt, answer, None, str(exc))
        raise
    ctx.audit.add("table_identification", prompt, answer, [list(p) for p in out])
    return out


# ---------------------------------------------------------------------------
# stage 5: pseudo table creation

_PSEUDO_ROLES = (ColumnRole.LABEL, ColumnRole.POINT_TIME, ColumnRole.START_TIME, ColumnRole.END_TIME,
                 ColumnRole.VALUE, ColumnRole.UNIT, ColumnRole.ORGANISM, ColumnRole.SPECIMEN)


def pair_columns(profile: SchemaProfile, pair: TablePair) -> list[PromptColumn]:
    """Columns the backend fills for a pair, in prompt order."""
    ev = profile.table(pair[0])
    out: list[PromptColumn] = []
    if pair[1] is not None:
        joins = [j for j in profile.joins_for(ev.name) if j.dict_table == pair[1]]
        if len(joins) == 1:
            d = profile.table(pair[1])
            for c in d.role_columns(ColumnRole.LABEL):
                out.append(PromptColumn(c.upper(), d.name, c, ColumnRole.LABEL))
    for role in _PSEUDO_ROLES:
        for c in ev.role_columns(role):
            out.append(PromptColumn(c.upper(), ev.name, c, role))
    return out


def _is_absent(value: str) -> bool:
    return value.strip().strip("'\"`").lower() in _NO_TIME


_MENTIONED = re.compile(r"Mentioned\s*\[?\s*#?\s*(\d+)\s*\]?\s*[.:)]\s*(.*)$", re.IGNORECASE)
_FIELD_SPLIT = re.compile(r",\s*(?=[A-Z][A-Z0-9_]*\s*:)")


def parse_pseudo_answer(answer: str, columns: Sequence[PromptColumn], pair: TablePair) -> list[PseudoRow]:
    by_name = {c.name: c for c in columns}
    evidence = ""
    m = re.search(r"\[Answer in step 1\]\s*:?\s*(.*)", answer, re.IGNORECASE)
    if m:
        evidence = m.group(1).strip()
    rows = []
    for raw in answer.splitlines():
        mm = _MENTIONED.search(raw.strip())
        if not mm:
            continue
        cells: dict[ColumnRole, str] = {}
        for fld in _FIELD_SPLIT.split(mm.group(2).strip()):
            name, sep, value = fld.partition(":")
            if not sep:
                continue
            col = by_name.get(name.strip().upper())
            if col is None:
                log.info("dropping unknown column %r", name)
                continue
            value = value.strip().rstrip(",").strip().strip("'\"`").strip()
            if _is_absent(value) or col.role in cells:
                continue
            cells[col.role] = value
        rows.append(PseudoRow(pair, cells, evidence))
    if not rows:
        raise StageParseError("no 'Mentioned [#].' rows")
    return rows


def row_format(columns: Sequence[PromptColumn]) -> str:
    return "Mentioned [#]. " + ", ".join(f"{c.name}: {c.column}" for c in columns)


def build_pseudo_rows(mention: EntityMention, sub: SubText, pair: TablePair,
                      ctx: StageContext) -> list[PseudoRow]:
    if mention.entity_type is EntityType.TYPE3:
        raise ValueError("Type3 mentions are not verified")
    columns = pair_columns(ctx.profile, pair)
    desc = "\n".join(f"- {c.name} ({c.table}.{c.column}): {c.role.value}" for c in columns)
    prompt, answer = ctx.ask("pseudo_table", {
        "ENTITY": mention.surface,
        "COLUMNS": desc,
        "ROW_FORMAT": row_format(columns),
        "CLINICAL_NOTE": _mention_text(sub, mention),
    }, entity=pair_entity(mention, pair))
    try:
        rows = parse_pseudo_answer(answer, columns, pair)
    except StageParseError as exc:
        log.info("pseudo rows for %s: %s", mention.key, exc)
        ctx.audit.add("pseudo_table", prompt, answer, [], str(exc))
        return []
    ctx.audit.add("pseudo_table", prompt, answer, [r.to_json() for r in rows])
    return rows


def pair_entity(mention: EntityMention, pair: TablePair, variant: str | None = None) -> str:
    base = f"{mention.key}#{pair[0]}"
    return f"{base}~{variant}" if variant is not None else base


def select_row(rows: Sequence[PseudoRow], value: str | None) -> PseudoRow | None:
    """The row carrying ``value`` if any, otherwise the first row."""
    if not rows:
        return None
    if value is not None:
        want = parse_decimal(value)
        for r in rows:
            raw = r.cells.get(ColumnRole.VALUE)
            got = _leading_decimal(raw) if raw else None
            if got is not None and got == want:
                return r
    return rows[0]


def _leading_decimal(text: str) -> Decimal | None:
    m = re.match(r"\s*[-+]?\d+(?:\.\d+)?", text)
    if not m:
        return None
    try:
        return parse_decimal(m.group(0))
    except ValueError:
        return None


# ---------------------------------------------------------------------------
# stage 6: self correction

def _question(k: int, entity: str, col: PromptColumn, raw: str) -> str:
    return f"[{k}] Is it directly mentioned that {entity}'s {col.column} is `{raw}'?"


_BLOCK = re.compile(r"^\s*\[(\d+)\]", re.MULTILINE)
_VERDICT = re.compile(r"Answer\s*:\s*(yes|no)\b", re.IGNORECASE)


def parse_verdicts(answer: str) -> dict[int, bool]:
    marks = list(_BLOCK.finditer(answer))
    out: dict[int, bool] = {}
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(answer)
        v = _VERDICT.search(answer, m.end(), end)
        k = int(m.group(1))
        if v and k not in out:
            out[k] = v.group(1).lower() == "yes"
    return out


def self_correct(row: PseudoRow, mention: EntityMention, sub: SubText, ctx: StageContext,
                 variant: str | None = None) -> PseudoRow:
    if not row.cells:
        return row
    columns = {c.role: c for c in pair_columns(ctx.profile, row.target)}
    roles = list(row.cells)
    questions = "\n".join(_question(k, mention.surface, columns[r], row.cells[r])
                          for k, r in enumerate(roles, start=1))
    note = ctx.note
    prompt, answer = ctx.ask("self_correction", {
        "ENTITY": mention.surface,
        "ADMISSION": _fmt(note.admit_time),
        "CHARTTIME": _fmt(note.chart_time),
        "CLINICAL_NOTE": _mention_text(sub, mention),
        "QUESTIONS": questions,
    }, entity=pair_entity(mention, row.target, variant))
    verdicts = parse_verdicts(answer)
    haystack = sub.text.lower()
    kept: dict[ColumnRole, str] = {}
    confirmed: dict[ColumnRole, bool] = {}
    for k, role in enumerate(roles, start=1):
        raw = row.cells[role]
        ok = verdicts.get(k, False) and raw.lower() in haystack
        confirmed[role] = ok
        if ok:
            kept[role] = raw
    out = PseudoRow(row.target, kept, row.evidence_quote, confirmed)
    ctx.audit.add("self_correction", prompt, answer, out.to_json())
    return out


# ---------------------------------------------------------------------------
# stage 7: value reformatting

_ASSIGN = re.compile(r"^[\s\-*•]*([A-Za-z_][A-Za-z0-9_]*)\.([A-Za-z_][A-Za-z0-9_]*)\s*[:=]\s*(.*?)\s*$")


def parse_reformat_answer(answer: str, columns: Sequence[PromptColumn]) -> dict[ColumnRole, str]:
    index = {(c.table.lower(), c.column.lower()): c for c in columns}
    out: dict[ColumnRole, str] = {}
    for raw in answer.splitlines():
        m = _ASSIGN.match(raw)
        if not m:
            continue
        col = index.get((m.group(1).lower(), m.group(2).lower()))
        if col is None or col.role in out:
            continue
        out[col.role] = m.group(3).strip().strip("'\"`")
    return out


def coerce_cell(role: ColumnRole, text: str, note: Note):
    text = text.strip()
    if not text or _is_absent(text):
        return None
    if role in TIME_ROLES:
        return resolve_time_text(text, note.admit_time, note.chart_time)
    if role is ColumnRole.VALUE:
        return _leading_decimal(strip_brackets(text))
    return text


def reformat_values(row: PseudoRow, mention: EntityMention, ctx: StageContext,
                    variant: str | None = None) -> ReformattedRow:
    if not row.cells:
        return ReformattedRow(row.target, {})
    columns = pair_columns(ctx.profile, row.target)
    by_role = {c.role: c for c in columns}
    given = "\n".join(f"- {by_role[r].table}.{by_role[r].name}: {v}" for r, v in row.cells.items())
    schema = "\n".join(f"- {c.table}.{c.name}: {c.role.value}" for c in columns if c.role in row.cells)
    note = ctx.note
    prompt, answer = ctx.ask("value_reformat", {
        "SCHEMA": schema,
        "ADMISSION": _fmt(note.admit_time),
        "CHARTTIME": _fmt(note.chart_time),
        "GIVEN_DATA": given,
    }, entity=pair_entity(mention, row.target, variant))
    answered = parse_reformat_answer(answer, columns)
    cells = {}
    dropped = []
    for role, raw in row.cells.items():
        value = None
        for candidate in (answered.get(role), raw):
            if candidate is not None:
                value = coerce_cell(role, candidate, note)
                if value is not None:
                    break
        if value is None:
            dropped.append(role)
        else:
            cells[role] = value
    out = ReformattedRow(row.target, cells, tuple(dropped))
    ctx.audit.add("value_reformat", prompt, answer, out.to_json(),
                  None if answered else "no Table.COLUMN lines; raw values used")
    return out


def collect_gateway_error(exc: GatewayError) -> str:
    return f"{type(exc).__name__}: {exc}"

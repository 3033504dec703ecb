"""Time windows, the template matrix, plan construction, verification and condition masking."""
from __future__ import annotations

import datetime as dt
import itertools
import logging
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .entities import AnchorKind, EntityMention, EntityType, ReformattedRow, TimeRegime, TimeTag
from .itemsearch import ItemHit
from .notes import Note, NoteCategory
from .plan import (CONDITION_ROLES, DEFAULT_MASKING_ORDER, Condition, QueryPlan, TemplateForm,
                   TimeWindow)
from .schema import ColumnRole, ProfileName, SchemaProfile
from .store import Provenance, RecordStore, RowSet
from .values import as_date

log = logging.getLogger(__name__)


class WindowError(ValueError):
    """The tag cannot be turned into a window (history mention or unresolvable anchor)."""


class NoItem(LookupError):
    """No item hit belongs to the dictionary the table pair draws labels from."""


class NoTemplate(LookupError):
    """The template matrix has no form for this (table, window) combination."""


class Label(str, Enum):
    CONSISTENT = "Consistent"
    INCONSISTENT = "Inconsistent"


# ---------------------------------------------------------------------------
# windows

def _day(d: dt.date, k: int) -> dt.date:
    return d + dt.timedelta(days=k)


def anchor_date(tag: TimeTag, note: Note) -> dt.date:
    a = tag.anchor
    if a is None:
        raise WindowError("tag has no anchor")
    if a.kind is AnchorKind.ADMISSION:
        return note.admit_date
    if a.kind in (AnchorKind.CHART_DATE, AnchorKind.DISCHARGE):
        # the chart date stands in for the discharge date, which notes do not carry
        return note.chart_date
    if a.kind is AnchorKind.YESTERDAY:
        return _day(note.chart_date, -1)
    if a.kind is AnchorKind.HOSPITAL_DAY:
        return _day(note.admit_date, a.day - 1)
    if a.kind is AnchorKind.LITERAL:
        return as_date(a.literal)
    raise WindowError(f"unresolvable anchor {a.kind}")


def compute_window(tag: TimeTag, note: Note) -> TimeWindow:
    if not tag.in_current_stay:
        raise WindowError("mention refers to an earlier stay")
    if tag.regime is TimeRegime.EXACT:
        return TimeWindow.exact_at(tag.anchor.literal)
    if tag.regime is TimeRegime.NARRATIVE:
        d = anchor_date(tag, note)
        form = TemplateForm.ADMISSION if tag.anchor.kind is AnchorKind.ADMISSION else TemplateForm.CALCULATED
        return TimeWindow.day_range(form, d, -1, d, 1)
    if note.category is NoteCategory.DISCHARGE_SUMMARY:
        return TimeWindow.day_range(TemplateForm.ADMISSION_TO_CHART, note.admit_date, 0, note.chart_date, 0)
    return TimeWindow.day_range(TemplateForm.CALCULATED, note.chart_date, -1, note.chart_date, 1)


# ---------------------------------------------------------------------------
# template matrix

_F = TemplateForm
_TIMED4 = (_F.EXACT, _F.ADMISSION, _F.ADMISSION_TO_CHART, _F.CALCULATED)
_TIMED3 = (_F.EXACT, _F.ADMISSION, _F.ADMISSION_TO_CHART)
_UNTIMED = (_F.NO_TIME,)

TEMPLATE_MATRIX: Mapping[ProfileName, Mapping[str, tuple[TemplateForm, ...]]] = {
    ProfileName.MIMIC: {
        "Chartevents": _TIMED4,
        "Labevents": _TIMED4,
        "Inputevents_cv": _TIMED3,
        "Inputevents_mv": _TIMED4,
        "Microbiologyevents": _TIMED3,
        "Outputevents": _TIMED3,
        "Prescriptions": _TIMED4,
        "Procedures_icd": _UNTIMED,
        "Diagnoses_icd": _UNTIMED,
    },
    ProfileName.OMOP: {
        "Measurement": _TIMED4,
        "Drug_exposure": _TIMED4,
        "Condition_occurrence": _UNTIMED,
        "Procedure_occurrence": _UNTIMED,
    },
}


def template_cells(profile: SchemaProfile) -> list[tuple[str, TemplateForm]]:
    matrix = TEMPLATE_MATRIX[profile.name]
    return [(t, f) for t, forms in matrix.items() for f in forms]


def template_for(profile: SchemaProfile, table: str, window: TimeWindow | None) -> TemplateForm:
    name = profile.canonical_table(table)
    forms = TEMPLATE_MATRIX[profile.name].get(name, ())
    if forms == _UNTIMED:
        return _F.NO_TIME
    if window is None or window.form not in forms:
        raise NoTemplate(f"no {window.form.value if window else 'untimed'} template for {name}")
    return window.form


# ---------------------------------------------------------------------------
# plans

def item_labels(hits: Sequence[ItemHit], profile: SchemaProfile, pair: tuple[str, str | None]) -> tuple[str, ...]:
    source = profile.item_source_for(pair)
    out: list[str] = []
    for h in hits:
        if h.dict_table == source and h.label not in out:
            out.append(h.label)
    return tuple(out)


def build_plan(row: ReformattedRow, hits: Sequence[ItemHit], window: TimeWindow | None, note: Note,
               profile: SchemaProfile, entity_type: EntityType = EntityType.TYPE1,
               masking_order: Sequence[str] = DEFAULT_MASKING_ORDER) -> QueryPlan:
    ev = profile.table(row.target[0])
    pair = (ev.name, profile.canonical_table(row.target[1]) if row.target[1] else None)
    labels = item_labels(hits, profile, pair)
    if not labels:
        raise NoItem(f"no item hit in {profile.item_source_for(pair)}")
    form = template_for(profile, ev.name, window)
    plan_window = None if form is _F.NO_TIME else window

    conds: dict[str, Condition] = {}
    for cid, role in CONDITION_ROLES.items():
        if entity_type is EntityType.TYPE2 and role in (ColumnRole.VALUE, ColumnRole.UNIT):
            continue
        col = ev.role_column(role)
        value = row.cells.get(role)
        if col is None or value is None:
            continue
        if role is ColumnRole.VALUE and not isinstance(value, Decimal):
            continue
        conds[cid] = Condition(cid, role, col, value)

    present = set(conds) | ({"time"} if plan_window is not None else set())
    maskable = tuple(m for m in masking_order if m in present)
    ordered = tuple(conds[m] for m in maskable if m in conds)
    return QueryPlan(
        event_table=ev.name,
        dict_table=pair[1],
        admission_key=str(note.admission_key),
        item_labels=labels,
        window=plan_window,
        conditions=ordered,
        maskable=maskable,
        template_id=f"{ev.name.lower()}/{form.value}",
    )


def verify(plan: QueryPlan, store: RecordStore, path: Provenance = Provenance.SQL) -> Label:
    return Label.CONSISTENT if store.execute_plan(plan, path) else Label.INCONSISTENT


def verify_all(plans: Iterable[QueryPlan], store: RecordStore,
               path: Provenance = Provenance.SQL) -> tuple[Label, QueryPlan | None]:
    """All per-value plans must hold; returns the first failing plan too."""
    for p in plans:
        if verify(p, store, path) is Label.INCONSISTENT:
            return Label.INCONSISTENT, p
    return Label.CONSISTENT, None


# ---------------------------------------------------------------------------
# localization

@dataclass
class ErrorAttribution:
    entity: str
    missing: bool
    error_columns: frozenset[tuple[str, str]] = frozenset()
    compound: bool = False
    witness_rows: dict[tuple[str, ...], RowSet] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.missing and self.error_columns:
            raise ValueError("a missing entity has no error columns")

    def to_json(self) -> dict[str, Any]:
        return {
            "entity": self.entity,
            "missing": self.missing,
            "error_columns": [list(c) for c in sorted(self.error_columns)],
            "compound": self.compound,
            "witness_rows": {"+".join(k): sorted(map(str, v.ids)) for k, v in sorted(self.witness_rows.items())},
        }


def condition_columns(plan: QueryPlan, cid: str, profile: SchemaProfile) -> set[tuple[str, str]]:
    ev = profile.table(plan.event_table)
    if cid == "time":
        roles = (ColumnRole.START_TIME, ColumnRole.END_TIME) if ev.is_interval else (ColumnRole.POINT_TIME,)
        return {(ev.name, c) for r in roles for c in ev.role_columns(r)}
    cond = plan.condition(cid)
    return {(ev.name, cond.column)} if cond else set()


def localize(plan: QueryPlan, store: RecordStore, entity: str = "",
             path: Provenance = Provenance.SQL) -> ErrorAttribution:
    """Mask conditions to find which columns disagree.

    Single relaxations come first. When none of them yields rows, the smallest
    subsets that do are reported together as a compound error.
    """
    profile = store.profile
    for size in range(1, len(plan.maskable) + 1):
        witnesses: dict[tuple[str, ...], RowSet] = {}
        for combo in itertools.combinations(plan.maskable, size):
            rows = store.execute_plan(plan.without(combo), path)
            if rows:
                witnesses[combo] = rows
        if witnesses:
            cols: set[tuple[str, str]] = set()
            for combo in witnesses:
                for cid in combo:
                    cols |= condition_columns(plan, cid, profile)
            return ErrorAttribution(entity, False, frozenset(cols), size > 1, witnesses)
    return ErrorAttribution(entity, True)

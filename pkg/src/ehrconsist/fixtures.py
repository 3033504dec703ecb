"""Synthetic MIMIC-shaped databases, notes, scripted answers and gold labels with injected errors.

The generator keeps its own record of every row it writes and of the window each
mention should be checked against, so the gold labels and error columns do not
depend on the pipeline under test.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterable, Sequence

from .evaluator import GoldEntity, GoldRecord
from .gateway import Script
from .itemsearch import ItemIndex, default_lexicon
from .notes import Note, NoteCategory, note_from_record, write_notes
from .schema import (TABLE_COUNTERPARTS, ColumnRole, SchemaMapping, SchemaProfile, UnknownColumnError,
                     default_mapping, load_profile, translate_column)
from .stages import pair_columns
from .store import RecordStore, write_csv
from .values import canonical_decimal, format_datetime

log = logging.getLogger(__name__)


class FixtureError(ValueError):
    """The injection spec cannot be realized."""


ERROR_CLASSES = ("compound", "unit_swap", "value_perturb", "time_shift", "missing")


@dataclass(frozen=True)
class InjectionSpec:
    seed: int = 7
    notes: int = 20
    entities_per_note: int = 10
    time_shift: int = 0
    time_shift_hours: tuple[int, ...] = (1, 96)
    value_perturb: int = 0
    unit_swap: int = 0
    missing_entity: int = 0
    compound: int = 0
    categories: tuple[str, ...] = ("DischargeSummary", "PhysicianNote", "NursingNote")
    extras: bool = True
    distractors: bool = True

    def validate(self) -> "InjectionSpec":
        counts = (self.time_shift, self.value_perturb, self.unit_swap, self.missing_entity, self.compound)
        if min(counts) < 0 or self.notes < 0 or self.entities_per_note < 0:
            raise FixtureError("counts must be >= 0")
        if sum(counts) > self.notes * self.entities_per_note:
            raise FixtureError("more injected errors than entities")
        if self.entities_per_note > len(CATALOG):
            raise FixtureError(f"at most {len(CATALOG)} entities per note")
        if self.time_shift and (not self.time_shift_hours or min(self.time_shift_hours) < 1):
            raise FixtureError("time shifts need positive hour values")
        for c in self.categories:
            NoteCategory.parse(c)
        return self

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["time_shift_hours"] = list(self.time_shift_hours)
        d["categories"] = list(self.categories)
        return d


# ---------------------------------------------------------------------------
# catalog

@dataclass(frozen=True)
class CatalogItem:
    key: str
    surface: str
    label: str
    table: str
    dict_table: str | None
    etype: int
    item_id: Any = None
    unit: str | None = None
    alt_unit: str | None = None
    lo: float = 0.0
    hi: float = 0.0
    decimals: int = 0
    long_title: str | None = None
    specimen: str | None = None
    spec_itemid: int | None = None
    multi: bool = False


def _num(key, surface, label, table, dict_table, item_id, unit, alt, lo, hi, dec=0, multi=False):
    return CatalogItem(key, surface, label, table, dict_table, 1, item_id, unit, alt, lo, hi, dec, multi=multi)


CATALOG: tuple[CatalogItem, ...] = (
    _num("hr", "HR", "Heart Rate", "Chartevents", "D_items", 211, "bpm", "mmHg", 55, 130),
    _num("rr", "RR", "Respiratory Rate", "Chartevents", "D_items", 618, "insp/min", "bpm", 10, 30),
    _num("spo2", "SpO2", "Oxygen Saturation", "Chartevents", "D_items", 646, "%", "mmHg", 88, 100),
    _num("temp", "Temp", "Temperature", "Chartevents", "D_items", 678, "F", "C", 96.5, 102.0, 1),
    _num("bp", "BP", "Blood Pressure", "Chartevents", "D_items", 51, "mmHg", "cmH2O", 95, 160, multi=True),
    _num("hgb", "Hgb", "Hemoglobin", "Labevents", "D_labitems", 51222, "g/dL", "mg/dL", 7.0, 15.5, 1),
    _num("wbc", "WBC", "White Blood Cells", "Labevents", "D_labitems", 51301, "K/uL", "cells/uL", 2.0, 18.0, 1),
    _num("na", "Na", "Sodium", "Labevents", "D_labitems", 50983, "mEq/L", "mmol/L", 128, 148),
    _num("cr", "Cr", "Creatinine", "Labevents", "D_labitems", 50912, "mg/dL", "umol/L", 0.5, 3.5, 1),
    _num("plt", "Plt", "Platelet Count", "Labevents", "D_labitems", 51265, "K/uL", "cells/uL", 90, 450),
    _num("uop", "UOP", "Urine Out Foley", "Outputevents", "D_items", 40055, "mL", "L", 100, 900),
    _num("ns", "NS", "Normal Saline", "Inputevents_cv", "D_items", 30018, "mL", "L", 250, 1000),
    _num("lr", "LR", "Lactated Ringers", "Inputevents_mv", "D_items", 225828, "mL", "L", 250, 1000),
    _num("lasix", "Lasix", "Furosemide", "Prescriptions", None, "Furosemide", "mg", "mL", 20, 80),
    _num("zofran", "Zofran", "Ondansetron", "Prescriptions", None, "Ondansetron", "mg", "mL", 4, 8),
    CatalogItem("tylenol", "Tylenol", "Acetaminophen", "Prescriptions", None, 2, "Acetaminophen"),
    CatalogItem("protonix", "Protonix", "Pantoprazole", "Prescriptions", None, 2, "Pantoprazole"),
    CatalogItem("ecoli", "Escherichia coli", "ESCHERICHIA COLI", "Microbiologyevents", "D_items", 2, 80002,
                specimen="BLOOD CULTURE", spec_itemid=70012),
    CatalogItem("saureus", "Staphylococcus aureus", "STAPHYLOCOCCUS AUREUS", "Microbiologyevents", "D_items", 2,
                80023, specimen="SPUTUM", spec_itemid=70070),
    CatalogItem("htn", "HTN", "Hypertension", "Diagnoses_icd", "D_icd_diagnoses", 2, "4019",
                long_title="Unspecified essential hypertension"),
    CatalogItem("afib", "Afib", "Atrial fibrillation", "Diagnoses_icd", "D_icd_diagnoses", 2, "42731",
                long_title="Atrial fibrillation"),
    CatalogItem("intub", "intubation", "Intubation", "Procedures_icd", "D_icd_procedures", 2, "9604",
                long_title="Insertion of endotracheal tube"),
)

# dictionary entries used only by background rows (or by nothing at all)
FILLER_ITEMS: tuple[tuple[str, int, str, str], ...] = (
    ("D_items", 225664, "Glucose finger stick", "Chartevents"),
    ("D_items", 212, "Heart Rhythm", ""),
    ("D_items", 679, "Temperature Site", ""),
    ("D_labitems", 50931, "Glucose", "Labevents"),
    ("D_labitems", 50902, "Chloride", "Labevents"),
    ("D_labitems", 50882, "Bicarbonate", "Labevents"),
)

_POINT_TABLES = {"Chartevents", "Labevents", "Outputevents", "Inputevents_cv", "Microbiologyevents"}
_INTERVAL_TABLES = {"Inputevents_mv", "Prescriptions"}
_NO_CALCULATED = {"Outputevents", "Inputevents_cv", "Microbiologyevents"}
_ICD_TABLES = {"Diagnoses_icd", "Procedures_icd"}
_DATE_ONLY = {"Prescriptions"}

_FILLER_SENTENCES = (
    "Patient resting comfortably.",
    "Family updated at bedside.",
    "Ambulating with assistance.",
    "Tolerating diet without difficulty.",
    "Pain controlled on current regimen.",
    "Continues to improve clinically.",
)

_REGIME_WEIGHTS = {
    "point": [("exact_dt", 30), ("exact_date", 15), ("admission", 15), ("hd", 10), ("yesterday", 10),
              ("unspecified", 20)],
    "point_nocalc": [("exact_dt", 35), ("exact_date", 20), ("admission", 20), ("unspecified", 25)],
    "interval": [("exact_date", 25), ("admission", 20), ("hd", 15), ("yesterday", 15), ("unspecified", 25)],
}


# ---------------------------------------------------------------------------
# internal entity record

@dataclass
class _Ent:
    note_idx: int
    item: CatalogItem
    regime: str
    values: tuple[str, ...] = ()
    literal: Any = None  # explicit timestamp for exact regimes
    hd_k: int | None = None
    anchor: dt.date | None = None
    lo: dt.date | None = None
    hi: dt.date | None = None
    time: Any = None  # point time, or (start, end)
    text_unit: bool = True
    error: str | None = None
    shift_hours: int = 0
    line: int = 0
    text: str = ""
    time_text: str = ""
    time_raw: str | None = None
    time_reformatted: str | None = None

    @property
    def etype(self) -> int:
        return self.item.etype

    @property
    def table(self) -> str:
        return self.item.table

    @property
    def key(self) -> str:
        base = f"{self.item.surface}@{self.line}"
        return f"{base}={'/'.join(self.values)}" if self.values else base

    @property
    def has_value_cond(self) -> bool:
        return self.etype == 1

    @property
    def has_unit_cond(self) -> bool:
        return self.etype == 1 and self.text_unit and self.item.unit is not None

    @property
    def timed(self) -> bool:
        return self.table not in _ICD_TABLES


@dataclass
class _NoteDraft:
    idx: int
    note_id: str
    category: NoteCategory
    hadm: int
    subject: int
    admit: dt.datetime
    chart: dt.datetime
    ents: list[_Ent] = field(default_factory=list)
    extra_lines: list[tuple[str, str]] = field(default_factory=list)  # (kind, text)
    lines: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# generation

def _fmt_value(x: float, decimals: int) -> str:
    return canonical_decimal(Decimal(f"{x:.{decimals}f}"))


def _random_value(rng: random.Random, item: CatalogItem, lo=None, hi=None) -> str:
    lo = item.lo if lo is None else lo
    hi = item.hi if hi is None else hi
    return _fmt_value(rng.uniform(lo, hi), item.decimals)


def _pick_regime(rng: random.Random, item: CatalogItem, cat: NoteCategory) -> str:
    if item.table in _ICD_TABLES:
        return "unspecified"
    if item.table in _INTERVAL_TABLES:
        opts = _REGIME_WEIGHTS["interval"]
    elif item.table in _NO_CALCULATED:
        opts = _REGIME_WEIGHTS["point_nocalc"]
        if cat is not NoteCategory.DISCHARGE_SUMMARY:
            opts = [o for o in opts if o[0] != "unspecified"]
    else:
        opts = _REGIME_WEIGHTS["point"]
    if cat is NoteCategory.DISCHARGE_SUMMARY:
        opts = [o for o in opts if o[0] != "yesterday"]
    names, weights = zip(*opts)
    return rng.choices(names, weights)[0]


def _days(lo: dt.date, hi: dt.date) -> list[dt.date]:
    return [lo + dt.timedelta(days=i) for i in range((hi - lo).days + 1)]


def _clock(rng: random.Random) -> dt.time:
    return dt.time(rng.randrange(0, 24), rng.randrange(0, 60), 0)


def _plan_time(rng: random.Random, e: _Ent, d: _NoteDraft) -> None:
    """Choose the window (own arithmetic), the text phrase and the true row time."""
    A, C = d.admit.date(), d.chart.date()
    one = dt.timedelta(days=1)
    first_day = A if d.category is NoteCategory.DISCHARGE_SUMMARY else max(A, C - 2 * one)
    if e.regime in ("exact_dt", "exact_date"):
        day = rng.choice(_days(first_day, C))
        if e.regime == "exact_dt":
            e.literal = dt.datetime.combine(day, _clock(rng))
            e.time_text = e.literal.strftime("%Y-%m-%d %H:%M")
            e.time_reformatted = format_datetime(e.literal)
        else:
            e.literal = day
            e.time_text = day.isoformat()
            e.time_reformatted = day.isoformat()
        e.lo = e.hi = day
        e.time_raw = e.time_text
    elif e.regime == "admission":
        e.anchor = A
        e.lo, e.hi = A - one, A + one
        e.time_text, e.time_raw, e.time_reformatted = "admission", "admission", A.isoformat()
    elif e.regime == "hd":
        e.hd_k = rng.randint(2, (C - A).days + 1)
        e.anchor = A + (e.hd_k - 1) * one
        e.lo, e.hi = e.anchor - one, e.anchor + one
        e.time_text = e.time_raw = f"HD #{e.hd_k}"
        e.time_reformatted = e.anchor.isoformat()
    elif e.regime == "yesterday":
        e.anchor = C - one
        e.lo, e.hi = e.anchor - one, e.anchor + one
        e.time_text = e.time_raw = "yesterday"
        e.time_reformatted = e.anchor.isoformat()
    else:
        if d.category is NoteCategory.DISCHARGE_SUMMARY:
            e.lo, e.hi = A, C
        else:
            e.lo, e.hi = C - one, C + one
    if not e.timed:
        return
    date_only = e.table in _DATE_ONLY
    inside = _days(max(e.lo, A), e.hi)
    if e.table in _INTERVAL_TABLES:
        if e.regime == "exact_date":
            s = e.literal - dt.timedelta(days=rng.randint(0, 1))
            t_end = e.literal + dt.timedelta(days=rng.randint(0, 2))
        else:
            s = rng.choice(inside)
            t_end = s + dt.timedelta(days=rng.randint(0, 3))
        if not date_only:
            s = dt.datetime.combine(s, _clock(rng))
            t_end = dt.datetime.combine(t_end, dt.time(23, 59, 0))
        e.time = (s, t_end)
    elif e.regime == "exact_dt":
        e.time = e.literal
    else:
        e.time = dt.datetime.combine(e.literal if e.regime == "exact_date" else rng.choice(inside), _clock(rng))


def _as_day(v) -> dt.date:
    return v.date() if isinstance(v, dt.datetime) else v


def _in_window(e: _Ent, t) -> bool:
    if e.table in _INTERVAL_TABLES:
        s, f = t
        return not (_as_day(f) < e.lo or _as_day(s) > e.hi)
    if e.regime == "exact_dt":
        return t == e.literal
    return e.lo <= _as_day(t) <= e.hi


def _shift(e: _Ent, hours: int):
    delta = dt.timedelta(hours=hours)
    if e.table in _DATE_ONLY:
        if hours % 24:
            return None
        delta = dt.timedelta(days=hours // 24)
    if e.table in _INTERVAL_TABLES:
        return (e.time[0] + delta, e.time[1] + delta)
    return e.time + delta


def _outside_time(rng: random.Random, e: _Ent):
    out_day = e.hi + dt.timedelta(days=3)
    if e.table in _INTERVAL_TABLES:
        if e.table in _DATE_ONLY:
            return (out_day, out_day + dt.timedelta(days=1))
        return (dt.datetime.combine(out_day, _clock(rng)), dt.datetime.combine(out_day, dt.time(23, 0)))
    if e.regime == "exact_dt":
        return e.literal + dt.timedelta(days=3)
    return dt.datetime.combine(out_day, _clock(rng))


def _eligible(e: _Ent, cls: str, hours: int = 0) -> bool:
    if e.error is not None:
        return False
    if cls == "missing":
        return True
    if cls == "time_shift":
        if not e.timed:
            return False
        moved = _shift(e, hours)
        return moved is not None and not _in_window(e, moved)
    if cls in ("value_perturb",):
        return e.has_value_cond
    if cls in ("unit_swap", "compound"):
        return e.has_value_cond and e.has_unit_cond and not e.item.multi
    raise ValueError(cls)


class _Rows:
    """Typed rows per table with running primary keys."""

    def __init__(self, profile: SchemaProfile) -> None:
        self.profile = profile
        self.tables: dict[str, list[dict]] = {t.name: [] for t in profile.tables}
        self._next: dict[str, int] = {}

    def add(self, table: str, **cells) -> dict:
        spec = self.profile.table(table)
        pk = spec.primary_key
        if pk and pk not in cells:
            self._next[table] = self._next.get(table, 0) + 1
            cells[pk] = self._next[table]
        row = {c: cells.get(c) for c in spec.column_names}
        self.tables[spec.name].append(row)
        return row


def _perturbed(rng: random.Random, item: CatalogItem, value: str, avoid: set[str]) -> str:
    step = Decimal(1).scaleb(-item.decimals)
    base = Decimal(value)
    for _ in range(200):
        k = rng.randint(3, 15) * rng.choice((1, -1))
        cand = canonical_decimal(base + k * step)
        if Decimal(cand) > 0 and cand not in avoid:
            return cand
    raise FixtureError(f"cannot perturb {item.key} away from {sorted(avoid)}")


def _time_cells(e: _Ent, t) -> dict[str, Any]:
    spec_cols = {"Chartevents": ("charttime",), "Labevents": ("charttime",), "Outputevents": ("charttime",),
                 "Inputevents_cv": ("charttime",), "Microbiologyevents": ("charttime",),
                 "Inputevents_mv": ("starttime", "endtime"), "Prescriptions": ("startdate", "enddate")}
    cols = spec_cols.get(e.table, ())
    if len(cols) == 2:
        return {cols[0]: t[0], cols[1]: t[1]}
    if cols:
        return {cols[0]: t}
    return {}


def _event_row(rows: _Rows, d: _NoteDraft, e: _Ent, t, value: str | None, unit: str | None) -> None:
    it = e.item
    base = {"subject_id": d.subject, "hadm_id": d.hadm, **_time_cells(e, t)}
    num = Decimal(value) if value is not None else None
    if e.table in ("Chartevents", "Labevents", "Outputevents"):
        rows.add(e.table, itemid=it.item_id, valuenum=num, valueuom=unit, **base)
    elif e.table in ("Inputevents_cv", "Inputevents_mv"):
        rows.add(e.table, itemid=it.item_id, amount=num, amountuom=unit, **base)
    elif e.table == "Prescriptions":
        rows.add(e.table, drug=it.label, dose_val_rx=num, dose_unit_rx=unit, **base)
    elif e.table == "Microbiologyevents":
        rows.add(e.table, spec_itemid=it.spec_itemid, spec_type_desc=it.specimen, org_itemid=it.item_id,
                 org_name=it.label, **base)
    else:
        rows.add(e.table, seq_num=1, icd9_code=it.item_id, **base)


def _error_columns(e: _Ent, profile: SchemaProfile) -> list[tuple[str, str]]:
    spec = profile.table(e.table)
    if e.error == "value_perturb":
        return [(spec.name, spec.role_column(ColumnRole.VALUE))]
    if e.error == "unit_swap":
        return [(spec.name, spec.role_column(ColumnRole.UNIT))]
    if e.error == "compound":
        return sorted([(spec.name, spec.role_column(ColumnRole.VALUE)), (spec.name, spec.role_column(ColumnRole.UNIT))])
    if e.error == "time_shift":
        if spec.is_interval:
            return sorted((spec.name, spec.role_column(r)) for r in (ColumnRole.START_TIME, ColumnRole.END_TIME))
        return [(spec.name, spec.role_column(ColumnRole.POINT_TIME))]
    return []


def _write_rows(rng: random.Random, rows: _Rows, d: _NoteDraft, spec: InjectionSpec) -> None:
    for e in d.ents:
        if e.error == "missing":
            continue
        values = list(e.values) or [None]
        unit = e.item.unit if e.etype == 1 else None
        t = e.time
        if e.error == "time_shift":
            t = _shift(e, e.shift_hours)
        for i, v in enumerate(values):
            row_value, row_unit = v, unit
            if i == 0 and e.error in ("value_perturb", "compound"):
                row_value = _perturbed(rng, e.item, v, set(values))
            if e.error in ("unit_swap", "compound"):
                row_unit = e.item.alt_unit
            _event_row(rows, d, e, t, row_value, row_unit)
        if spec.distractors and e.timed and e.error in (None, "value_perturb", "unit_swap", "time_shift"):
            avoid = set(values) | {v for v in values if v}
            dv = None
            if e.etype == 1:
                dv = _perturbed(rng, e.item, values[0], avoid | {"0"})
            _event_row(rows, d, e, _outside_time(rng, e), dv, unit)
    # background rows for filler items
    for table_dict, item_id, _label, event_table in FILLER_ITEMS:
        if not event_table:
            continue
        for _ in range(rng.randint(1, 3)):
            day = rng.choice(_days(d.admit.date(), d.chart.date()))
            rows.add(event_table, subject_id=d.subject, hadm_id=d.hadm, itemid=item_id,
                     charttime=dt.datetime.combine(day, _clock(rng)),
                     valuenum=Decimal(rng.randint(80, 180)), valueuom="mg/dL")


def _entity_line(e: _Ent) -> str:
    it = e.item
    if it.table in _ICD_TABLES:
        return {"Diagnoses_icd": f"Assessment includes {it.surface}.",
                "Procedures_icd": f"Underwent {it.surface} without complication."}[it.table]
    phrase = {"exact_dt": f"at {e.time_text}", "exact_date": f"on {e.time_text}",
              "admission": "on admission", "hd": f"on {e.time_text}", "yesterday": "yesterday",
              "unspecified": ""}[e.regime]
    if it.table == "Microbiologyevents":
        spec = it.specimen.capitalize()
        return " ".join(x for x in (f"{spec} grew {it.surface}", phrase) if x) + "."
    if it.table == "Prescriptions" and e.etype == 2:
        return " ".join(x for x in (f"{it.surface} given", phrase) if x) + "."
    val = "/".join(e.values)
    unit = f" {it.unit}" if e.text_unit and it.unit else ""
    return " ".join(x for x in (f"{it.surface} {val}{unit}", phrase) if x) + "."


def _draft_notes(rng: random.Random, spec: InjectionSpec) -> list[_NoteDraft]:
    drafts = []
    for i in range(spec.notes):
        cat = NoteCategory.parse(spec.categories[i % len(spec.categories)])
        admit = dt.datetime.combine(dt.date(2150, 1, 1) + dt.timedelta(days=rng.randint(0, 40 * 365)),
                                    _clock(rng))
        los = rng.randint(5, 12)
        if cat is NoteCategory.DISCHARGE_SUMMARY:
            chart = dt.datetime.combine(admit.date() + dt.timedelta(days=los), dt.time(14, 0))
        else:
            chart = dt.datetime.combine(admit.date() + dt.timedelta(days=rng.randint(3, los - 1)),
                                        dt.time(rng.randint(6, 20), 0))
        d = _NoteDraft(i, f"N{i + 1:04d}", cat, 100001 + i, 30001 + i, admit, chart)
        for item in sorted(rng.sample(CATALOG, spec.entities_per_note), key=lambda x: x.key):
            e = _Ent(i, item, _pick_regime(rng, item, cat))
            if item.etype == 1:
                if item.multi:
                    e.values = (_random_value(rng, item), _random_value(rng, item, 50, 94))
                else:
                    e.values = (_random_value(rng, item),)
                e.text_unit = rng.random() > 0.2
            _plan_time(rng, e, d)
            d.ents.append(e)
        drafts.append(d)
    return drafts


def _assign_errors(rng: random.Random, drafts: list[_NoteDraft], spec: InjectionSpec) -> None:
    ents = [e for d in drafts for e in d.ents]
    plan = [("compound", spec.compound, 0), ("unit_swap", spec.unit_swap, 0),
            ("value_perturb", spec.value_perturb, 0)]
    for cls, count, _ in plan:
        for _ in range(count):
            pool = [e for e in ents if _eligible(e, cls)]
            if not pool:
                raise FixtureError(f"not enough entities eligible for {cls}")
            rng.choice(pool).error = cls
    for j in range(spec.time_shift):
        hours = spec.time_shift_hours[j % len(spec.time_shift_hours)]
        pool = [e for e in ents if _eligible(e, "time_shift", hours)]
        if not pool:
            raise FixtureError(f"no entity can take a {hours}h time shift")
        e = rng.choice(pool)
        e.error, e.shift_hours = "time_shift", hours
    for _ in range(spec.missing_entity):
        pool = [e for e in ents if _eligible(e, "missing")]
        if not pool:
            raise FixtureError("not enough entities eligible for missing")
        rng.choice(pool).error = "missing"


def _layout(rng: random.Random, d: _NoteDraft, spec: InjectionSpec) -> None:
    A, C = d.admit.date(), d.chart.date()
    lines: list[tuple[str, Any]] = []
    if d.category is NoteCategory.DISCHARGE_SUMMARY:
        lines.append(("text", f"Admission Date {A.isoformat()} Discharge Date {C.isoformat()}"))
    else:
        lines.append(("text", f"{d.category.value} written {C.isoformat()}"))
    if spec.extras:
        lines += [("text", "Past Medical History:"), ("pmh", "CHF with reduced ejection fraction."),
                  ("text", "Hospital Course:")]
    body: list[tuple[str, Any]] = [("ent", e) for e in d.ents]
    body += [("text", s) for s in rng.sample(_FILLER_SENTENCES, 3)]
    if spec.extras:
        body.append(("history", f"Hct 30.1 during a prior admission at an outside hospital."))
        body.append(("type3", "heart rhythm irregular on exam."))
    rng.shuffle(body)
    lines += body
    for n, (kind, obj) in enumerate(lines, start=1):
        if kind == "ent":
            obj.line = n
            obj.text = _entity_line(obj)
            d.lines.append(obj.text)
        else:
            d.lines.append(obj)
            if kind in ("history", "type3", "pmh"):
                d.extra_lines.append((kind, f"{n}"))


def _check_surfaces(d: _NoteDraft) -> None:
    import re

    kept = [(i + 1, t) for i, t in enumerate(d.lines)]
    for e in d.ents:
        pat = re.compile(r"(?<![A-Za-z0-9])" + re.escape(e.item.surface) + r"(?![A-Za-z0-9])", re.IGNORECASE)
        where = [n for n, t in kept if pat.search(t)]
        if where != [e.line]:
            raise FixtureError(f"surface {e.item.surface!r} appears on lines {where} in {d.note_id}")


# ---------------------------------------------------------------------------
# dictionaries

def _dictionary_rows(rows: _Rows) -> None:
    for it in CATALOG:
        if it.table in _ICD_TABLES:
            rows.add(it.dict_table, icd9_code=it.item_id, short_title=it.label, long_title=it.long_title)
        elif it.dict_table is not None:
            rows.add(it.dict_table, itemid=it.item_id, label=it.label)
            if it.spec_itemid is not None:
                rows.add(it.dict_table, itemid=it.spec_itemid, label=it.specimen)
    for table, item_id, label, _ev in FILLER_ITEMS:
        rows.add(table, itemid=item_id, label=label)


def _check_collisions(store: RecordStore, profile: SchemaProfile, used: set[str]) -> None:
    """A used catalog surface must find its own label and no other label with rows in its event table."""
    index = ItemIndex.build(store)
    lex = default_lexicon()
    own = {it.key: {it.label} | ({it.long_title} if it.long_title else set()) for it in CATALOG}
    live: dict[str, set[str]] = {}
    for it in CATALOG:
        live.setdefault(it.table, set()).add(it.label)
        if it.specimen:
            live[it.table].add(it.specimen)
    for _t, _i, lab, ev in FILLER_ITEMS:
        if ev:
            live.setdefault(ev, set()).add(lab)
    for it in CATALOG:
        if it.key not in used:
            continue
        labels = {h.label for h in index.search(it.surface, lex)}
        if not own[it.key] & labels:
            raise FixtureError(f"item search misses {it.label!r} for {it.surface!r}")
        clash = (labels & live[it.table]) - own[it.key]
        if clash:
            raise FixtureError(f"{it.surface!r} also retrieves {sorted(clash)}")


# ---------------------------------------------------------------------------
# scripted answers

def _cells(e: _Ent, value: str | None) -> tuple[dict[ColumnRole, str], dict[ColumnRole, str], set[ColumnRole]]:
    """(raw cells, reformatted cells, roles the self-check rejects) for one pseudo row."""
    it = e.item
    raw: dict[ColumnRole, str] = {ColumnRole.LABEL: it.surface}
    ref: dict[ColumnRole, str] = {ColumnRole.LABEL: it.label}
    rejected: set[ColumnRole] = set()
    if e.time_raw is not None:
        role = ColumnRole.START_TIME if it.table in _INTERVAL_TABLES else ColumnRole.POINT_TIME
        raw[role] = e.time_raw
        ref[role] = e.time_reformatted
    if value is not None:
        raw[ColumnRole.VALUE] = value
        ref[ColumnRole.VALUE] = value
    if it.unit and e.etype == 1:
        if e.text_unit:
            raw[ColumnRole.UNIT] = ref[ColumnRole.UNIT] = it.unit
        else:
            raw[ColumnRole.UNIT] = ref[ColumnRole.UNIT] = it.alt_unit  # not in the text
            rejected.add(ColumnRole.UNIT)
    if it.table == "Microbiologyevents":
        raw[ColumnRole.ORGANISM] = it.surface
        ref[ColumnRole.ORGANISM] = it.label
        raw[ColumnRole.SPECIMEN] = it.specimen.capitalize()
        ref[ColumnRole.SPECIMEN] = it.specimen
    return raw, ref, rejected


def _ordered_roles(cols, cells) -> list:
    seen, out = set(), []
    for c in cols:
        if c.role in cells and c.role not in seen:
            seen.add(c.role)
            out.append(c)
    return out


def _pair_for(profile: SchemaProfile, table: str) -> tuple[str, str | None]:
    if profile.has_table(table):
        return profile.pair_for(table)
    return profile.pair_for(TABLE_COUNTERPARTS[table])


def _script_entity(script: Script, note_id: str, e: _Ent, profile: SchemaProfile) -> None:
    it = e.item
    if e.regime in ("exact_dt", "exact_date"):
        choice, time_text = "Directly written in the format yyyy-mm-dd", e.time_text
    elif e.regime in ("admission", "hd", "yesterday"):
        choice, time_text = "Inferable Time stamp from Narrative", e.time_text
    else:
        choice, time_text = "Indeterminate Time stamp", "NaN"
    script.add("time_filter", note_id, e.key,
               f"[Answer 1] Yes, this belongs to the current admission.\n"
               f"[Answer 2] Note: \"{e.text}\" Time: '{time_text}'\n[Answer 3] {choice}")
    pair = _pair_for(profile, it.table)
    script.add("table_identification", note_id, e.key,
               "Reasoning omitted.\nSelected-Table: [{" + ", ".join(p.lower() for p in pair if p) + "}]")
    cols = pair_columns(profile, pair)
    values = list(e.values) or [None]
    multi = len(values) > 1
    rows_txt = []
    for i, v in enumerate(values, start=1):
        raw, _ref, _rej = _cells(e, v)
        by_role_seen: set = set()
        parts = []
        for c in cols:
            val = raw.get(c.role) if c.role not in by_role_seen else None
            by_role_seen.add(c.role)
            parts.append(f"{c.name}: {val if val is not None else 'NaN'}")
        rows_txt.append(f"Mentioned [{i}]. " + ", ".join(parts))
    entity_pair = f"{e.key}#{pair[0]}"
    script.add("pseudo_table", note_id, entity_pair,
               f"[Answer in step 1]: {e.text}\n" + "\n".join(rows_txt))
    for v in values:
        raw, ref, rejected = _cells(e, v)
        present = _ordered_roles(cols, raw)
        blocks = []
        for k, c in enumerate(present, start=1):
            verdict = "No. The text does not state it." if c.role in rejected else "Yes. Stated in the text."
            blocks.append(f"[{k}] Evidence quote: \"{e.text}\"\nAnswer: {verdict}")
        suffix = f"~{v}" if multi else ""
        script.add("self_correction", note_id, entity_pair + suffix, "\n".join(blocks))
        lines = [f"{c.table}.{c.name}: {ref[c.role]}" for c in present if c.role not in rejected]
        script.add("value_reformat", note_id, entity_pair + suffix, "\n".join(lines))


def _ner_answer(d: _NoteDraft) -> str:
    items = []
    for e in sorted(d.ents, key=lambda x: x.line):
        if e.etype == 1:
            items.append(f"{e.item.surface} - category 1 (numeric value: {'/'.join(e.values)})")
        else:
            items.append(f"{e.item.surface} - category 2")
    for kind, _n in d.extra_lines:
        if kind == "pmh":
            items.append("CHF - category 2")
        elif kind == "history":
            items.append("Hct - category 1 (numeric value: 30.1)")
        elif kind == "type3":
            items.append("heart rhythm - category 3 (qualitative assessments or descriptions: irregular)")
    return "Answer: " + ", ".join(items) if items else "Answer: Nothing"


def _build_script(drafts: Sequence[_NoteDraft], profile: SchemaProfile) -> Script:
    script = Script()
    for d in drafts:
        script.add("ner", d.note_id, "*", _ner_answer(d))
        for kind, n in d.extra_lines:
            if kind == "history":
                script.add("time_filter", d.note_id, f"Hct@{n}=30.1",
                           "[Answer 1] No, this refers to a previous admission.\n"
                           "[Answer 2] Note: \"prior admission\" Time: 'NaN'\n[Answer 3] Indeterminate Time stamp")
        for e in d.ents:
            _script_entity(script, d.note_id, e, profile)
    return script


# ---------------------------------------------------------------------------
# OMOP migration

def migrate_to_omop(tables: dict[str, list[dict]], mapping: SchemaMapping | None = None,
                    profile: SchemaProfile | None = None) -> dict[str, list[dict]]:
    """Move MIMIC-shaped rows into OMOP tables using only the column mapping."""
    mapping = mapping or default_mapping()
    profile = profile or load_profile("omop")
    mimic = load_profile("mimic")
    out = _Rows(profile)
    concept: dict[tuple[str, Any], int] = {}

    def concept_id(source: str, key: Any, name: str, domain: str) -> int:
        k = (source, key)
        if k not in concept:
            row = out.add("Concept", concept_name=name, domain_id=domain)
            concept[k] = row["concept_id"]
        return concept[k]

    domains = {"D_items": "Measurement", "D_labitems": "Measurement", "D_icd_diagnoses": "Condition",
               "D_icd_procedures": "Procedure"}
    for dname, domain in domains.items():
        spec = mimic.table(dname)
        key_col = spec.role_column(ColumnRole.ITEM_KEY)
        name_col = spec.role_columns(ColumnRole.LABEL)[0]
        for r in tables.get(dname, ()):
            concept_id(dname, r[key_col], r[name_col], domain)
    for r in tables.get("Prescriptions", ()):
        concept_id("Prescriptions", r["drug"], r["drug"], "Drug")

    item_dict = {j.child_table: j.dict_table for j in mimic.joins if j.alias is None}
    item_dict["Microbiologyevents"] = "D_items"
    for ev in mimic.event_tables:
        target = TABLE_COUNTERPARTS.get(ev.name)
        if target is None:
            continue
        tspec = profile.table(target)
        key_col = ev.role_column(ColumnRole.ITEM_KEY)
        dict_name = "Prescriptions" if ev.name == "Prescriptions" else item_dict[ev.name]
        for r in tables.get(ev.name, ()):
            cells: dict[str, Any] = {
                tspec.role_column(ColumnRole.SUBJECT_KEY): r[ev.role_column(ColumnRole.SUBJECT_KEY)],
                tspec.role_column(ColumnRole.ADMISSION_KEY): r[ev.role_column(ColumnRole.ADMISSION_KEY)],
                tspec.role_column(ColumnRole.ITEM_KEY): concept[(dict_name, r[key_col])],
            }
            for col in ev.column_names:
                try:
                    targets = translate_column(mapping, (ev.name, col))
                except UnknownColumnError:
                    continue
                for t_table, t_col in targets:
                    if t_table == tspec.name and t_col not in cells:
                        cells[t_col] = r[col]
            out.add(tspec.name, **cells)
    return out.tables


def omop_survives(e: _Ent, mapping: SchemaMapping | None = None) -> bool:
    """Whether every condition of the mention's plan has a counterpart on the OMOP event table."""
    mapping = mapping or default_mapping()
    mimic = load_profile("mimic")
    ev = mimic.table(e.table)
    target = TABLE_COUNTERPARTS[ev.name]
    omop = load_profile("omop").table(target)
    roles = []
    if e.timed:
        roles += [r for r in (ColumnRole.POINT_TIME, ColumnRole.START_TIME, ColumnRole.END_TIME) if ev.has_role(r)]
    if e.has_value_cond and ev.has_role(ColumnRole.VALUE):
        roles.append(ColumnRole.VALUE)
    if e.has_unit_cond and ev.has_role(ColumnRole.UNIT):
        roles.append(ColumnRole.UNIT)
    for r in (ColumnRole.ORGANISM, ColumnRole.SPECIMEN):
        if ev.has_role(r):
            roles.append(r)
    for r in roles:
        col = ev.role_column(r)
        hits = [(t, c) for t, c in translate_column(mapping, (ev.name, col)) if t == omop.name]
        if not hits:
            return False
        if e.regime == "exact_dt" and r is ColumnRole.POINT_TIME:
            if not any(omop.role_of(c) is ColumnRole.POINT_TIME for _, c in hits):
                return False
    return True


# ---------------------------------------------------------------------------
# result

@dataclass
class FixtureSet:
    spec: InjectionSpec
    tables: dict[str, list[dict]]
    notes: list[Note]
    script: Script
    gold: list[GoldRecord]
    omop_tables: dict[str, list[dict]]
    omop_script: Script
    omop_gold: list[GoldRecord]
    ledger: list[dict[str, Any]]

    def store(self, profile: str = "mimic") -> RecordStore:
        prof = load_profile(profile)
        st = RecordStore(prof)
        data = self.tables if prof.name.value == "mimic" else self.omop_tables
        for t, rows in data.items():
            st.ingest_rows(t, rows)
        return st.freeze()

    @property
    def entity_count(self) -> int:
        return sum(1 for g in self.gold for e in g.entities if e.entity_type != 3)

    @property
    def injected_count(self) -> int:
        return sum(1 for r in self.ledger if r["error"])

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        for prof, tables, script, gold in (("mimic", self.tables, self.script, self.gold),
                                           ("omop", self.omop_tables, self.omop_script, self.omop_gold)):
            spec = load_profile(prof)
            db = out / prof / "db"
            db.mkdir(parents=True, exist_ok=True)
            for t in spec.tables:
                write_csv(db / f"{t.name}.csv", t.column_names, tables[t.name])
            script.dump(out / prof / "script.json")
            gdir = out / prof / "gold"
            gdir.mkdir(parents=True, exist_ok=True)
            for g in gold:
                (gdir / f"{g.note_id}.json").write_text(json.dumps(g.to_json(), indent=1) + "\n", encoding="utf-8")
        write_notes(out / "notes.jsonl", self.notes)
        (out / "fixture.json").write_text(
            json.dumps({"spec": self.spec.to_json(), "entities": self.ledger}, indent=1) + "\n", encoding="utf-8")
        return out


def _gold_entity(e: _Ent, cols: list[tuple[str, str]]) -> GoldEntity:
    label = "Consistent" if e.error is None else "Inconsistent"
    missing = e.error == "missing"
    return GoldEntity(e.item.surface, e.etype, e.line, label, 0 if e.error is None else max(1, len(cols)),
                      tuple(cols), "/".join(e.values) or None, missing)


def _translate_cols(cols: Iterable[tuple[str, str]], mapping: SchemaMapping) -> list[tuple[str, str]]:
    out = set()
    for t, c in cols:
        target = TABLE_COUNTERPARTS[t]
        out |= {x for x in translate_column(mapping, (t, c)) if x[0] == target}
    return sorted(out)


def generate(spec: InjectionSpec, profile: str | SchemaProfile = "mimic") -> FixtureSet:
    """Build a corpus, its databases (MIMIC and the OMOP twin), scripts and gold labels."""
    spec.validate()
    prof = load_profile(profile) if isinstance(profile, str) else profile
    if prof.name.value != "mimic":
        raise FixtureError("fixtures are generated in the MIMIC shape and migrated to OMOP")
    rng = random.Random(spec.seed)
    drafts = _draft_notes(rng, spec)
    _assign_errors(rng, drafts, spec)
    rows = _Rows(prof)
    _dictionary_rows(rows)
    for d in drafts:
        _layout(rng, d, spec)
        _check_surfaces(d)
        _write_rows(rng, rows, d, spec)

    probe = RecordStore(prof)
    for t, rs in rows.tables.items():
        probe.ingest_rows(t, rs)
    _check_collisions(probe.freeze(), prof, {e.item.key for d in drafts for e in d.ents})
    probe.close()

    notes = [note_from_record({"noteId": d.note_id, "category": d.category.value, "hadm_id": str(d.hadm),
                               "admittime": format_datetime(d.admit), "charttime": format_datetime(d.chart),
                               "text": "\n".join(d.lines)}) for d in drafts]
    mapping = default_mapping()
    omop = load_profile("omop")
    gold, omop_gold, ledger = [], [], []
    for d in drafts:
        ents, omop_ents = [], []
        for e in sorted(d.ents, key=lambda x: x.line):
            cols = _error_columns(e, prof)
            ge = _gold_entity(e, cols)
            ents.append(ge)
            survives = omop_survives(e, mapping)
            if survives:
                omop_ents.append(GoldEntity(ge.surface, ge.entity_type, ge.line, ge.label, ge.errors,
                                            tuple(_translate_cols(cols, mapping)), ge.value, ge.missing))
            ledger.append({"note": d.note_id, "key": e.key, "table": e.table, "regime": e.regime,
                           "error": e.error, "shift_hours": e.shift_hours or None,
                           "error_columns": [f"{t}.{c}" for t, c in cols], "omop_survives": survives})
        if spec.extras:
            line = next(int(n) for k, n in d.extra_lines if k == "type3")
            extra = GoldEntity("heart rhythm", 3, line, "Unverifiable")
            ents.append(extra)
            omop_ents.append(extra)
        gold.append(GoldRecord(d.note_id, d.category.value, tuple(ents)))
        omop_gold.append(GoldRecord(d.note_id, d.category.value, tuple(omop_ents)))
    return FixtureSet(spec, rows.tables, notes, _build_script(drafts, prof), gold,
                      migrate_to_omop(rows.tables, mapping, omop), _build_script(drafts, omop), omop_gold, ledger)

"""Random stores and plans shared by the property and acceptance tests."""
from __future__ import annotations

import datetime as dt
import random
from decimal import Decimal

from ehrconsist.notes import Note, NoteCategory
from ehrconsist.plan import CONDITION_ROLES, Condition, QueryPlan, TemplateForm, TimeWindow
from ehrconsist.query import template_cells
from ehrconsist.schema import ColumnRole, SchemaProfile
from ehrconsist.store import RecordStore
from ehrconsist.values import ValueKind

BASE = dt.date(2150, 3, 1)
HADMS = (100, 101, 102, 103)
LABELS = ("Heart Rate", "heart rate", "Hemoglobin", "Sodium", "Lasix", "Furosemide",
          "Urine Out Foley", "BLOOD CULTURE", "Escherichia coli", "Hypertension")
UNITS = ("mg", "MG", "mmHg", "bpm", "g/dL", "mL")
TEXTS = ("SPUTUM", "sputum", "BLOOD", "Staph aureus", "E. coli")
VALUES = ("1", "1.0", "1.00", "2.5", "80", "120", "-3", "0.5")


def random_time(rng: random.Random, days: int = 12):
    day = BASE + dt.timedelta(days=rng.randrange(days))
    if rng.random() < 0.25:
        return day
    return dt.datetime.combine(day, dt.time(rng.randrange(24), rng.choice((0, 0, 15, 30)), rng.choice((0, 0, 7))))


def _dict_keys(profile: SchemaProfile) -> dict[str, list]:
    return {t.name: [] for t in profile.dictionary_tables}


def build_random_store(profile: SchemaProfile, rng: random.Random, n_rows: int,
                       dict_size: int = 12) -> RecordStore:
    """Dictionaries with clashing labels plus ``n_rows`` event rows spread over every event table."""
    store = RecordStore(profile)
    keys = _dict_keys(profile)
    for t in profile.dictionary_tables:
        rows = []
        key_col = t.role_column(ColumnRole.ITEM_KEY)
        for i in range(dict_size):
            row = {}
            for col, kind in t.columns:
                if col == key_col:
                    row[col] = i + 1 if kind is ValueKind.INTEGER else f"K{i + 1}"
                elif t.role_of(col) is ColumnRole.LABEL or kind is ValueKind.TEXT:
                    row[col] = rng.choice(LABELS)
                elif kind is ValueKind.INTEGER:
                    row[col] = i + 1
            rows.append(row)
        keys[t.name] = [r[key_col] for r in rows]
        store.ingest_rows(t.name, rows)

    events = [t for t in profile.event_tables if t.has_role(ColumnRole.ADMISSION_KEY)]
    pk = 0
    for i in range(n_rows):
        t = events[i % len(events)]
        pk += 1
        store.ingest_rows(t.name, [random_event_row(profile, t, rng, keys, pk)])
    return store.freeze()


def random_event_row(profile, t, rng, keys, pk):
    join_cols = {j.child_column: j.dict_table for j in profile.joins_for(t.name)}
    row = {}
    start = None
    for col, kind in t.columns:
        role = t.role_of(col)
        if col == t.primary_key:
            row[col] = pk
        elif role is ColumnRole.ADMISSION_KEY:
            row[col] = rng.choice(HADMS)
        elif col in join_cols:
            pool = keys[join_cols[col]]
            row[col] = rng.choice(pool) if rng.random() < 0.95 else None
        elif role is ColumnRole.START_TIME or role is ColumnRole.POINT_TIME:
            start = row[col] = random_time(rng) if rng.random() < 0.97 else None
        elif role is ColumnRole.END_TIME:
            if start is None or rng.random() < 0.15:
                row[col] = None
            else:
                end = start + dt.timedelta(days=rng.randrange(4))
                row[col] = end
        elif role is ColumnRole.LABEL:
            row[col] = rng.choice(LABELS)
        elif kind is ValueKind.DECIMAL:
            row[col] = Decimal(rng.choice(VALUES)) if rng.random() < 0.9 else None
        elif kind is ValueKind.DATETIME:
            row[col] = random_time(rng)
        elif kind is ValueKind.INTEGER:
            row[col] = rng.randrange(1, 50)
        elif role is ColumnRole.UNIT:
            row[col] = rng.choice(UNITS)
        else:
            row[col] = rng.choice(TEXTS + UNITS)
    return row


def window_for(form: TemplateForm, rng: random.Random, anchor_row_time=None) -> TimeWindow | None:
    if form is TemplateForm.NO_TIME:
        return None
    if form is TemplateForm.EXACT:
        t = anchor_row_time if anchor_row_time is not None and rng.random() < 0.7 else random_time(rng)
        if isinstance(t, dt.datetime) and rng.random() < 0.3:
            t = t.date()
        return TimeWindow.exact_at(t)
    a = BASE + dt.timedelta(days=rng.randrange(12))
    if form is TemplateForm.ADMISSION_TO_CHART:
        return TimeWindow.day_range(form, a, 0, a + dt.timedelta(days=rng.randrange(6)), 0)
    return TimeWindow.day_range(form, a, -1, a, 1)


def random_plan(profile: SchemaProfile, store: RecordStore, rng: random.Random, table: str,
                form: TemplateForm) -> QueryPlan:
    """A plan for one template cell; about half are seeded from an existing row so results are non-empty."""
    ev = profile.table(table)
    pair = profile.pair_for(table)
    rows = store.rows(table)
    seed = rng.choice(rows) if rows and rng.random() < 0.6 else None
    labels = tuple(rng.sample(LABELS, rng.randint(1, 3)))
    if seed is not None and pair[1] is not None:
        d = profile.table(pair[1])
        j = [j for j in profile.joins_for(table) if j.dict_table == d.name][0]
        for r in store.rows(d.name):
            if r[j.dict_column] == seed[j.child_column]:
                labels = tuple(dict.fromkeys(labels + (r[d.role_columns(ColumnRole.LABEL)[0]],)))
                break
    elif seed is not None:
        labels = tuple(dict.fromkeys(labels + (seed[ev.role_column(ColumnRole.LABEL)],)))
    adm_col = ev.role_column(ColumnRole.ADMISSION_KEY)
    hadm = seed[adm_col] if seed is not None else rng.choice(HADMS)
    time_col = ev.role_column(ColumnRole.START_TIME) or ev.role_column(ColumnRole.POINT_TIME)
    window = window_for(form, rng, seed[time_col] if seed is not None and time_col else None)
    conds = []
    for cid, role in CONDITION_ROLES.items():
        col = ev.role_column(role)
        if col is None or rng.random() < 0.4:
            continue
        if seed is not None and seed[col] is not None and rng.random() < 0.8:
            v = seed[col]
            if isinstance(v, str) and rng.random() < 0.3:
                v = v.swapcase()
        elif role is ColumnRole.VALUE:
            v = Decimal(rng.choice(VALUES))
        else:
            v = rng.choice(UNITS + TEXTS)
        conds.append(Condition(cid, role, col, v))
    maskable = tuple(c.cid for c in conds) + (("time",) if window is not None else ())
    return QueryPlan(ev.name, pair[1], str(hadm), labels, window, tuple(conds), maskable,
                     f"{ev.name.lower()}/{form.value}")


def all_cells(profile: SchemaProfile):
    return template_cells(profile)


def make_note(category=NoteCategory.PHYSICIAN, admit=dt.datetime(2150, 3, 2, 10, 0),
              chart=dt.datetime(2150, 3, 6, 18, 0), text="line one\nline two", note_id="N1", hadm="100"):
    lines = tuple((i, t) for i, t in enumerate(text.split("\n"), start=1))
    return Note(note_id, category, hadm, admit, chart, lines)

"""Record store: CSV ingestion, an embedded SQLite engine, and a brute-force scan oracle."""
from __future__ import annotations

import csv
import datetime as dt
import io
import logging
import sqlite3
import threading
from dataclasses import dataclass
from decimal import Decimal
from enum import Enum
from pathlib import Path
from typing import IO, Any, Iterable, Mapping

from .plan import QueryPlan
from .schema import ColumnRole, SchemaProfile, TableSpec
from .sql import PlanError, coerce_key, ident, render_plan, storage_value
from .values import CellValue, ValueKind, ascii_lower, format_cell, parse_cell

log = logging.getLogger(__name__)

Row = Mapping[str, CellValue]


class Provenance(str, Enum):
    SQL = "SqlPath"
    SCAN = "ScanPath"


class IngestError(ValueError):
    pass


class StoreStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class RowSet:
    table: str
    rows: tuple[Row, ...]
    provenance: Provenance
    key_column: str | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def __bool__(self) -> bool:
        return bool(self.rows)

    @property
    def ids(self) -> frozenset:
        if self.key_column is None:
            return frozenset(tuple(sorted((k, format_cell(v)) for k, v in r.items())) for r in self.rows)
        return frozenset(r[self.key_column] for r in self.rows)

    def same_rows(self, other: "RowSet") -> bool:
        return self.table == other.table and self.ids == other.ids

    def to_json(self) -> list[dict[str, str]]:
        rows = [{k: format_cell(v) for k, v in r.items()} for r in self.rows]
        if self.key_column is not None:
            rows.sort(key=lambda r: _sort_key(r[self.key_column]))
        return rows


def _sort_key(text: str) -> tuple[int, Any]:
    return (0, int(text)) if text.lstrip("-").isdigit() else (1, text)


class RecordStore:
    """Single-writer ingestion, then ``freeze()``; afterwards read-only and thread safe."""

    def __init__(self, profile: SchemaProfile) -> None:
        self.profile = profile
        self._rows: dict[str, list[dict[str, CellValue]]] = {t.name: [] for t in profile.tables}
        self._conn: sqlite3.Connection | None = None
        self._lock = threading.Lock()
        self._frozen = False
        self._index: dict[tuple[str, str], dict[CellValue, list[dict[str, CellValue]]]] = {}

    # ------------------------------------------------------------------ ingest
    @property
    def frozen(self) -> bool:
        return self._frozen

    def _check_writable(self) -> None:
        if self._frozen:
            raise StoreStateError("store is frozen")

    def ingest_csv(self, table: str, source: IO[bytes] | bytes | str | Path) -> int:
        """Parse a UTF-8 RFC-4180 CSV; all rows are validated before any is stored."""
        self._check_writable()
        spec = self.profile.table(table)
        if isinstance(source, (str, Path)):
            data = Path(source).read_bytes()
        elif isinstance(source, bytes):
            data = source
        else:
            data = source.read()
        text = data.decode("utf-8-sig")
        reader = csv.reader(io.StringIO(text, newline=""))
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{spec.name}: missing header row") from None
        lookup = {h.strip().lower(): i for i, h in enumerate(header)}
        positions = {}
        for col in spec.column_names:
            if col.lower() not in lookup:
                raise IngestError(f"{spec.name}: missing required column {col!r}")
            positions[col] = lookup[col.lower()]
        extra = set(lookup) - {c.lower() for c in spec.column_names}
        if extra:
            log.info("%s: ignoring extra columns %s", spec.name, sorted(extra))
        parsed = []
        for record in reader:
            line = reader.line_num
            if not record or all(not f.strip() for f in record):
                continue
            if len(record) != len(header):
                raise IngestError(f"{spec.name} line {line}: expected {len(header)} fields, got {len(record)}")
            row: dict[str, CellValue] = {}
            for col, kind in spec.columns:
                raw = record[positions[col]]
                try:
                    row[col] = parse_cell(kind, raw)
                except ValueError as exc:
                    raise IngestError(f"{spec.name} line {line}: column {col}: {exc}") from None
            parsed.append(row)
        self._rows[spec.name].extend(parsed)
        return len(parsed)

    def ingest_rows(self, table: str, rows: Iterable[Mapping[str, CellValue]]) -> int:
        """Add already-typed rows (missing columns become Null)."""
        self._check_writable()
        spec = self.profile.table(table)
        n = 0
        for r in rows:
            unknown = set(r) - set(spec.column_names)
            if unknown:
                raise IngestError(f"{spec.name}: unknown columns {sorted(unknown)}")
            row = {c: r.get(c) for c in spec.column_names}
            for c, kind in spec.columns:
                _check_kind(spec, c, kind, row[c])
            self._rows[spec.name].append(row)
            n += 1
        return n

    def load_dir(self, directory: str | Path) -> dict[str, int]:
        """Ingest ``<Table>.csv`` files (case-insensitive names); absent files mean empty tables."""
        directory = Path(directory)
        if not directory.is_dir():
            raise IngestError(f"database directory {directory} does not exist")
        files = {p.stem.lower(): p for p in directory.glob("*.csv")}
        counts = {}
        for spec in self.profile.tables:
            path = files.get(spec.name.lower())
            counts[spec.name] = self.ingest_csv(spec.name, path) if path else 0
        return counts

    def freeze(self) -> "RecordStore":
        if self._frozen:
            return self
        conn = sqlite3.connect(":memory:", check_same_thread=False)
        for spec in self.profile.tables:
            cols = ", ".join(f"{ident(c)} {_sql_type(k)}" for c, k in spec.columns)
            conn.execute(f"CREATE TABLE {ident(spec.name)} ({cols})")
            placeholders = ", ".join("?" for _ in spec.columns)
            conn.executemany(
                f"INSERT INTO {ident(spec.name)} VALUES ({placeholders})",
                ([storage_value(k, r[c]) for c, k in spec.columns] for r in self._rows[spec.name]),
            )
        conn.commit()
        self._conn = conn
        self._frozen = True
        for join in self.profile.joins:
            self._build_index(join.dict_table, join.dict_column)
        for spec in self.profile.event_tables:
            adm = spec.role_column(ColumnRole.ADMISSION_KEY)
            if adm:
                self._build_index(spec.name, adm)
        return self

    def _build_index(self, table: str, column: str) -> None:
        idx: dict[CellValue, list[dict[str, CellValue]]] = {}
        for r in self._rows[table]:
            idx.setdefault(r[column], []).append(r)
        self._index[(table, column)] = idx

    # ------------------------------------------------------------------ read
    def rows(self, table: str) -> tuple[Row, ...]:
        return tuple(self._rows[self.profile.canonical_table(table)])

    def row_count(self, table: str) -> int:
        return len(self._rows[self.profile.canonical_table(table)])

    def render_sql(self, plan: QueryPlan) -> str:
        return render_plan(plan, self.profile)

    def execute_plan(self, plan: QueryPlan, path: Provenance = Provenance.SCAN) -> RowSet:
        if not self._frozen:
            raise StoreStateError("freeze the store before querying")
        spec = self.profile.table(plan.event_table)
        if path is Provenance.SQL:
            rows = self._execute_sql(plan, spec)
        else:
            rows = self._execute_scan(plan, spec)
        return RowSet(spec.name, tuple(rows), path, spec.primary_key)

    def _execute_sql(self, plan: QueryPlan, spec: TableSpec) -> list[Row]:
        text = render_plan(plan, self.profile)
        with self._lock:
            try:
                cur = self._conn.execute(text)
            except sqlite3.Error as exc:
                raise PlanError(f"SQL failed: {exc}: {text}") from exc
            names = [d[0] for d in cur.description]
            raw = cur.fetchall()
        out = []
        for rec in raw:
            row = {}
            for name, val in zip(names, rec):
                kind = spec.kind(name)
                row[name] = _from_storage(kind, val)
            out.append(row)
        return out

    def _execute_scan(self, plan: QueryPlan, spec: TableSpec) -> list[Row]:
        render_plan(plan, self.profile)  # same validation as the SQL path
        adm = spec.role_column(ColumnRole.ADMISSION_KEY)
        key = coerce_key(spec, adm, plan.admission_key)
        candidates = self._index[(spec.name, adm)].get(key, [])
        labels = set(plan.item_labels)
        out = []
        for r in candidates:
            if not self._item_matches(plan, spec, r, labels):
                continue
            if plan.window is not None and not self._time_matches(plan, spec, r):
                continue
            if all(_condition_matches(c.role, r[c.column], c.value) for c in plan.conditions):
                out.append(r)
        return out

    def _item_matches(self, plan: QueryPlan, spec: TableSpec, row: Row, labels: set[str]) -> bool:
        if plan.dict_table is None:
            return any(row[c] in labels for c in spec.role_columns(ColumnRole.LABEL))
        dspec = self.profile.table(plan.dict_table)
        label_cols = dspec.role_columns(ColumnRole.LABEL)
        joins = [j for j in self.profile.joins_for(spec.name) if j.dict_table == dspec.name]
        # inner join on every listed join; label test is a disjunction across them
        matched_any_label = False
        for j in joins:
            if row[j.child_column] is None:
                return False
            partners = self._index[(dspec.name, j.dict_column)].get(row[j.child_column], [])
            if not partners:
                return False
            if any(p[c] in labels for p in partners for c in label_cols):
                matched_any_label = True
        return matched_any_label

    def _time_matches(self, plan: QueryPlan, spec: TableSpec, row: Row) -> bool:
        w = plan.window
        if spec.is_interval:
            return w.admits_interval(row[spec.role_column(ColumnRole.START_TIME)],
                                     row[spec.role_column(ColumnRole.END_TIME)])
        return w.admits_point(row[spec.role_column(ColumnRole.POINT_TIME)])

    # ------------------------------------------------------------------ export
    def write_csv_dir(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for spec in self.profile.tables:
            write_csv(directory / f"{spec.name}.csv", spec.column_names, self._rows[spec.name])

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()


def write_csv(path: Path, columns: Iterable[str], rows: Iterable[Mapping[str, CellValue]]) -> None:
    columns = list(columns)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format_cell(r.get(c)) for c in columns])


def _condition_matches(role: ColumnRole, cell: CellValue, want: CellValue) -> bool:
    if cell is None:
        return False
    if role is ColumnRole.VALUE:
        return cell == want
    return ascii_lower(str(cell)) == ascii_lower(str(want))


def _sql_type(kind: ValueKind) -> str:
    return "INTEGER" if kind is ValueKind.INTEGER else "TEXT"


def _from_storage(kind: ValueKind, val: Any) -> CellValue:
    if val is None:
        return None
    if kind is ValueKind.INTEGER:
        return int(val)
    if kind is ValueKind.TEXT:
        return str(val)
    return parse_cell(kind, str(val))


def _check_kind(spec: TableSpec, col: str, kind: ValueKind, v: CellValue) -> None:
    if v is None:
        return
    ok = {
        ValueKind.TEXT: isinstance(v, str),
        ValueKind.DECIMAL: isinstance(v, Decimal),
        ValueKind.DATETIME: isinstance(v, (dt.date, dt.datetime)),
        ValueKind.INTEGER: isinstance(v, int) and not isinstance(v, bool),
    }[kind]
    if not ok:
        raise IngestError(f"{spec.name}.{col}: {v!r} is not a {kind.value}")

"""SQL dialect layer: renders a QueryPlan as SQLite text in the strftime style of the templates."""
from __future__ import annotations

import datetime as dt
import re
from decimal import Decimal

from .plan import QueryPlan, TimeWindow, WindowKind
from .schema import ColumnRole, SchemaProfile, TableSpec
from .values import CellValue, ValueKind, ascii_lower, canonical_decimal, format_datetime, parse_cell

_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
DAY = "%Y-%m-%d"
SECOND = "%Y-%m-%d %H:%M:%S"


class PlanError(ValueError):
    """Plan references something the profile cannot express."""


def ident(name: str) -> str:
    if _IDENT.match(name):
        return name
    return '"' + name.replace('"', '""') + '"'


def literal(value: CellValue) -> str:
    if value is None:
        return "NULL"
    if isinstance(value, bool):
        raise PlanError("boolean literals are not supported")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, Decimal):
        return quote(canonical_decimal(value))
    if isinstance(value, (dt.date, dt.datetime)):
        return quote(format_datetime(value))
    return quote(str(value))


def quote(text: str) -> str:
    return "'" + text.replace("'", "''") + "'"


def storage_value(kind: ValueKind, value: CellValue) -> CellValue:
    """How a typed cell is stored in SQLite (text for decimals and timestamps)."""
    if value is None:
        return None
    if kind is ValueKind.DECIMAL:
        return canonical_decimal(value)
    if kind is ValueKind.DATETIME:
        return format_datetime(value)
    return value


def _day(expr: str) -> str:
    return f"strftime('{DAY}', {expr})"


def _anchor(anchor: dt.date, offset: int) -> str:
    return _day(f"datetime({quote(anchor.isoformat())}, '{offset:+d} day')")


def coerce_key(table: TableSpec, column: str, key: str) -> CellValue:
    try:
        return parse_cell(table.kind(column), key)
    except ValueError as exc:
        raise PlanError(f"admission key {key!r} does not fit {table.name}.{column}") from exc


def label_refs(plan: QueryPlan, profile: SchemaProfile) -> tuple[list[str], list[str]]:
    """Return (join clauses, qualified label columns) for the plan's item condition."""
    ev = profile.table(plan.event_table)
    joins: list[str] = []
    refs: list[str] = []
    if plan.dict_table is None:
        refs = [f"{ident(ev.name)}.{ident(c)}" for c in ev.role_columns(ColumnRole.LABEL)]
    else:
        dspec = profile.table(plan.dict_table)
        js = [j for j in profile.joins_for(ev.name) if j.dict_table == dspec.name]
        if not js:
            raise PlanError(f"no join from {ev.name} to {dspec.name}")
        for j in js:
            alias = f" AS {ident(j.alias)}" if j.alias else ""
            joins.append(f"JOIN {ident(j.dict_table)}{alias} ON {ident(ev.name)}.{ident(j.child_column)}"
                         f" = {ident(j.ref)}.{ident(j.dict_column)}")
            refs.extend(f"{ident(j.ref)}.{ident(c)}" for c in dspec.role_columns(ColumnRole.LABEL))
    if not refs:
        raise PlanError(f"no label column reachable from {ev.name}")
    return joins, refs


def time_predicate(window: TimeWindow, ev: TableSpec) -> str:
    t = ident(ev.name)
    if ev.is_interval:
        s = f"{t}.{ident(ev.role_column(ColumnRole.START_TIME))}"
        e = f"{t}.{ident(ev.role_column(ColumnRole.END_TIME))}"
        e = f"COALESCE({e}, {s})"
        if window.kind is WindowKind.DAY_RANGE:
            lo = _anchor(window.lo_anchor, window.lo_offset)
            hi = _anchor(window.hi_anchor, window.hi_offset)
        else:
            lo = hi = _day(literal(window.exact))
        return f"NOT ({_day(e)} < {lo} OR {_day(s)} > {hi})"
    col = ev.role_column(ColumnRole.POINT_TIME)
    if col is None:
        raise PlanError(f"{ev.name} has no time column")
    c = f"{t}.{ident(col)}"
    if window.kind is WindowKind.EXACT_DATETIME:
        return f"strftime('{SECOND}', {c}) = {literal(window.exact)}"
    if window.kind is WindowKind.EXACT_DATE:
        return f"{_day(c)} = {literal(window.exact)}"
    return (f"{_day(c)} BETWEEN {_anchor(window.lo_anchor, window.lo_offset)}"
            f" AND {_anchor(window.hi_anchor, window.hi_offset)}")


def render_plan(plan: QueryPlan, profile: SchemaProfile) -> str:
    ev = profile.table(plan.event_table)
    t = ident(ev.name)
    joins, refs = label_refs(plan, profile)
    adm = ev.role_column(ColumnRole.ADMISSION_KEY)
    if adm is None:
        raise PlanError(f"{ev.name} has no admission key")
    where = [f"{t}.{ident(adm)} = {literal(coerce_key(ev, adm, plan.admission_key))}"]
    labels = ", ".join(quote(x) for x in plan.item_labels)
    where.append("(" + " OR ".join(f"{r} IN ({labels})" for r in refs) + ")")
    if plan.window is not None:
        where.append(time_predicate(plan.window, ev))
    for cond in plan.conditions:
        if not ev.has_column(cond.column) or ev.role_of(cond.column) is not cond.role:
            raise PlanError(f"condition {cond.cid} names {ev.name}.{cond.column} without role {cond.role.value}")
        col = f"{t}.{ident(cond.column)}"
        if cond.role is ColumnRole.VALUE:
            if not isinstance(cond.value, Decimal):
                raise PlanError("value conditions need a decimal")
            where.append(f"{col} = {literal(cond.value)}")
        else:
            where.append(f"lower({col}) = {quote(ascii_lower(str(cond.value)))}")
    return " ".join([f"SELECT {t}.* FROM {t}", *joins, "WHERE", " AND ".join(where)])

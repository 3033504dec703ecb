"""Typed cell values shared by the store, the planner and the extraction stages.

DateTime cells are ``datetime.date`` (date only) or ``datetime.datetime``
(second precision). Decimal cells are ``decimal.Decimal``; binary floats are
never used for comparisons.
"""
from __future__ import annotations

import datetime as dt
import re
from decimal import Decimal, InvalidOperation
from enum import Enum
from typing import Union

DATE_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})$")
DATETIME_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2}) (\d{2}):(\d{2}):(\d{2})$")

DateLike = Union[dt.date, dt.datetime]
CellValue = Union[str, Decimal, dt.date, dt.datetime, int, None]


class ValueKind(str, Enum):
    TEXT = "text"
    DECIMAL = "decimal"
    DATETIME = "datetime"
    INTEGER = "integer"


def parse_datetime(text: str) -> DateLike:
    """Parse ``YYYY-MM-DD`` or ``YYYY-MM-DD HH:MM:SS``; anything else is a ValueError."""
    text = text.strip()
    m = DATETIME_RE.match(text)
    if m:
        return dt.datetime(*(int(g) for g in m.groups()))
    m = DATE_RE.match(text)
    if m:
        return dt.date(*(int(g) for g in m.groups()))
    raise ValueError(f"not a YYYY-MM-DD[ HH:MM:SS] timestamp: {text!r}")


def format_datetime(value: DateLike) -> str:
    if isinstance(value, dt.datetime):
        return value.strftime("%Y-%m-%d %H:%M:%S")
    return value.strftime("%Y-%m-%d")


def has_time(value: DateLike) -> bool:
    return isinstance(value, dt.datetime)


def as_datetime(value: DateLike) -> dt.datetime:
    if isinstance(value, dt.datetime):
        return value
    return dt.datetime(value.year, value.month, value.day)


def as_date(value: DateLike) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    return value


def parse_decimal(text: str) -> Decimal:
    try:
        d = Decimal(text.strip())
    except InvalidOperation:
        raise ValueError(f"not a decimal: {text!r}") from None
    if not d.is_finite():
        raise ValueError(f"not a finite decimal: {text!r}")
    return d


def canonical_decimal(d: Decimal) -> str:
    """Scale-free text form: equal decimals map to equal strings (94.0 -> '94')."""
    if d == 0:
        return "0"
    return format(d.normalize(), "f")


def parse_integer(text: str) -> int:
    text = text.strip()
    if not re.fullmatch(r"[+-]?\d+", text):
        raise ValueError(f"not an integer: {text!r}")
    return int(text)


def parse_cell(kind: ValueKind, text: str | None) -> CellValue:
    """Empty text is Null for every kind."""
    if text is None or text.strip() == "":
        return None
    if kind is ValueKind.TEXT:
        return text
    if kind is ValueKind.DECIMAL:
        return parse_decimal(text)
    if kind is ValueKind.DATETIME:
        return parse_datetime(text)
    if kind is ValueKind.INTEGER:
        return parse_integer(text)
    raise ValueError(f"unknown value kind {kind}")


def format_cell(value: CellValue) -> str:
    if value is None:
        return ""
    if isinstance(value, Decimal):
        return str(value)
    if isinstance(value, (dt.date, dt.datetime)):
        return format_datetime(value)
    return str(value)


def ascii_lower(text: str) -> str:
    # mirrors SQLite's built-in lower(), which only folds ASCII
    return text.translate(_ASCII_LOWER)


_ASCII_LOWER = {c: c + 32 for c in range(ord("A"), ord("Z") + 1)}

"""Deterministic resolution of time expressions found in note text."""
from __future__ import annotations

import datetime as dt
import re

from .values import DateLike, as_date

_DATE = re.compile(r"(?<!\d)(\d{4})-(\d{1,2})-(\d{1,2})(?!\d)")
_MONTH_DAY = re.compile(r"(?<![\d-])(\d{1,2})-(\d{1,2})(?![\d-])")
_CLOCK = re.compile(r"^\s*(?:at\s+)?(\d{1,2})(?::(\d{2}))?(?::(\d{2}))?\s*([AaPp])?\.?\s*(?:[Mm]\.?)?(?![\w:])")
_HOSPITAL_DAY = re.compile(r"\b(?:HD|hospital\s+day)\s*#?\s*(\d{1,3})\b", re.IGNORECASE)
_YESTERDAY = re.compile(r"\byesterday\b", re.IGNORECASE)
_TODAY = re.compile(r"\b(?:today|this\s+(?:morning|afternoon|evening)|tonight|this\s+am|this\s+pm)\b", re.IGNORECASE)
_ADMISSION = re.compile(r"\b(?:admission|admit|admitted|presentation)\b", re.IGNORECASE)
_DISCHARGE = re.compile(r"\bdischarge[d]?\b", re.IGNORECASE)


def strip_brackets(text: str) -> str:
    """Drop de-identification brackets: ``[**2200-07-01**]`` -> ``2200-07-01``."""
    return text.replace("[**", "").replace("**]", "")


def _clock(rest: str) -> dt.time | None:
    m = _CLOCK.match(rest)
    if not m:
        return None
    hour, minute, second, ampm = m.groups()
    if minute is None and ampm is None:
        return None  # a bare number after a date is not a time of day
    h, mi, s = int(hour), int(minute or 0), int(second or 0)
    if ampm:
        if not 1 <= h <= 12:
            return None
        h = h % 12 + (12 if ampm.lower() == "p" else 0)
    if h > 23 or mi > 59 or s > 59:
        return None
    return dt.time(h, mi, s)


def _with_clock(day: dt.date, rest: str) -> DateLike:
    t = _clock(rest)
    return dt.datetime.combine(day, t) if t is not None else day


def parse_literal(text: str, chart_date: dt.date) -> DateLike | None:
    """Explicit calendar dates (optionally with a clock time); MM-DD takes the chart year."""
    s = strip_brackets(text)
    m = _DATE.search(s)
    if m:
        try:
            day = dt.date(int(m.group(1)), int(m.group(2)), int(m.group(3)))
        except ValueError:
            return None
        return _with_clock(day, s[m.end():])
    m = _MONTH_DAY.search(s)
    if m:
        try:
            day = dt.date(chart_date.year, int(m.group(1)), int(m.group(2)))
        except ValueError:
            return None
        return _with_clock(day, s[m.end():])
    return None


def parse_relative(text: str, admit_date: dt.date, chart_date: dt.date) -> dt.date | None:
    m = _HOSPITAL_DAY.search(text)
    if m:
        k = int(m.group(1))
        return admit_date + dt.timedelta(days=k - 1) if k >= 1 else None
    if _YESTERDAY.search(text):
        return chart_date - dt.timedelta(days=1)
    if _TODAY.search(text):
        return chart_date
    if _ADMISSION.search(text):
        return admit_date
    if _DISCHARGE.search(text):
        return chart_date
    return None


def resolve_time_text(text: str, admit: DateLike, chart: DateLike) -> DateLike | None:
    """Explicit dates first, then hospital-day / relative words; None when unresolvable."""
    if text is None or not text.strip():
        return None
    lit = parse_literal(text, as_date(chart))
    if lit is not None:
        return lit
    return parse_relative(text, as_date(admit), as_date(chart))

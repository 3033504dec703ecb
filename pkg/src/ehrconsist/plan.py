"""Structured query plans: the data shared by the planner, the store and the verifier."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace
from decimal import Decimal
from enum import Enum
from typing import Any, Iterable

from .schema import ColumnRole
from .values import (CellValue, DateLike, as_date, as_datetime, format_datetime, has_time,
                     parse_datetime, parse_decimal)

# masking order used unless a run configures another one
DEFAULT_MASKING_ORDER: tuple[str, ...] = ("value", "unit", "time", "organism", "specimen")

CONDITION_ROLES: dict[str, ColumnRole] = {
    "value": ColumnRole.VALUE,
    "unit": ColumnRole.UNIT,
    "organism": ColumnRole.ORGANISM,
    "specimen": ColumnRole.SPECIMEN,
}


class WindowKind(str, Enum):
    EXACT_DATE = "ExactDate"
    EXACT_DATETIME = "ExactDateTime"
    DAY_RANGE = "DayRange"


class TemplateForm(str, Enum):
    """Columns of the template matrix: how the time window is anchored."""

    EXACT = "exact"
    ADMISSION = "admission"
    ADMISSION_TO_CHART = "admission_to_chart"
    CALCULATED = "calculated"
    NO_TIME = "no_time"


@dataclass(frozen=True)
class TimeWindow:
    kind: WindowKind
    form: TemplateForm
    exact: DateLike | None = None
    lo_anchor: dt.date | None = None
    lo_offset: int = 0
    hi_anchor: dt.date | None = None
    hi_offset: int = 0

    def __post_init__(self) -> None:
        if self.kind is WindowKind.DAY_RANGE:
            if self.lo_anchor is None or self.hi_anchor is None:
                raise ValueError("DayRange needs both anchors")
            if self.lo > self.hi:
                raise ValueError(f"empty DayRange {self.lo}..{self.hi}")
        else:
            if self.exact is None:
                raise ValueError("exact window needs a timestamp")
            if (self.kind is WindowKind.EXACT_DATETIME) != has_time(self.exact):
                raise ValueError("exact window precision does not match its literal")

    @classmethod
    def exact_at(cls, value: DateLike) -> "TimeWindow":
        kind = WindowKind.EXACT_DATETIME if has_time(value) else WindowKind.EXACT_DATE
        return cls(kind, TemplateForm.EXACT, exact=value)

    @classmethod
    def day_range(cls, form: TemplateForm, lo_anchor: dt.date, lo_offset: int,
                  hi_anchor: dt.date, hi_offset: int) -> "TimeWindow":
        return cls(WindowKind.DAY_RANGE, form, lo_anchor=as_date(lo_anchor), lo_offset=lo_offset,
                   hi_anchor=as_date(hi_anchor), hi_offset=hi_offset)

    @property
    def lo(self) -> dt.date:
        if self.kind is not WindowKind.DAY_RANGE:
            return as_date(self.exact)
        return self.lo_anchor + dt.timedelta(days=self.lo_offset)

    @property
    def hi(self) -> dt.date:
        if self.kind is not WindowKind.DAY_RANGE:
            return as_date(self.exact)
        return self.hi_anchor + dt.timedelta(days=self.hi_offset)

    # definitional semantics; the SQL dialect must agree with these
    def admits_point(self, t: DateLike | None) -> bool:
        if t is None:
            return False
        if self.kind is WindowKind.EXACT_DATETIME:
            return as_datetime(t) == self.exact
        return self.lo <= as_date(t) <= self.hi

    def admits_interval(self, start: DateLike | None, end: DateLike | None) -> bool:
        if start is None:
            return False
        s = as_date(start)
        e = as_date(end) if end is not None else s
        return not (e < self.lo or s > self.hi)

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind.value, "form": self.form.value}
        if self.kind is WindowKind.DAY_RANGE:
            d.update(lo=self.lo.isoformat(), hi=self.hi.isoformat(),
                     lo_anchor=self.lo_anchor.isoformat(), lo_offset=self.lo_offset,
                     hi_anchor=self.hi_anchor.isoformat(), hi_offset=self.hi_offset)
        else:
            d["exact"] = format_datetime(self.exact)
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "TimeWindow":
        kind = WindowKind(d["kind"])
        form = TemplateForm(d["form"])
        if kind is WindowKind.DAY_RANGE:
            return cls(kind, form, lo_anchor=dt.date.fromisoformat(d["lo_anchor"]),
                       lo_offset=int(d["lo_offset"]), hi_anchor=dt.date.fromisoformat(d["hi_anchor"]),
                       hi_offset=int(d["hi_offset"]))
        return cls(kind, form, exact=parse_datetime(d["exact"]))


@dataclass(frozen=True)
class Condition:
    cid: str
    role: ColumnRole
    column: str
    value: CellValue

    def to_json(self) -> dict[str, Any]:
        v = self.value
        return {"id": self.cid, "role": self.role.value, "column": self.column,
                "value": str(v) if isinstance(v, Decimal) else v}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "Condition":
        role = ColumnRole(d["role"])
        value = parse_decimal(d["value"]) if role is ColumnRole.VALUE else d["value"]
        return cls(d["id"], role, d["column"], value)


@dataclass(frozen=True)
class QueryPlan:
    event_table: str
    dict_table: str | None
    admission_key: str
    item_labels: tuple[str, ...]
    window: TimeWindow | None
    conditions: tuple[Condition, ...] = ()
    maskable: tuple[str, ...] = ()
    template_id: str = ""
    masked: tuple[str, ...] = field(default=())

    @property
    def table_pair(self) -> tuple[str, str | None]:
        return self.event_table, self.dict_table

    def condition(self, cid: str) -> Condition | None:
        for c in self.conditions:
            if c.cid == cid:
                return c
        return None

    def without(self, cids: Iterable[str]) -> "QueryPlan":
        drop = set(cids)
        bad = drop - set(self.maskable)
        if bad:
            raise ValueError(f"conditions {sorted(bad)} are not maskable")
        return replace(
            self,
            window=None if "time" in drop else self.window,
            conditions=tuple(c for c in self.conditions if c.cid not in drop),
            maskable=tuple(m for m in self.maskable if m not in drop),
            masked=tuple(sorted(set(self.masked) | drop)),
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "template": self.template_id,
            "event_table": self.event_table,
            "dict_table": self.dict_table,
            "admission_key": self.admission_key,
            "item_labels": list(self.item_labels),
            "window": self.window.to_json() if self.window else None,
            "conditions": [c.to_json() for c in self.conditions],
            "maskable": list(self.maskable),
            "masked": list(self.masked),
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "QueryPlan":
        return cls(
            event_table=d["event_table"],
            dict_table=d["dict_table"],
            admission_key=str(d["admission_key"]),
            item_labels=tuple(d["item_labels"]),
            window=TimeWindow.from_json(d["window"]) if d.get("window") else None,
            conditions=tuple(Condition.from_json(c) for c in d.get("conditions", ())),
            maskable=tuple(d.get("maskable", ())),
            template_id=d.get("template", ""),
            masked=tuple(d.get("masked", ())),
        )

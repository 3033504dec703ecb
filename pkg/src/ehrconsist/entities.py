"""Entity mentions, time tags and the row shapes produced by the extraction stages."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Mapping

from .schema import ColumnRole
from .values import CellValue, DateLike, format_cell, format_datetime, parse_datetime

TablePair = tuple[str, "str | None"]


class EntityType(IntEnum):
    TYPE1 = 1
    TYPE2 = 2
    TYPE3 = 3


@dataclass(frozen=True)
class EntityMention:
    surface: str
    entity_type: EntityType
    line_no: int
    mention_ordinal: int = 1
    raw_values: tuple[str, ...] = ()
    raw_unit: str | None = None
    raw_time_expr: str | None = None
    organism: str | None = None
    specimen: str | None = None

    def __post_init__(self) -> None:
        if self.entity_type is EntityType.TYPE1 and not self.raw_values:
            raise ValueError("Type1 mentions carry at least one value")
        if self.entity_type is EntityType.TYPE2 and self.raw_values:
            raise ValueError("Type2 mentions carry no values")

    @property
    def value(self) -> str | None:
        return self.raw_values[0] if self.raw_values else None

    @property
    def key(self) -> str:
        """Stable per-note identifier, also used to key scripted answers."""
        base = f"{self.surface}@{self.line_no}"
        return f"{base}={'/'.join(self.raw_values)}" if self.raw_values else base

    def to_json(self) -> dict[str, Any]:
        return {
            "surface": self.surface,
            "entity_type": int(self.entity_type),
            "line": self.line_no,
            "ordinal": self.mention_ordinal,
            "values": list(self.raw_values),
            "key": self.key,
        }


class TimeRegime(str, Enum):
    EXACT = "ExactTimestamp"
    NARRATIVE = "Narrative"
    UNSPECIFIED = "Unspecified"


class AnchorKind(str, Enum):
    ADMISSION = "Admission"
    DISCHARGE = "Discharge"
    CHART_DATE = "ChartDate"
    HOSPITAL_DAY = "HospitalDay"
    YESTERDAY = "Yesterday"
    LITERAL = "Literal"


@dataclass(frozen=True)
class Anchor:
    kind: AnchorKind
    day: int | None = None
    literal: DateLike | None = None

    def __post_init__(self) -> None:
        if self.kind is AnchorKind.HOSPITAL_DAY and (self.day is None or self.day < 1):
            raise ValueError("HospitalDay needs k >= 1")
        if self.kind is AnchorKind.LITERAL and self.literal is None:
            raise ValueError("Literal anchor needs a timestamp")

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind.value}
        if self.day is not None:
            d["day"] = self.day
        if self.literal is not None:
            d["literal"] = format_datetime(self.literal)
        return d

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "Anchor":
        lit = parse_datetime(d["literal"]) if d.get("literal") else None
        return cls(AnchorKind(d["kind"]), d.get("day"), lit)


@dataclass(frozen=True)
class TimeTag:
    regime: TimeRegime
    anchor: Anchor | None = None
    in_current_stay: bool = True
    expression: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.regime is TimeRegime.EXACT:
            if self.anchor is None or self.anchor.kind is not AnchorKind.LITERAL:
                raise ValueError("ExactTimestamp needs a Literal anchor")
        elif self.regime is TimeRegime.NARRATIVE:
            if self.anchor is None or self.anchor.kind is AnchorKind.LITERAL:
                raise ValueError("Narrative needs a non-literal anchor")
        elif self.anchor is not None:
            raise ValueError("Unspecified carries no anchor")

    def to_json(self) -> dict[str, Any]:
        return {"regime": self.regime.value,
                "anchor": self.anchor.to_json() if self.anchor else None,
                "in_current_stay": self.in_current_stay}


UNSPECIFIED = TimeTag(TimeRegime.UNSPECIFIED)


@dataclass(frozen=True)
class PromptColumn:
    """A table column as shown to the backend (upper-case name) and its role."""

    name: str
    table: str
    column: str
    role: ColumnRole


@dataclass
class PseudoRow:
    target: TablePair
    cells: dict[ColumnRole, str]
    evidence_quote: str = ""
    confirmed: dict[ColumnRole, bool] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"target": list(self.target), "cells": {r.value: v for r, v in self.cells.items()},
                "evidence": self.evidence_quote,
                "confirmed": {r.value: v for r, v in self.confirmed.items()}}


@dataclass
class ReformattedRow:
    target: TablePair
    cells: dict[ColumnRole, CellValue]
    dropped: tuple[ColumnRole, ...] = ()

    def time_value(self) -> DateLike | None:
        for role in (ColumnRole.POINT_TIME, ColumnRole.START_TIME, ColumnRole.END_TIME):
            v = self.cells.get(role)
            if v is not None:
                return v
        return None

    def to_json(self) -> dict[str, Any]:
        return {"target": list(self.target),
                "cells": {r.value: format_cell(v) for r, v in self.cells.items()},
                "dropped": [r.value for r in self.dropped]}


_WS = re.compile(r"\s+")


def normalize_surface(text: str) -> str:
    return _WS.sub(" ", text.strip().lower())

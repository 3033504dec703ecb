"""Clinical note ingestion (JSON lines) and header-delimited section filtering."""
from __future__ import annotations

import datetime as dt
import fnmatch
import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Sequence

from .values import DateLike, as_date, format_datetime, parse_datetime


class NoteError(ValueError):
    pass


class NoteCategory(str, Enum):
    DISCHARGE_SUMMARY = "DischargeSummary"
    PHYSICIAN = "PhysicianNote"
    NURSING = "NursingNote"

    @classmethod
    def parse(cls, text: str) -> "NoteCategory":
        key = re.sub(r"[^a-z]", "", text.lower())
        table = {
            "dischargesummary": cls.DISCHARGE_SUMMARY, "discharge": cls.DISCHARGE_SUMMARY,
            "physiciannote": cls.PHYSICIAN, "physician": cls.PHYSICIAN,
            "nursingnote": cls.NURSING, "nursing": cls.NURSING, "nursingother": cls.NURSING,
        }
        if key not in table:
            raise NoteError(f"unknown note category {text!r}")
        return table[key]


@dataclass(frozen=True)
class Note:
    note_id: str
    category: NoteCategory
    admission_key: str
    admit_time: DateLike
    chart_time: DateLike
    lines: tuple[tuple[int, str], ...]
    removed_lines: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if as_date(self.chart_time) < as_date(self.admit_time):
            raise NoteError(f"note {self.note_id}: charttime precedes admittime")

    @property
    def admit_date(self) -> dt.date:
        return as_date(self.admit_time)

    @property
    def chart_date(self) -> dt.date:
        return as_date(self.chart_time)

    @property
    def line_numbers(self) -> tuple[int, ...]:
        return tuple(n for n, _ in self.lines)

    @property
    def text(self) -> str:
        return "\n".join(t for _, t in self.lines)

    def line(self, number: int) -> str:
        for n, t in self.lines:
            if n == number:
                return t
        raise KeyError(number)

    def to_json(self) -> dict:
        return {
            "noteId": self.note_id,
            "category": self.category.value,
            "hadm_id": self.admission_key,
            "admittime": format_datetime(self.admit_time),
            "charttime": format_datetime(self.chart_time),
            "text": self.text,
        }


REQUIRED_FIELDS = ("noteId", "category", "hadm_id", "admittime", "charttime", "text")


def note_from_record(rec: dict, where: str = "") -> Note:
    missing = [k for k in REQUIRED_FIELDS if rec.get(k) in (None, "")
               and not (k == "text" and rec.get(k) == "")]
    if missing:
        raise NoteError(f"{where}missing metadata {missing}")
    try:
        admit = parse_datetime(str(rec["admittime"]))
        chart = parse_datetime(str(rec["charttime"]))
    except ValueError as exc:
        raise NoteError(f"{where}{exc}") from None
    text = rec["text"]
    if not isinstance(text, str):
        raise NoteError(f"{where}text must be a string")
    parts = text.split("\n")
    if len(parts) > 1 and parts[-1] == "":
        parts.pop()
    start = int(rec.get("first_line", 1))
    lines = tuple((start + i, t) for i, t in enumerate(parts)) if text else ()
    try:
        return Note(str(rec["noteId"]), NoteCategory.parse(str(rec["category"])), str(rec["hadm_id"]),
                    admit, chart, lines)
    except NoteError as exc:
        raise NoteError(f"{where}{exc}") from None


def ingest_notes(source: IO[bytes] | bytes | str | Path) -> list[Note]:
    """One JSON object per line; blank lines skipped; order preserved."""
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    elif isinstance(source, bytes):
        data = source
    else:
        data = source.read()
    notes = []
    for i, raw in enumerate(data.decode("utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise NoteError(f"record on line {i}: invalid JSON ({exc.msg})") from None
        notes.append(note_from_record(rec, where=f"record on line {i}: "))
    return notes


def write_notes(path: Path, notes: Iterable[Note]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for n in notes:
            fh.write(json.dumps(n.to_json(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# section filtering

_HEADER = re.compile(r"^\s*([A-Za-z][A-Za-z0-9 /&'(),.-]{0,80}?)\s*:(.*)$")


def header_name(text: str) -> tuple[str, str] | None:
    m = _HEADER.match(text)
    if not m:
        return None
    return " ".join(m.group(1).split()), m.group(2).strip()


def _matches(name: str, patterns: Sequence[str]) -> bool:
    low = name.lower()
    return any(fnmatch.fnmatchcase(low, " ".join(p.lower().split())) for p in patterns)


def apply_section_filter(note: Note, patterns: Sequence[str]) -> Note:
    """Remove blocks that start at a header matching a pattern and run to the next header.

    A header is ``Name:`` at the start of a line. A block ends at the next line that is a
    bare header (nothing after the colon) or that itself matches a pattern. Patterns are
    literal header names or fnmatch globs, compared case-insensitively.
    """
    patterns = [p for p in patterns if p.strip()]
    if not patterns:
        return note
    kept: list[tuple[int, str]] = []
    removed: list[int] = list(note.removed_lines)
    removing = False
    for n, text in note.lines:
        h = header_name(text)
        if h is not None:
            name, rest = h
            if _matches(name, patterns):
                removing = True
            elif rest == "":
                removing = False
        if removing:
            removed.append(n)
        else:
            kept.append((n, text))
    if len(kept) == len(note.lines):
        return note
    return replace(note, lines=tuple(kept), removed_lines=tuple(sorted(removed)))


def default_section_patterns() -> list[str]:
    text = resources.files("ehrconsist").joinpath("data/section_filters.txt").read_text(encoding="utf-8")
    return load_patterns_text(text)


def load_patterns_text(text: str) -> list[str]:
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]

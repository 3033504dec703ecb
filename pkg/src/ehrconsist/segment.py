"""Iterative note segmentation into sub-texts of at most ``l`` whitespace tokens."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .gateway import Backend, GatewayError, render
from .notes import Note

log = logging.getLogger(__name__)

Line = tuple[int, str]


def count_tokens(text: str) -> int:
    return len(text.split())


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SubText:
    parent_note_id: str
    index: int
    line_range: tuple[int, int]
    lines: tuple[Line, ...]  # overlap lines included
    overlap_prefix_tokens: int = 0
    overlap_suffix_tokens: int = 0

    @property
    def text(self) -> str:
        return "\n".join(t for _, t in self.lines)

    @property
    def core_lines(self) -> tuple[Line, ...]:
        lo, hi = self.line_range
        return tuple((n, t) for n, t in self.lines if lo <= n <= hi)

    @property
    def core_tokens(self) -> int:
        return sum(count_tokens(t) for _, t in self.core_lines)

    def in_core(self, line_no: int) -> bool:
        return self.line_range[0] <= line_no <= self.line_range[1]


class Splitter(Protocol):
    def split(self, lines: Sequence[Line], parts: int) -> list[tuple[int, int]]:
        """Return ``parts`` contiguous (start, end) line-number ranges covering ``lines``."""


class EqualSplitter:
    """Deterministic fallback: cut the lines into ``parts`` runs of near-equal length."""

    def split(self, lines: Sequence[Line], parts: int) -> list[tuple[int, int]]:
        k = len(lines)
        if parts < 1 or parts > k:
            raise SplitError(f"cannot cut {k} lines into {parts} parts")
        base, extra = divmod(k, parts)
        out, pos = [], 0
        for i in range(parts):
            size = base + (1 if i < extra else 0)
            out.append((lines[pos][0], lines[pos + size - 1][0]))
            pos += size
        return out


_SECTIONS = re.compile(r"^\s*\[\s*(section\s*\d+\s*:\s*\d+\s*-\s*\d+\s*(?:,\s*section\s*\d+\s*:\s*\d+\s*-\s*\d+\s*)*)\]\s*$")
_ONE = re.compile(r"section\s*(\d+)\s*:\s*(\d+)\s*-\s*(\d+)")


def parse_sections(answer: str) -> list[tuple[int, int]]:
    """Strict parse of ``[section1: 44-59, section2: 60-69, ...]``."""
    candidates = [ln for ln in answer.strip().splitlines() if ln.strip()]
    if len(candidates) != 1:
        raise SplitError("expected a single bracketed line")
    m = _SECTIONS.match(candidates[0])
    if not m:
        raise SplitError(f"not a section list: {candidates[0][:80]!r}")
    out = []
    for i, (idx, a, b) in enumerate(_ONE.findall(m.group(1)), start=1):
        if int(idx) != i:
            raise SplitError("sections must be numbered 1, 2, 3, ...")
        out.append((int(a), int(b)))
    return out


def check_ranges(lines: Sequence[Line], ranges: Sequence[tuple[int, int]], parts: int) -> None:
    numbers = [n for n, _ in lines]
    if len(ranges) != parts:
        raise SplitError(f"expected {parts} ranges, got {len(ranges)}")
    pos = 0
    for a, b in ranges:
        if a > b:
            raise SplitError(f"empty range {a}-{b}")
        if pos >= len(numbers) or numbers[pos] != a:
            raise SplitError(f"range {a}-{b} is not contiguous with the previous one")
        while pos < len(numbers) and numbers[pos] <= b:
            pos += 1
        if numbers[pos - 1] != b:
            raise SplitError(f"range end {b} is not a line of the input")
    if pos != len(numbers):
        raise SplitError("ranges do not cover the input")


class BackendSplitter:
    """Asks the backend for a topic split; prompts are keyed by the prefix's line span."""

    def __init__(self, backend: Backend, note_id: str, template_dir: str | None = None) -> None:
        self.backend = backend
        self.note_id = note_id
        self.template_dir = template_dir

    def split(self, lines: Sequence[Line], parts: int) -> list[tuple[int, int]]:
        fmt = "[" + ", ".join(f"section{i}: (start_line_number-end_line_number)"
                              for i in range(1, parts + 1)) + "]"
        numbered = "\n".join(f"{n}: {t}" for n, t in lines)
        prompt = render("note_segmentation",
                        {"CLINICAL_NOTE": numbered, "N_SECTIONS": str(parts), "OUTPUT_FORMAT": fmt},
                        note_id=self.note_id, entity=f"{lines[0][0]}-{lines[-1][0]}",
                        template_dir=self.template_dir)
        try:
            answer = self.backend.complete(prompt)
        except GatewayError as exc:
            raise SplitError(f"splitter backend failed: {exc}") from exc
        return parse_sections(answer)


@dataclass
class SegmentResult:
    subtexts: list[SubText]
    fallbacks: list[str] = field(default_factory=list)


def _tokens(lines: Sequence[Line]) -> int:
    return sum(count_tokens(t) for _, t in lines)


def segment(note: Note, l: int = 1000, n: int = 3, splitter: Splitter | None = None,
            overlap: int = 50) -> SegmentResult:
    if l < 1 or n < 2:
        raise ValueError("need l >= 1 and n >= 2")
    if overlap < 0:
        raise ValueError("overlap must be >= 0")
    splitter = splitter or EqualSplitter()
    fallback = EqualSplitter()
    lines = list(note.lines)
    if not lines:
        return SegmentResult([])
    cores: list[list[Line]] = []
    fallbacks: list[str] = []
    remaining = lines
    while _tokens(remaining) > l:
        prefix: list[Line] = []
        total = 0
        for ln in remaining:
            c = count_tokens(ln[1])
            if total + c > l:
                break
            prefix.append(ln)
            total += c
        if not prefix:
            # one line longer than l: it cannot be cut, so it becomes its own sub-text
            cores.append([remaining[0]])
            remaining = remaining[1:]
            continue
        parts = min(n, len(prefix))
        if parts < 2:
            cores.append(prefix)
            remaining = remaining[len(prefix):]
            continue
        try:
            ranges = splitter.split(prefix, parts)
            check_ranges(prefix, ranges, parts)
        except SplitError as exc:
            msg = f"lines {prefix[0][0]}-{prefix[-1][0]}: {exc}"
            log.info("segmentation fallback for %s %s", note.note_id, msg)
            fallbacks.append(msg)
            ranges = fallback.split(prefix, parts)
        last_start = ranges[-1][0]
        for a, b in ranges[:-1]:
            cores.append([ln for ln in prefix if a <= ln[0] <= b])
        remaining = [ln for ln in remaining if ln[0] >= last_start]
    if remaining:
        cores.append(remaining)
    return SegmentResult(_with_overlap(note.note_id, cores, overlap), fallbacks)


def _take(lines: Sequence[Line], budget: int) -> list[Line]:
    out, total = [], 0
    for ln in lines:
        c = count_tokens(ln[1])
        if total + c > budget:
            break
        out.append(ln)
        total += c
    return out


def _with_overlap(note_id: str, cores: list[list[Line]], overlap: int) -> list[SubText]:
    subs = []
    for i, core in enumerate(cores):
        before = list(reversed(_take(list(reversed(cores[i - 1])), overlap))) if i > 0 and overlap else []
        after = _take(cores[i + 1], overlap) if i + 1 < len(cores) and overlap else []
        subs.append(SubText(
            parent_note_id=note_id,
            index=i,
            line_range=(core[0][0], core[-1][0]),
            lines=tuple(before + core + after),
            overlap_prefix_tokens=_tokens(before),
            overlap_suffix_tokens=_tokens(after),
        ))
    return subs

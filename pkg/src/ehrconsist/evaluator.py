"""Recall, precision and intersection per note, macro-averaged over a corpus."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .entities import normalize_surface

EXCLUDED_REASONS = {"type3", "history"}


class EvaluationError(ValueError):
    pass


class MatchRule(str, Enum):
    SURFACE_LINE = "surface+line"
    SURFACE = "surface"


@dataclass(frozen=True)
class Scored:
    surface: str
    line: int
    label: str  # "Consistent" / "Inconsistent" (other labels never agree with gold)
    value: str | None = None


@dataclass(frozen=True)
class GoldEntity:
    surface: str
    entity_type: int
    line: int
    label: str
    errors: int = 0
    error_columns: tuple[tuple[str, str], ...] = ()
    value: str | None = None
    missing: bool = False

    def __post_init__(self) -> None:
        if self.entity_type not in (1, 2, 3):
            raise EvaluationError(f"entity_type must be 1, 2 or 3, got {self.entity_type}")


@dataclass(frozen=True)
class GoldRecord:
    note_id: str
    category: str
    entities: tuple[GoldEntity, ...]

    @property
    def scored(self) -> list[Scored]:
        return [Scored(e.surface, e.line, e.label, e.value) for e in self.entities if e.entity_type != 3]

    def to_json(self) -> dict[str, Any]:
        ents = []
        for e in self.entities:
            d = {"entity": e.surface, "entity_type": str(e.entity_type), "position": str(e.line),
                 "tag": e.label, "errors": str(e.errors),
                 "error_columns": [f"{t}.{c}" for t, c in e.error_columns]}
            if e.value is not None:
                d["value"] = e.value
            if e.missing:
                d["missing"] = True
            ents.append(d)
        return {"noteId": self.note_id, "category": self.category, "entities": ents}

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "GoldRecord":
        try:
            ents = []
            for e in d["entities"]:
                cols = tuple(tuple(c.split(".", 1)) for c in e.get("error_columns", ()))
                ents.append(GoldEntity(str(e["entity"]), int(e["entity_type"]), int(e["position"]),
                                       str(e["tag"]), int(e.get("errors", 0)), cols,
                                       e.get("value"), bool(e.get("missing", False))))
            return cls(str(d["noteId"]), str(d.get("category", "")), tuple(ents))
        except (KeyError, TypeError, ValueError) as exc:
            raise EvaluationError(f"malformed gold record: {exc}") from None


def load_gold(path: str | Path) -> list[GoldRecord]:
    p = Path(path)
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    out = []
    for f in files:
        data = json.loads(f.read_text(encoding="utf-8"))
        for rec in data if isinstance(data, list) else [data]:
            out.append(GoldRecord.from_json(rec))
    return out


def recognized_from_report(report: Mapping[str, Any]) -> list[Scored]:
    """Entities the system recognized, minus Type3 and history mentions."""
    out = []
    for e in report.get("entities", ()):
        if e.get("reason") in EXCLUDED_REASONS:
            continue
        m = e["mention"]
        values = m.get("values") or [None]
        out.append(Scored(m["surface"], int(m["line"]), e["label"], "/".join(v for v in values if v) or None))
    return out


@dataclass(frozen=True)
class MetricTriple:
    recall: float
    precision: float
    intersection: float | None  # None when the note has no correctly recognized entity
    correct: int = 0
    gold: int = 0
    recognized: int = 0
    matched: int = 0

    def to_json(self) -> dict[str, Any]:
        return {"recall": round(self.recall, 2), "precision": round(self.precision, 2),
                "intersection": None if self.intersection is None else round(self.intersection, 2),
                "counts": {"correct": self.correct, "gold": self.gold, "recognized": self.recognized,
                           "matched": self.matched}}


def _key(s: Scored, rule: MatchRule):
    surf = normalize_surface(s.surface)
    return (surf, s.line) if rule is MatchRule.SURFACE_LINE else (surf,)


def match(gold: Sequence[Scored], pred: Sequence[Scored], rule: MatchRule) -> list[tuple[Scored, Scored]]:
    """One-to-one pairing within each key group; equal values pair first, then input order."""
    groups_g: dict[Any, list[Scored]] = defaultdict(list)
    groups_p: dict[Any, list[Scored]] = defaultdict(list)
    for g in gold:
        groups_g[_key(g, rule)].append(g)
    for p in pred:
        groups_p[_key(p, rule)].append(p)
    pairs = []
    for k, gs in groups_g.items():
        ps = sorted(groups_p.get(k, []), key=lambda s: (s.value or "", s.label))
        gs = sorted(gs, key=lambda s: (s.value or "", s.label))
        free = list(ps)
        rest = []
        for g in gs:
            hit = next((p for p in free if p.value == g.value), None)
            if hit is None:
                rest.append(g)
            else:
                free.remove(hit)
                pairs.append((g, hit))
        for g in rest:
            if not free:
                break
            pairs.append((g, free.pop(0)))
    return pairs


def _pct(a: int, b: int) -> float:
    return 100.0 * a / b


def score_entities(gold: Sequence[Scored], pred: Sequence[Scored],
                   rule: MatchRule = MatchRule.SURFACE_LINE) -> MetricTriple:
    pairs = match(gold, pred, rule)
    correct = sum(1 for g, p in pairs if g.label == p.label)
    recall = _pct(correct, len(gold)) if gold else 0.0
    precision = _pct(correct, len(pred)) if pred else 0.0
    intersection = _pct(correct, len(pairs)) if pairs else None
    return MetricTriple(recall, precision, intersection, correct, len(gold), len(pred), len(pairs))


def score_note(gold: GoldRecord, report: Mapping[str, Any],
               rule: MatchRule = MatchRule.SURFACE_LINE) -> MetricTriple:
    if str(report.get("noteId")) != gold.note_id:
        raise EvaluationError(f"note mismatch: gold {gold.note_id} vs report {report.get('noteId')}")
    return score_entities(gold.scored, recognized_from_report(report), rule)


@dataclass
class CorpusScores:
    per_note: dict[str, MetricTriple]
    groups: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"groups": self.groups, "per_note": {k: v.to_json() for k, v in sorted(self.per_note.items())}}

    def table(self) -> str:
        rows = [("group", "notes", "recall", "precision", "intersection")]
        for name, g in self.groups.items():
            inter = "-" if g["intersection"] is None else f"{g['intersection']:.2f}"
            rows.append((name, str(g["notes"]), f"{g['recall']:.2f}", f"{g['precision']:.2f}", inter))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                         for r in rows)


def _mean(xs: Iterable[float]) -> float | None:
    xs = list(xs)
    return sum(xs) / len(xs) if xs else None


def _aggregate(triples: Sequence[MetricTriple]) -> dict[str, float | None]:
    recall = _mean(t.recall for t in triples if t.gold)
    return {
        "notes": len(triples),
        "recall": recall if recall is not None else 0.0,
        "precision": _mean(t.precision for t in triples) or 0.0,
        "intersection": _mean(t.intersection for t in triples if t.intersection is not None),
    }


def score_corpus(golds: Sequence[GoldRecord], reports: Sequence[Mapping[str, Any]],
                 rule: MatchRule = MatchRule.SURFACE_LINE) -> CorpusScores:
    by_id = {str(r.get("noteId")): r for r in reports}
    gold_ids = {g.note_id for g in golds}
    missing = sorted(gold_ids - set(by_id))
    extra = sorted(set(by_id) - gold_ids)
    if missing or extra:
        raise EvaluationError(f"unmatched notes: no report for {missing}, no gold for {extra}")
    per_note = {g.note_id: score_note(g, by_id[g.note_id], rule) for g in golds}
    by_cat: dict[str, list[MetricTriple]] = defaultdict(list)
    for g in golds:
        by_cat[g.category or "uncategorized"].append(per_note[g.note_id])
    groups = {cat: _aggregate(ts) for cat, ts in sorted(by_cat.items())}
    groups["total"] = _aggregate(list(per_note.values()))
    return CorpusScores(per_note, groups)


def load_reports(path: str | Path) -> list[dict[str, Any]]:
    p = Path(path)
    if p.is_dir() and (p / "reports").is_dir():
        p = p / "reports"
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    return [json.loads(f.read_text(encoding="utf-8")) for f in files]

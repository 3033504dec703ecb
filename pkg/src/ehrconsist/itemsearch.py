"""Item search: lexicon expansion plus character-bigram cosine retrieval over dictionary labels."""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

from .schema import SchemaProfile
from .store import RecordStore

_NON_ALNUM = re.compile(r"[^0-9a-z]+")

LEXICON_KINDS = ("abbrev", "brand")


def normalize(text: str) -> str:
    """Lowercase, turn every non-alphanumeric run into one space, trim."""
    return _NON_ALNUM.sub(" ", text.lower()).strip()


def bigrams(text: str) -> Counter:
    s = normalize(text)
    return Counter(s[i:i + 2] for i in range(len(s) - 1))


def _cosine(a: Counter, b: Counter, multiset: bool = True) -> float:
    if not multiset:
        a, b = Counter(set(a)), Counter(set(b))
    if not a or not b:
        return 0.0
    if a == b:
        return 1.0
    dot = sum(v * b[k] for k, v in a.items() if k in b)
    if dot == 0:
        return 0.0
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    return min(1.0, dot / (na * nb))


def bigram_cosine(a: str, b: str, multiset: bool = True) -> float:
    na, nb = normalize(a), normalize(b)
    if na and na == nb:
        return 1.0
    if len(na) < 2 or len(nb) < 2:
        return 0.0
    return _cosine(bigrams(a), bigrams(b), multiset)


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class ExpansionLexicon:
    abbrev_pairs: tuple[tuple[str, str], ...] = ()
    brand_pairs: tuple[tuple[str, str], ...] = ()

    def images(self, entity: str) -> list[str]:
        """One hop in either direction, case-insensitive."""
        key = entity.strip().lower()
        out: list[str] = []
        for a, b in (*self.abbrev_pairs, *self.brand_pairs):
            if a.lower() == key and b not in out:
                out.append(b)
            elif b.lower() == key and a not in out:
                out.append(a)
        return out

    def merged(self, other: "ExpansionLexicon") -> "ExpansionLexicon":
        return ExpansionLexicon(_uniq(self.abbrev_pairs + other.abbrev_pairs),
                                _uniq(self.brand_pairs + other.brand_pairs))

    @classmethod
    def parse(cls, text: str) -> "ExpansionLexicon":
        abbrev, brand = [], []
        for i, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip() or raw.lstrip().startswith("#"):
                continue
            parts = raw.rstrip("\r\n").split("\t")
            if len(parts) != 3 or not parts[1].strip() or not parts[2].strip():
                raise LexiconError(f"lexicon line {i}: expected kind<TAB>from<TAB>to")
            kind, a, b = (p.strip() for p in parts)
            if kind.lower() not in LEXICON_KINDS:
                raise LexiconError(f"lexicon line {i}: unknown kind {kind!r}")
            (abbrev if kind.lower() == "abbrev" else brand).append((a, b))
        return cls(_uniq(abbrev), _uniq(brand))

    @classmethod
    def load(cls, path: str | Path) -> "ExpansionLexicon":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        rows = [f"abbrev\t{a}\t{b}" for a, b in self.abbrev_pairs]
        rows += [f"brand\t{a}\t{b}" for a, b in self.brand_pairs]
        return "\n".join(rows) + ("\n" if rows else "")


def _uniq(pairs: Iterable[tuple[str, str]]) -> tuple[tuple[str, str], ...]:
    seen, out = set(), []
    for p in pairs:
        if p not in seen:
            seen.add(p)
            out.append(p)
    return tuple(out)


def default_lexicon() -> ExpansionLexicon:
    text = resources.files("ehrconsist").joinpath("data/lexicon.tsv").read_text(encoding="utf-8")
    return ExpansionLexicon.parse(text)


def expand(entity: str, lex: ExpansionLexicon) -> list[str]:
    """The variant set V, in a stable order (entity first)."""
    out = [entity]
    for img in lex.images(entity):
        if img not in out:
            out.append(img)
    return out


@dataclass(frozen=True)
class ItemHit:
    dict_table: str
    item_key: object
    label: str
    score: float
    source_variant: str

    def to_json(self) -> dict:
        return {"dict_table": self.dict_table, "item_key": str(self.item_key), "label": self.label,
                "score": round(self.score, 6), "variant": self.source_variant}


@dataclass
class _Candidate:
    order: int
    table: str
    key: object
    label: str
    grams: Counter


@dataclass
class ItemIndex:
    """Candidate labels of a frozen store, with bigram vectors precomputed."""

    profile: SchemaProfile
    candidates: list[_Candidate] = field(default_factory=list)

    @classmethod
    def build(cls, store: RecordStore) -> "ItemIndex":
        idx = cls(store.profile)
        seen = set()
        for order, src in enumerate(store.profile.item_sources):
            for row in store.rows(src.table):
                for col in src.label_columns:
                    label = row[col]
                    if label is None:
                        continue
                    k = (src.table, row[src.key_column], label)
                    if k in seen:
                        continue
                    seen.add(k)
                    idx.candidates.append(_Candidate(order, src.table, row[src.key_column], label,
                                                     bigrams(label)))
        return idx

    def search(self, entity: str, lex: ExpansionLexicon, threshold: float = 0.5,
               multiset: bool = True) -> list[ItemHit]:
        if not 0.0 <= threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        variants = expand(entity, lex)
        prepared = [(v, normalize(v), bigrams(v)) for v in variants]
        hits = []
        for cand in self.candidates:
            best, best_v = 0.0, ""
            norm_label = normalize(cand.label)
            for v, nv, grams in prepared:
                if nv and nv == norm_label:
                    s = 1.0
                elif len(nv) < 2 or len(norm_label) < 2:
                    s = 0.0
                else:
                    s = _cosine(grams, cand.grams, multiset)
                if s > best:
                    best, best_v = s, v
            # a hit needs a positive score at or above the threshold
            if best > 0.0 and best >= threshold:
                hits.append((cand.order, -best, cand.label, str(cand.key),
                             ItemHit(cand.table, cand.key, cand.label, best, best_v)))
        hits.sort(key=lambda h: h[:4])
        return [h[-1] for h in hits]


def search_items(entity: str, lex: ExpansionLexicon, store: RecordStore, profile: SchemaProfile | None = None,
                 threshold: float = 0.5, multiset: bool = True) -> list[ItemHit]:
    if profile is not None and profile is not store.profile and profile != store.profile:
        raise ValueError("profile does not match the store")
    return ItemIndex.build(store).search(entity, lex, threshold, multiset)

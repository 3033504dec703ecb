"""Schema profiles (MIMIC-style and OMOP-style), column roles and the cross-schema mapping."""
from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping

from .values import ValueKind

log = logging.getLogger(__name__)

T, D, DT, I = ValueKind.TEXT, ValueKind.DECIMAL, ValueKind.DATETIME, ValueKind.INTEGER


class ProfileName(str, Enum):
    MIMIC = "mimic"
    OMOP = "omop"

    @classmethod
    def parse(cls, text: str | "ProfileName") -> "ProfileName":
        if isinstance(text, ProfileName):
            return text
        key = text.strip().lower()
        aliases = {"mimic": cls.MIMIC, "mimicstyle": cls.MIMIC, "mimic-iii": cls.MIMIC,
                   "omop": cls.OMOP, "omopstyle": cls.OMOP}
        if key not in aliases:
            raise UnknownProfileError(f"unknown profile {text!r}")
        return aliases[key]


class ColumnRole(str, Enum):
    LABEL = "Label"
    VALUE = "Value"
    UNIT = "Unit"
    POINT_TIME = "PointTime"
    START_TIME = "StartTime"
    END_TIME = "EndTime"
    ORGANISM = "Organism"
    SPECIMEN = "Specimen"
    SUBJECT_KEY = "SubjectKey"
    ADMISSION_KEY = "AdmissionKey"
    ITEM_KEY = "ItemKey"
    CONCEPT_DOMAIN = "ConceptDomain"


TIME_ROLES = frozenset({ColumnRole.POINT_TIME, ColumnRole.START_TIME, ColumnRole.END_TIME})


class SchemaError(ValueError):
    pass


class UnknownProfileError(SchemaError):
    pass


class UnknownColumnError(SchemaError):
    pass


@dataclass(frozen=True)
class TableSpec:
    name: str
    columns: tuple[tuple[str, ValueKind], ...]
    roles: tuple[tuple[ColumnRole, tuple[str, ...]], ...] = ()
    primary_key: str | None = None
    is_dictionary: bool = False

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c for c, _ in self.columns)

    def kind(self, column: str) -> ValueKind:
        for c, k in self.columns:
            if c == column:
                return k
        raise UnknownColumnError(f"{self.name} has no column {column!r}")

    def has_column(self, column: str) -> bool:
        return column in self.column_names

    def role_columns(self, role: ColumnRole) -> tuple[str, ...]:
        for r, cols in self.roles:
            if r is role:
                return cols
        return ()

    def role_column(self, role: ColumnRole) -> str | None:
        cols = self.role_columns(role)
        return cols[0] if cols else None

    def has_role(self, role: ColumnRole) -> bool:
        return bool(self.role_columns(role))

    def role_of(self, column: str) -> ColumnRole | None:
        for r, cols in self.roles:
            if column in cols:
                return r
        return None

    @property
    def is_interval(self) -> bool:
        return self.has_role(ColumnRole.START_TIME)


@dataclass(frozen=True)
class Join:
    child_table: str
    child_column: str
    dict_table: str
    dict_column: str
    alias: str | None = None  # set when one dictionary is joined twice

    @property
    def ref(self) -> str:
        return self.alias or self.dict_table


@dataclass(frozen=True)
class ItemSource:
    """A table whose labels are candidates for item search."""

    table: str
    key_column: str
    label_columns: tuple[str, ...]


@dataclass(frozen=True)
class SchemaProfile:
    name: ProfileName
    tables: tuple[TableSpec, ...]
    joins: tuple[Join, ...]
    legal_pairs: tuple[tuple[str, str | None], ...]
    item_sources: tuple[ItemSource, ...]

    def table(self, name: str) -> TableSpec:
        key = name.lower()
        for t in self.tables:
            if t.name.lower() == key:
                return t
        raise UnknownColumnError(f"profile {self.name.value} has no table {name!r}")

    def has_table(self, name: str) -> bool:
        return any(t.name.lower() == name.lower() for t in self.tables)

    def canonical_table(self, name: str) -> str:
        return self.table(name).name

    @property
    def dictionary_tables(self) -> tuple[TableSpec, ...]:
        return tuple(t for t in self.tables if t.is_dictionary)

    @property
    def event_tables(self) -> tuple[TableSpec, ...]:
        return tuple(t for t in self.tables if not t.is_dictionary)

    def joins_for(self, child: str) -> tuple[Join, ...]:
        return tuple(j for j in self.joins if j.child_table.lower() == child.lower())

    def pair_for(self, event_table: str) -> tuple[str, str | None] | None:
        for ev, dt_ in self.legal_pairs:
            if ev.lower() == event_table.lower():
                return ev, dt_
        return None

    def item_source_for(self, pair: tuple[str, str | None]) -> str:
        """Item-search table whose hits are usable for this pair."""
        event, dict_table = pair
        return dict_table if dict_table is not None else event

    def validate(self) -> "SchemaProfile":
        names = [t.name.lower() for t in self.tables]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate table names")
        for t in self.tables:
            cols = t.column_names
            if len(set(cols)) != len(cols):
                raise SchemaError(f"duplicate columns in {t.name}")
            seen_roles = set()
            for role, rcols in t.roles:
                if role in seen_roles:
                    raise SchemaError(f"{t.name}: role {role} declared twice")
                seen_roles.add(role)
                for c in rcols:
                    if c not in cols:
                        raise SchemaError(f"{t.name}: role column {c} missing")
                if len(rcols) > 1 and role is not ColumnRole.LABEL:
                    raise SchemaError(f"{t.name}: role {role} maps to several columns")
            if t.primary_key is not None and t.primary_key not in cols:
                raise SchemaError(f"{t.name}: primary key {t.primary_key} missing")
            if not t.is_dictionary and t.has_role(ColumnRole.START_TIME):
                if t.has_role(ColumnRole.POINT_TIME) or not t.has_role(ColumnRole.END_TIME):
                    raise SchemaError(f"{t.name}: interval tables need Start+End and no PointTime")
        for j in self.joins:
            if not self.table(j.child_table).has_column(j.child_column):
                raise SchemaError(f"join column {j.child_table}.{j.child_column} missing")
            if not self.table(j.dict_table).has_column(j.dict_column):
                raise SchemaError(f"join column {j.dict_table}.{j.dict_column} missing")
        for ev, dt_ in self.legal_pairs:
            self.table(ev)
            if dt_ is not None:
                self.table(dt_)
                if not any(j.dict_table == dt_ for j in self.joins_for(ev)):
                    raise SchemaError(f"pair ({ev}, {dt_}) has no join")
        for src in self.item_sources:
            t = self.table(src.table)
            for c in (src.key_column, *src.label_columns):
                if not t.has_column(c):
                    raise SchemaError(f"item source column {src.table}.{c} missing")
        return self


def _roles(**kw: str | tuple[str, ...]) -> tuple[tuple[ColumnRole, tuple[str, ...]], ...]:
    out = []
    for key, cols in kw.items():
        out.append((ColumnRole[key.upper()], cols if isinstance(cols, tuple) else (cols,)))
    return tuple(out)


def _mimic_tables() -> tuple[TableSpec, ...]:
    point_event = lambda name, value_col="valuenum", unit_col="valueuom": TableSpec(  # noqa: E731
        name,
        (("row_id", I), ("subject_id", I), ("hadm_id", I), ("itemid", I), ("charttime", DT),
         (value_col, D), (unit_col, T)),
        _roles(subject_key="subject_id", admission_key="hadm_id", item_key="itemid",
               point_time="charttime", value=value_col, unit=unit_col),
        primary_key="row_id",
    )
    icd_event = lambda name: TableSpec(  # noqa: E731
        name,
        (("row_id", I), ("subject_id", I), ("hadm_id", I), ("seq_num", I), ("icd9_code", T)),
        _roles(subject_key="subject_id", admission_key="hadm_id", item_key="icd9_code"),
        primary_key="row_id",
    )
    icd_dict = lambda name: TableSpec(  # noqa: E731
        name,
        (("row_id", I), ("icd9_code", T), ("short_title", T), ("long_title", T)),
        _roles(item_key="icd9_code", label=("short_title", "long_title")),
        primary_key="row_id", is_dictionary=True,
    )
    item_dict = lambda name: TableSpec(  # noqa: E731
        name, (("row_id", I), ("itemid", I), ("label", T)),
        _roles(item_key="itemid", label="label"), primary_key="row_id", is_dictionary=True,
    )
    return (
        point_event("Chartevents"),
        point_event("Labevents"),
        TableSpec(
            "Prescriptions",
            (("row_id", I), ("subject_id", I), ("hadm_id", I), ("startdate", DT), ("enddate", DT),
             ("drug", T), ("dose_val_rx", D), ("dose_unit_rx", T)),
            _roles(subject_key="subject_id", admission_key="hadm_id", label="drug", item_key="drug",
                   start_time="startdate", end_time="enddate", value="dose_val_rx", unit="dose_unit_rx"),
            primary_key="row_id",
        ),
        TableSpec(
            "Inputevents_cv",
            (("row_id", I), ("subject_id", I), ("hadm_id", I), ("itemid", I), ("charttime", DT),
             ("amount", D), ("amountuom", T), ("rate", D), ("rateuom", T)),
            _roles(subject_key="subject_id", admission_key="hadm_id", item_key="itemid",
                   point_time="charttime", value="amount", unit="amountuom"),
            primary_key="row_id",
        ),
        TableSpec(
            "Inputevents_mv",
            (("row_id", I), ("subject_id", I), ("hadm_id", I), ("itemid", I), ("starttime", DT),
             ("endtime", DT), ("amount", D), ("amountuom", T), ("rate", D), ("rateuom", T)),
            _roles(subject_key="subject_id", admission_key="hadm_id", item_key="itemid",
                   start_time="starttime", end_time="endtime", value="amount", unit="amountuom"),
            primary_key="row_id",
        ),
        point_event("Outputevents"),
        TableSpec(
            "Microbiologyevents",
            (("row_id", I), ("subject_id", I), ("hadm_id", I), ("charttime", DT), ("spec_itemid", I),
             ("spec_type_desc", T), ("org_itemid", I), ("org_name", T)),
            _roles(subject_key="subject_id", admission_key="hadm_id", item_key="org_itemid",
                   point_time="charttime", organism="org_name", specimen="spec_type_desc"),
            primary_key="row_id",
        ),
        icd_event("Diagnoses_icd"),
        icd_event("Procedures_icd"),
        item_dict("D_items"),
        icd_dict("D_icd_diagnoses"),
        icd_dict("D_icd_procedures"),
        item_dict("D_labitems"),
    )


MIMIC_PAIRS: tuple[tuple[str, str | None], ...] = (
    ("Chartevents", "D_items"),
    ("Outputevents", "D_items"),
    ("Microbiologyevents", "D_items"),
    ("Inputevents_cv", "D_items"),
    ("Diagnoses_icd", "D_icd_diagnoses"),
    ("Procedures_icd", "D_icd_procedures"),
    ("Prescriptions", None),
    ("Inputevents_mv", "D_items"),
    ("Labevents", "D_labitems"),
)


def _mimic_profile() -> SchemaProfile:
    joins = (
        Join("Chartevents", "itemid", "D_items", "itemid"),
        Join("Labevents", "itemid", "D_labitems", "itemid"),
        Join("Inputevents_cv", "itemid", "D_items", "itemid"),
        Join("Inputevents_mv", "itemid", "D_items", "itemid"),
        Join("Outputevents", "itemid", "D_items", "itemid"),
        Join("Microbiologyevents", "spec_itemid", "D_items", "itemid", alias="spec_items"),
        Join("Microbiologyevents", "org_itemid", "D_items", "itemid", alias="org_items"),
        Join("Diagnoses_icd", "icd9_code", "D_icd_diagnoses", "icd9_code"),
        Join("Procedures_icd", "icd9_code", "D_icd_procedures", "icd9_code"),
    )
    sources = (
        ItemSource("D_labitems", "itemid", ("label",)),
        ItemSource("D_items", "itemid", ("label",)),
        ItemSource("Prescriptions", "drug", ("drug",)),
        ItemSource("D_icd_procedures", "icd9_code", ("short_title", "long_title")),
        ItemSource("D_icd_diagnoses", "icd9_code", ("short_title", "long_title")),
    )
    return SchemaProfile(ProfileName.MIMIC, _mimic_tables(), joins, MIMIC_PAIRS, sources)


def _omop_profile() -> SchemaProfile:
    tables = (
        TableSpec(
            "Concept",
            (("concept_id", I), ("concept_name", T), ("domain_id", T)),
            _roles(item_key="concept_id", label="concept_name", concept_domain="domain_id"),
            primary_key="concept_id", is_dictionary=True,
        ),
        TableSpec(
            "Measurement",
            (("measurement_id", I), ("person_id", I), ("visit_occurrence_id", I),
             ("measurement_concept_id", I), ("measurement_datetime", DT),
             ("value_as_number", D), ("unit_source_value", T)),
            _roles(subject_key="person_id", admission_key="visit_occurrence_id",
                   item_key="measurement_concept_id", point_time="measurement_datetime",
                   value="value_as_number", unit="unit_source_value"),
            primary_key="measurement_id",
        ),
        TableSpec(
            "Drug_exposure",
            (("drug_exposure_id", I), ("person_id", I), ("visit_occurrence_id", I),
             ("drug_concept_id", I), ("drug_exposure_start_date", DT),
             ("drug_exposure_end_date", DT), ("quantity", D), ("dose_unit_source_value", T)),
            _roles(subject_key="person_id", admission_key="visit_occurrence_id",
                   item_key="drug_concept_id", start_time="drug_exposure_start_date",
                   end_time="drug_exposure_end_date"),
            primary_key="drug_exposure_id",
        ),
        TableSpec(
            "Specimen",
            (("specimen_id", I), ("person_id", I), ("specimen_concept_id", I),
             ("specimen_datetime", DT)),
            _roles(subject_key="person_id", item_key="specimen_concept_id",
                   point_time="specimen_datetime"),
            primary_key="specimen_id",
        ),
        TableSpec(
            "Condition_occurrence",
            (("condition_occurrence_id", I), ("person_id", I), ("visit_occurrence_id", I),
             ("condition_concept_id", I)),
            _roles(subject_key="person_id", admission_key="visit_occurrence_id",
                   item_key="condition_concept_id"),
            primary_key="condition_occurrence_id",
        ),
        TableSpec(
            "Procedure_occurrence",
            (("procedure_occurrence_id", I), ("person_id", I), ("visit_occurrence_id", I),
             ("procedure_concept_id", I)),
            _roles(subject_key="person_id", admission_key="visit_occurrence_id",
                   item_key="procedure_concept_id"),
            primary_key="procedure_occurrence_id",
        ),
    )
    joins = (
        Join("Measurement", "measurement_concept_id", "Concept", "concept_id"),
        Join("Drug_exposure", "drug_concept_id", "Concept", "concept_id"),
        Join("Specimen", "specimen_concept_id", "Concept", "concept_id"),
        Join("Condition_occurrence", "condition_concept_id", "Concept", "concept_id"),
        Join("Procedure_occurrence", "procedure_concept_id", "Concept", "concept_id"),
    )
    pairs = (
        ("Measurement", "Concept"),
        ("Drug_exposure", "Concept"),
        ("Condition_occurrence", "Concept"),
        ("Procedure_occurrence", "Concept"),
    )
    sources = (ItemSource("Concept", "concept_id", ("concept_name",)),)
    return SchemaProfile(ProfileName.OMOP, tables, joins, pairs, sources)


@lru_cache(maxsize=None)
def _builtin(name: ProfileName) -> SchemaProfile:
    builder = _mimic_profile if name is ProfileName.MIMIC else _omop_profile
    return builder().validate()


def load_profile(name: str | ProfileName, override_file: str | Path | None = None) -> SchemaProfile:
    """Return the built-in profile, optionally with column names renamed from an INI file.

    Override file format (one section per table)::

        [Chartevents]
        valuenum = value_num
    """
    profile = _builtin(ProfileName.parse(name))
    if override_file is None:
        return profile
    return apply_overrides(profile, Path(override_file).read_text(encoding="utf-8"))


def apply_overrides(profile: SchemaProfile, text: str) -> SchemaProfile:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep column-name case
    cp.read_string(text)
    renames: dict[str, dict[str, str]] = {}
    for section in cp.sections():
        tname = profile.canonical_table(section)
        spec = profile.table(tname)
        for old, new in cp.items(section):
            if not spec.has_column(old):
                raise UnknownColumnError(f"override names unknown column {tname}.{old}")
            renames.setdefault(tname, {})[old] = new.strip()

    def ren(t: str, c: str) -> str:
        return renames.get(t, {}).get(c, c)

    tables = []
    for t in profile.tables:
        tables.append(replace(
            t,
            columns=tuple((ren(t.name, c), k) for c, k in t.columns),
            roles=tuple((r, tuple(ren(t.name, c) for c in cols)) for r, cols in t.roles),
            primary_key=ren(t.name, t.primary_key) if t.primary_key else None,
        ))
    joins = tuple(replace(j, child_column=ren(j.child_table, j.child_column),
                          dict_column=ren(j.dict_table, j.dict_column)) for j in profile.joins)
    sources = tuple(replace(s, key_column=ren(s.table, s.key_column),
                            label_columns=tuple(ren(s.table, c) for c in s.label_columns))
                    for s in profile.item_sources)
    return replace(profile, tables=tuple(tables), joins=joins, item_sources=sources).validate()


# ---------------------------------------------------------------------------
# MIMIC <-> OMOP mapping

ColumnRef = tuple[str, str]  # (table, column)

_MAPPING_ROWS: tuple[tuple[str, str], ...] = (
    ("Chartevents.charttime", "Measurement.measurement_datetime"),
    ("Chartevents.valuenum", "Measurement.value_as_number"),
    ("Chartevents.valueuom", "Measurement.unit_source_value"),
    ("Labevents.charttime", "Measurement.measurement_datetime"),
    ("Labevents.valuenum", "Measurement.value_as_number"),
    ("Labevents.valueuom", "Measurement.unit_source_value"),
    ("Outputevents.charttime", "Measurement.measurement_datetime"),
    ("Outputevents.valuenum", "Measurement.value_as_number"),
    ("Outputevents.valueuom", "Measurement.unit_source_value"),
    ("Microbiologyevents.charttime", "Measurement.measurement_datetime"),
    ("Microbiologyevents.charttime", "Specimen.specimen_datetime"),
    ("Microbiologyevents.org_name", "Concept.concept_name"),
    ("Microbiologyevents.spec_type_desc", "Concept.concept_name"),
    ("Inputevents_mv.starttime", "Drug_exposure.drug_exposure_start_date"),
    ("Inputevents_mv.endtime", "Drug_exposure.drug_exposure_end_date"),
    ("Inputevents_mv.amount", "-"),
    ("Inputevents_mv.amountuom", "-"),
    ("Inputevents_mv.rate", "-"),
    ("Inputevents_mv.rateuom", "-"),
    ("Inputevents_cv.charttime", "Drug_exposure.drug_exposure_start_date"),
    ("Inputevents_cv.charttime", "Drug_exposure.drug_exposure_end_date"),
    ("Inputevents_cv.amount", "-"),
    ("Inputevents_cv.amountuom", "-"),
    ("Inputevents_cv.rate", "-"),
    ("Inputevents_cv.rateuom", "-"),
    ("Prescriptions.startdate", "Drug_exposure.drug_exposure_start_date"),
    ("Prescriptions.enddate", "Drug_exposure.drug_exposure_end_date"),
    ("Prescriptions.dose_val_rx", "-"),
    ("Prescriptions.dose_unit_rx", "-"),
    ("Prescriptions.drug", "Concept.concept_name"),
    ("D_items.label", "Concept.concept_name"),
    ("D_labitems.label", "Concept.concept_name"),
    ("D_icd_diagnoses.short_title", "Concept.concept_name"),
    ("D_icd_diagnoses.long_title", "Concept.concept_name"),
    ("D_icd_procedures.short_title", "Concept.concept_name"),
    ("D_icd_procedures.long_title", "Concept.concept_name"),
)

# table-level correspondences used by data migration (not column semantics)
TABLE_COUNTERPARTS: Mapping[str, str] = {
    "Chartevents": "Measurement",
    "Labevents": "Measurement",
    "Outputevents": "Measurement",
    "Microbiologyevents": "Measurement",
    "Inputevents_mv": "Drug_exposure",
    "Inputevents_cv": "Drug_exposure",
    "Prescriptions": "Drug_exposure",
    "Diagnoses_icd": "Condition_occurrence",
    "Procedures_icd": "Procedure_occurrence",
    "D_items": "Concept",
    "D_labitems": "Concept",
    "D_icd_diagnoses": "Concept",
    "D_icd_procedures": "Concept",
}


def _split(ref: str) -> ColumnRef:
    table, _, column = ref.partition(".")
    if not column:
        raise SchemaError(f"expected Table.column, got {ref!r}")
    return table, column


@dataclass(frozen=True)
class SchemaMapping:
    """Column correspondences; ``None`` on the right is the no-counterpart marker."""

    pairs: tuple[tuple[ColumnRef, ColumnRef | None], ...]
    table_counterparts: Mapping[str, str] = field(default_factory=lambda: dict(TABLE_COUNTERPARTS))

    def sources(self) -> frozenset[ColumnRef]:
        return frozenset(s for s, _ in self.pairs)

    def targets(self) -> frozenset[ColumnRef]:
        return frozenset(t for _, t in self.pairs if t is not None)

    def inverse(self) -> "SchemaMapping":
        inv = tuple((t, s) for s, t in self.pairs if t is not None)
        rev_tables = {}
        for k, v in self.table_counterparts.items():
            rev_tables.setdefault(v, k)
        return SchemaMapping(inv, rev_tables)


def default_mapping() -> SchemaMapping:
    pairs = []
    for src, dst in _MAPPING_ROWS:
        pairs.append((_split(src), None if dst == "-" else _split(dst)))
    return SchemaMapping(tuple(pairs))


def _norm(ref: ColumnRef) -> ColumnRef:
    return ref[0].lower(), ref[1].lower()


def translate_column(mapping: SchemaMapping, src: str | ColumnRef) -> tuple[ColumnRef, ...]:
    """All counterparts of ``src``; an empty tuple means "no counterpart".

    Raises UnknownColumnError when ``src`` is not covered by the mapping at all.
    """
    ref = _split(src) if isinstance(src, str) else src
    key = _norm(ref)
    found = False
    out: list[ColumnRef] = []
    for s, t in mapping.pairs:
        if _norm(s) == key:
            found = True
            if t is not None and t not in out:
                out.append(t)
    if not found:
        raise UnknownColumnError(f"column {ref[0]}.{ref[1]} is not covered by the mapping")
    return tuple(out)


def roles_compatible(a: ColumnRole | None, b: ColumnRole | None) -> bool:
    """Same role, or both time roles (point and interval timestamps are one family)."""
    if a is None or b is None:
        return False
    return a is b or (a in TIME_ROLES and b in TIME_ROLES)


def iter_role_columns(profile: SchemaProfile, roles: Iterable[ColumnRole]) -> Iterable[tuple[TableSpec, ColumnRole, str]]:
    wanted = set(roles)
    for t in profile.event_tables:
        for r, cols in t.roles:
            if r in wanted:
                for c in cols:
                    yield t, r, c

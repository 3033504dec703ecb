import filecmp

import pytest

from ehrconsist.fixtures import FixtureError, InjectionSpec, generate
from ehrconsist.gateway import BackendConfig, BackendKind, ScriptedBackend
from ehrconsist.schema import load_profile
from ehrconsist.verifier import Pipeline, RunConfig, verify_corpus


def run(fx):
    profile = load_profile("mimic")
    deps = Pipeline(profile, fx.store("mimic"), ScriptedBackend(fx.script))
    return verify_corpus(fx.notes, deps, RunConfig(backend=BackendConfig(BackendKind.SCRIPTED, script_path="-")))


def test_no_injections_means_everything_consistent():
    fx = generate(InjectionSpec(seed=3, notes=4, entities_per_note=6))
    assert fx.injected_count == 0
    labels = {e.label for r in run(fx) for e in r.entities if e.reason is None}
    assert labels == {"Consistent"}
    assert all(g.label == "Consistent" for rec in fx.gold for g in rec.entities if g.entity_type != 3)


def test_same_seed_same_bytes(tmp_path):
    spec = InjectionSpec(seed=11, notes=3, entities_per_note=5, time_shift=2, value_perturb=2)
    a = generate(spec).write(tmp_path / "a")
    b = generate(spec).write(tmp_path / "b")
    cmp = filecmp.dircmp(a, b)

    def same(c):
        return not (c.diff_files or c.left_only or c.right_only) and all(same(s) for s in c.subdirs.values())

    assert same(cmp)
    assert (a / "notes.jsonl").read_bytes() == (b / "notes.jsonl").read_bytes()


def test_single_one_hour_shift_is_caught_and_localized():
    fx = generate(InjectionSpec(seed=5, notes=1, entities_per_note=8, time_shift=1, time_shift_hours=(1,)))
    [entry] = [e for e in fx.ledger if e["error"]]
    assert entry["shift_hours"] == 1
    inconsistent = [e for r in run(fx) for e in r.entities if e.label == "Inconsistent"]
    assert len(inconsistent) == 1
    attr = inconsistent[0].attribution
    assert not attr.missing
    assert {tuple(c.split(".", 1)) for c in entry["error_columns"]} == set(attr.error_columns)


def test_impossible_specs_rejected():
    with pytest.raises(FixtureError):
        generate(InjectionSpec(notes=1, entities_per_note=2, value_perturb=3))
    with pytest.raises(FixtureError):
        generate(InjectionSpec(notes=1, entities_per_note=2, time_shift=1, time_shift_hours=(0,)))
    with pytest.raises(FixtureError):
        generate(InjectionSpec(notes=-1))


def test_counts_and_omop_twin(corpus):
    assert corpus.entity_count == 200
    assert corpus.injected_count == 44
    omop = load_profile("omop")
    assert set(corpus.omop_tables) == {t.name for t in omop.tables}
    assert {g.note_id for g in corpus.omop_gold} == {g.note_id for g in corpus.gold}

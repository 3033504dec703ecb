import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrconsist.gateway import Script, ScriptedBackend
from ehrconsist.notes import Note, NoteCategory
from ehrconsist.segment import (BackendSplitter, EqualSplitter, SplitError, check_ranges, count_tokens,
                                parse_sections, segment)


def note_from_counts(counts, start=1):
    lines = tuple((start + i, " ".join(["tok"] * c)) for i, c in enumerate(counts))
    return Note("n", NoteCategory.NURSING, "1", "2150-01-01", "2150-01-02", lines)


def test_short_note_is_one_subtext():
    note = note_from_counts([10, 20, 30])
    [sub] = segment(note, l=100).subtexts
    assert sub.lines == note.lines and sub.line_range == (1, 3)


def test_2500_tokens_even_split():
    note = note_from_counts([25] * 100)
    res = segment(note, l=1000, n=3, splitter=EqualSplitter())
    cores = [ln for s in res.subtexts for ln in s.core_lines]
    assert cores == list(note.lines)
    assert all(s.core_tokens <= 1000 for s in res.subtexts)
    assert not res.fallbacks


def test_parse_sections_example():
    assert parse_sections("[section1: 44-59, section2: 60-69, section3: 70-73]") == [(44, 59), (60, 69), (70, 73)]
    for bad in ("section1: 1-2", "[section2: 1-2]", "[section1: 1-2]\n[section1: 3-4]", "Sure! [section1: 1-3]"):
        with pytest.raises(SplitError):
            parse_sections(bad)


def test_backend_splitter_keeps_first_two_sections():
    # lines 44..73, 10 tokens each; l covers all 30 lines, so pass the remainder via extra lines
    counts = [10] * 30 + [10] * 10
    note = note_from_counts(counts, start=44)
    script = Script()
    script.add("note_segmentation", "n", "44-73", "[section1: 44-59, section2: 60-69, section3: 70-73]")
    script.defaults["note_segmentation"] = "not parseable"
    res = segment(note, l=300, n=3, splitter=BackendSplitter(ScriptedBackend(script), "n"), overlap=0)
    assert res.subtexts[0].line_range == (44, 59)
    assert res.subtexts[1].line_range == (60, 69)
    assert [ln for s in res.subtexts for ln in s.core_lines] == list(note.lines)


def test_bad_splitter_output_falls_back_and_is_recorded():
    class Broken:
        def split(self, lines, parts):
            return [(lines[0][0], lines[-1][0])]

    note = note_from_counts([10] * 50)
    res = segment(note, l=100, n=3, splitter=Broken())
    assert res.fallbacks
    assert [ln for s in res.subtexts for ln in s.core_lines] == list(note.lines)


def test_check_ranges_rejects_gaps_and_overlaps():
    lines = [(1, "a"), (2, "b"), (3, "c")]
    check_ranges(lines, [(1, 1), (2, 3)], 2)
    for ranges in ([(1, 1), (3, 3)], [(1, 2), (2, 3)], [(1, 1), (2, 2)], [(2, 1), (2, 3)]):
        with pytest.raises(SplitError):
            check_ranges(lines, ranges, 2)


def test_overlap_is_tagged_not_core():
    note = note_from_counts([10] * 40)
    res = segment(note, l=100, n=3, overlap=15)
    for a, b in zip(res.subtexts, res.subtexts[1:]):
        assert a.overlap_suffix_tokens > 0 and b.overlap_prefix_tokens > 0
        assert len(a.lines) > len(a.core_lines)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        segment(note_from_counts([1]), l=0)
    with pytest.raises(ValueError):
        segment(note_from_counts([1]), n=1)


def test_empty_note():
    assert segment(note_from_counts([])).subtexts == []


counts = st.lists(st.integers(0, 60), min_size=1, max_size=120)


@settings(max_examples=200, deadline=None)
@given(counts, st.integers(20, 400), st.integers(2, 5), st.integers(0, 60))
def test_coverage_and_bounds(cs, l, n, overlap):
    note = note_from_counts(cs)
    subs = segment(note, l=l, n=n, overlap=overlap).subtexts
    assert [ln for s in subs for ln in s.core_lines] == list(note.lines)
    for s in subs:
        # a single line longer than l cannot be cut and becomes its own core
        assert s.core_tokens <= l or len(s.core_lines) == 1
        assert s.line_range[0] <= s.line_range[1]
    assert [s.index for s in subs] == list(range(len(subs)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=80), st.integers(1, 30))
def test_count_monotone_in_length(cs, extra):
    shorter = segment(note_from_counts(cs), l=100, n=3).subtexts
    longer = segment(note_from_counts(cs + [extra]), l=100, n=3).subtexts
    assert len(longer) >= len(shorter)


def test_count_tokens_is_whitespace_runs():
    assert count_tokens("  a\tb \n c ") == 3
    assert count_tokens("") == 0

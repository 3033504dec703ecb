import json

import pytest

from ehrconsist.cli import main
from ehrconsist.evaluator import GoldEntity, GoldRecord


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fx")
    assert main(["gen-fixtures", "--out", str(out), "--seed", "3", "--notes", "5", "--entities-per-note", "6",
                 "--time-shift", "2", "--value-perturb", "2", "--unit-swap", "1", "--missing", "1",
                 "--compound", "1"]) == 0
    return out


def verify_args(fx, out, *extra):
    return ["verify", "--db", str(fx / "mimic" / "db"), "--notes", str(fx / "notes.jsonl"),
            "--backend", "scripted", "--script", str(fx / "mimic" / "script.json"), "--out", str(out), *extra]


def test_gen_verify_evaluate_happy_path(fixture_dir, tmp_path, capsys):
    assert (fixture_dir / "manifest.json").is_file()
    run = tmp_path / "run"
    assert main(verify_args(fixture_dir, run)) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "verify" and "config_digest" in manifest
    assert len(list((run / "reports").glob("*.json"))) == 5
    capsys.readouterr()
    assert main(["evaluate", "--gold", str(fixture_dir / "mimic" / "gold"), "--reports", str(run),
                 "--out", str(tmp_path / "ev")]) == 0
    table = capsys.readouterr().out
    assert "total" in table and "100.00" in table
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert metrics["groups"]["total"]["recall"] == 100.0


def test_parallel_runs_write_identical_reports(fixture_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(verify_args(fixture_dir, a, "--parallelism", "1")) == 0
    assert main(verify_args(fixture_dir, b, "--parallelism", "8")) == 0
    for f in sorted((a / "reports").glob("*.json")):
        assert f.read_bytes() == (b / "reports" / f.name).read_bytes()


def test_localize_command(fixture_dir, tmp_path, capsys):
    run = tmp_path / "run"
    main(verify_args(fixture_dir, run))
    capsys.readouterr()
    assert main(["localize", "--db", str(fixture_dir / "mimic" / "db"), "--reports", str(run),
                 "--out", str(tmp_path / "loc")]) == 0
    results = json.loads((tmp_path / "loc" / "localization.json").read_text())
    assert results and all("entity" in r for r in results)


def test_config_file_is_read_and_flags_win(fixture_dir, tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(f"[run]\nthreshold = 0.5\nparallelism = 2\nout = {tmp_path / 'from-ini'}\n")
    assert main(verify_args(fixture_dir, tmp_path / "from-flag", "--config", str(ini))) == 0
    assert (tmp_path / "from-flag" / "manifest.json").is_file()
    assert not (tmp_path / "from-ini").exists()
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nbogus = 1\n")
    assert main(verify_args(fixture_dir, tmp_path / "x", "--config", str(bad))) == 2


def test_missing_db_is_usage_error(fixture_dir, capsys):
    assert main(["verify", "--notes", str(fixture_dir / "notes.jsonl"), "--backend", "scripted",
                 "--script", str(fixture_dir / "mimic" / "script.json")]) == 2
    assert "--db" in capsys.readouterr().err


def test_evaluate_worked_example(tmp_path, capsys):
    gold = GoldRecord("n1", "PhysicianNote", (GoldEntity("e1", 1, 1, "Inconsistent"),
                                               GoldEntity("e2", 1, 2, "Consistent"),
                                               GoldEntity("e3", 1, 3, "Consistent")))
    (tmp_path / "gold.json").write_text(json.dumps(gold.to_json()))

    def ent(surface, line, label):
        return {"mention": {"surface": surface, "line": line, "values": []}, "label": label, "reason": None}

    rdir = tmp_path / "reports"
    rdir.mkdir()
    (rdir / "n1.json").write_text(json.dumps({"noteId": "n1", "entities": [
        ent("e1", 1, "Inconsistent"), ent("e3", 3, "Inconsistent"), ent("e4", 4, "Consistent")]}))
    assert main(["evaluate", "--gold", str(tmp_path / "gold.json"), "--reports", str(rdir)]) == 0
    out = capsys.readouterr().out
    total = next(line for line in out.splitlines() if line.startswith("total"))
    assert total.split()[2:] == ["33.33", "33.33", "50.00"]


def test_evaluate_with_no_reports_fails(tmp_path, capsys):
    gold = GoldRecord("n1", "", (GoldEntity("e1", 1, 1, "Consistent"),))
    (tmp_path / "gold.json").write_text(json.dumps(gold.to_json()))
    (tmp_path / "empty").mkdir()
    assert main(["evaluate", "--gold", str(tmp_path / "gold.json"), "--reports", str(tmp_path / "empty")]) == 1
    assert "EvaluationError" in capsys.readouterr().err


def test_ingest_reports_counts(fixture_dir, capsys):
    assert main(["ingest", "--db", str(fixture_dir / "mimic" / "db"), "--notes",
                 str(fixture_dir / "notes.jsonl")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["notes"] == 5 and summary["tables"]["Chartevents"] > 0


def test_bad_db_dir_exits_nonzero(tmp_path, capsys):
    assert main(["ingest", "--db", str(tmp_path / "nope")]) == 1

#!/usr/bin/env python3
"""Test listening-test ingestion, correlation reports, scatter export and metric comparison"""
import json
import logging
from pathlib import Path

import pandas as pd
import pytest

from check_listening_tests import list_tests, validate_tests
from src.errors import CoverageError, ValidationError
from src.evalreport import (
    ALL_TESTS,
    OVERALL,
    compare_metrics,
    evaluate,
    export_scatter,
    load_listening_test,
    load_predictions,
    load_registry,
    load_tests,
    matched_rows,
    render_comparison,
    write_report,
)


def _write_test(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def _rows(n_items=4, conditions=("ref", "low", "mid"), subgroup=lambda i: "Music" if i % 2 else "Speech"):
    rows = []
    for i in range(n_items):
        for c, condition in enumerate(conditions):
            rows.append({"item_id": f"i{i}", "condition": condition, "test_path": f"audio/{i}_{condition}.wav",
                         "subjective": 90.0 - 30.0 * c + i, "subgroup": subgroup(i)})
    return rows


@pytest.fixture
def registry(tmp_path):
    _write_test(tmp_path / "coding" / "a.csv", _rows())
    _write_test(tmp_path / "coding" / "b.csv", _rows(3, subgroup=lambda i: ""))
    entries = [
        {"id": "A", "filename": "a.csv", "category": "coding", "title": "A", "scale": "mushra",
         "subgroups": ["Music", "Speech", "Mix"]},
        {"id": "B", "filename": "b.csv", "category": "coding", "title": "B", "scale": "mushra", "subgroups": []},
        {"id": "C", "filename": "c.csv", "category": "separation", "title": "C", "scale": "mushra"},
    ]
    path = tmp_path / "tests_registry.json"
    path.write_text(json.dumps({"tests": entries}))
    return path


def _predictions(tests, noise=0.0):
    rows = []
    for t in tests:
        for r in t.rows.itertuples():
            rows.append({"test": t.name, "item_id": r.item_id, "condition": r.condition,
                         "prediction": r.subjective / 10.0 + noise * (int(r.item_id[1:]) % 3), "metric": "m"})
    return pd.DataFrame(rows)


def test_listener_columns_are_averaged(tmp_path):
    path = _write_test(tmp_path / "t.csv", [
        {"item_id": "i0", "condition": "x", "test_path": "x.wav", "listener_1": 60, "listener_2": 80},
        {"item_id": "i1", "condition": "x", "test_path": "y.wav", "listener_1": 10, "listener_2": 20},
    ])
    test = load_listening_test(path, "T", "mushra")
    assert list(test.rows["subjective"]) == [70.0, 15.0]
    assert test.rows["test_path"].iloc[0] == str(tmp_path / "x.wav")
    assert list(test.rows["subgroup"]) == ["", ""]


def test_listening_test_validation(tmp_path):
    dupes = _write_test(tmp_path / "d.csv", _rows(1) + _rows(1))
    with pytest.raises(ValidationError, match="duplicate"):
        load_listening_test(dupes, "D", "mushra")
    with pytest.raises(ValidationError, match="mos scale"):
        load_listening_test(_write_test(tmp_path / "s.csv", _rows(1)), "S", "mos")
    no_path = _write_test(tmp_path / "n.csv", [{"item_id": "i", "condition": "c", "subjective": 3.0}])
    with pytest.raises(ValidationError, match="test_path"):
        load_listening_test(no_path, "N", "mos")


def test_load_tests_skips_absent_files_unless_named(registry):
    assert [t.name for t in load_tests(registry)] == ["A", "B"]
    assert [t.name for t in load_tests(registry, ["B"])] == ["B"]
    with pytest.raises(ValidationError, match="file not found"):
        load_tests(registry, ["C"])
    with pytest.raises(ValidationError, match="not in the registry"):
        load_tests(registry, ["Z"])


def test_evaluate_rows(registry):
    tests = load_tests(registry)
    report = evaluate(_predictions(tests), tests, metadata={"metric": "m"})
    keys = [(r["test"], r["subgroup"]) for r in report.rows]
    assert keys == [("A", OVERALL), ("A", "Music"), ("A", "Speech"), ("B", OVERALL),
                    ("coding", OVERALL), (ALL_TESTS, OVERALL)]
    by_key = {(r["test"], r["subgroup"]): r for r in report.rows}
    assert by_key[("A", OVERALL)]["pcc"] == pytest.approx(1.0)
    assert by_key[("A", OVERALL)]["n_items"] == 12
    assert by_key[(ALL_TESTS, OVERALL)]["n_items"] == 21
    assert report.metadata == {"metric": "m", "grouping": "per_item"}


def test_small_groups_report_null(registry):
    tests = load_tests(registry, ["B"])
    preds = _predictions(tests)
    tests[0].rows = tests[0].rows.iloc[:2]
    (row,) = evaluate(preds, tests).rows
    assert row["pcc"] is None and row["srcc"] is None and row["n_items"] == 2


def test_missing_predictions_are_a_coverage_error(registry):
    tests = load_tests(registry)
    preds = _predictions(tests).iloc[1:]
    with pytest.raises(CoverageError) as excinfo:
        evaluate(preds, tests)
    assert excinfo.value.missing == ["A/i0/ref"]


def test_per_condition_grouping(registry):
    tests = load_tests(registry, ["B"])
    rows = matched_rows(_predictions(tests), tests, "per_condition")
    assert sorted(rows["condition"]) == ["low", "mid", "ref"]
    assert rows.loc[rows["condition"] == "ref", "subjective"].item() == pytest.approx(91.0)
    with pytest.raises(ValidationError):
        matched_rows(_predictions(tests), tests, "per_listener")


def test_load_predictions_column_choice(tmp_path):
    base = {"test": ["A", "A"], "item_id": ["1", "2"], "condition": ["c", "c"]}
    pd.DataFrame({**base, "distance": [0.5, 1.0], "mapped_score": [None, None]}).to_csv(tmp_path / "d.csv", index=False)
    pd.DataFrame({**base, "distance": [0.5, 1.0], "mapped_score": [80.0, 40.0]}).to_csv(tmp_path / "m.csv", index=False)
    pd.DataFrame({**base, "score": [3.0, 4.0]}).to_csv(tmp_path / "peaq.csv", index=False)
    assert list(load_predictions(tmp_path / "d.csv")["prediction"]) == [-0.5, -1.0]
    assert list(load_predictions(tmp_path / "m.csv")["prediction"]) == [80.0, 40.0]
    external = load_predictions(tmp_path / "peaq.csv")
    assert list(external["prediction"]) == [3.0, 4.0]
    assert external["metric"].iloc[0] == "peaq"


def test_export_scatter(registry, tmp_path, caplog):
    tests = load_tests(registry)
    with caplog.at_level(logging.WARNING):
        points, lines = export_scatter(_predictions(tests), tests, tmp_path / "out" / "scatter_m.csv")
    assert "'Mix' has no rows" in caplog.text
    frame = pd.read_csv(points, keep_default_na=False)
    assert list(frame.columns) == ["prediction", "subjective", "test_name", "subgroup"]
    assert len(frame) == 21
    regression = pd.read_csv(lines)
    assert list(regression["test_name"]) == ["A", "B"]
    assert regression["slope"].tolist() == pytest.approx([10.0, 10.0])


def test_reports_and_comparison(registry, tmp_path):
    tests = load_tests(registry)
    ours = evaluate(_predictions(tests), tests)
    theirs = evaluate(_predictions(tests, noise=5.0), tests)
    text, payload = write_report(ours, tmp_path, "report_ours")
    assert "Overall" in text.read_text()
    assert json.loads(payload.read_text())["rows"] == ours.rows

    table = compare_metrics({"ours": ours, "theirs": theirs})
    assert list(table.columns) == ["test", "subgroup", "ours_PCC", "ours_SRCC", "theirs_PCC", "theirs_SRCC"]
    assert len(table) == len(ours.rows)
    assert "ours_PCC" in render_comparison(table)


def test_registry_checker(registry, tmp_path, capsys):
    list_tests(registry)
    out = capsys.readouterr().out
    assert "✅ A" in out and "⏳ C" in out
    assert "Status: 2/3" in out
    assert validate_tests(registry) == 0
    _write_test(tmp_path / "coding" / "b.csv", _rows(1) + _rows(1))
    assert validate_tests(registry) == 1


def test_shipped_registry_lists_every_test():
    registry = load_registry(Path(__file__).parent / "listening_tests" / "tests_registry.json")
    ids = [t["id"] for t in registry["tests"]]
    assert ids == ["IgorC96Multiformat", "ODAQ", "USAC_t1", "USAC_t2", "USAC_t3", "PEASS", "SAOC", "SASSEC", "SiSEC08"]

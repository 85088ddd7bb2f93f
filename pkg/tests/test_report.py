import csv
import json

import numpy as np
import pytest

from curbsight.evaluation import EvaluationError, load_coco_gt, load_predictions
from curbsight.report import ALL, Run, build_report
from conftest import FIXTURES

EVAL = FIXTURES / "eval"


@pytest.fixture(scope="module")
def gt(schema):
    return load_coco_gt(EVAL / "gt.json", schema)


def _run(gt, schema, city):
    preds, _ = load_predictions(EVAL / f"pred_{city.lower()}.json", gt, schema)
    _, records = load_predictions(EVAL / f"attr_{city.lower()}.jsonl", gt, schema)
    return Run(city, preds, records, city)


@pytest.fixture(scope="module")
def report(gt, schema):
    return build_report(gt, [_run(gt, schema, "Shanghai"), _run(gt, schema, "Wuhan")], schema, "city")


def test_groups_and_columns(report):
    assert report.groups == ["Shanghai", "Wuhan"]
    assert report.column_run("Wuhan").label == "Wuhan"
    assert set(report.detection) == {(r, g) for r in ("Shanghai", "Wuhan") for g in ("Shanghai", "Wuhan", ALL)}


def test_detection_table_layout(report, schema):
    text = report.render_text()
    block = text.split("\n\n")[0].splitlines()
    rows = [ln for ln in block if ln and not ln.startswith("-")][2:]
    assert [r.split("  ")[0].strip() for r in rows] == schema.category_names + ["All"]


def test_all_rows_are_unweighted_class_means(report):
    for (label, group), m in report.detection.items():
        vals = [c.map for c in m.per_class.values()]
        assert abs(m.map - sum(vals) / len(vals)) <= 1e-12
    for key, a in report.attributes.items():
        accs = [a.accuracy(c) for c in a.per_class]
        assert abs(a.class_mean - sum(accs) / len(accs)) <= 1e-12


def test_cross_rows(report):
    rows = report.cross_rows
    assert [(r["train"], r["test"], r["setting"]) for r in rows] == [
        ("Shanghai", "Shanghai", "In-domain"), ("Shanghai", "Wuhan", "Cross-city"),
        ("Wuhan", "Wuhan", "In-domain"), ("Wuhan", "Shanghai", "Cross-city")]
    text = report.render_text()
    assert "Train City" in text and "Cross-city" in text
    assert f"{rows[1]['map']:.3f}" in text


def test_single_group_has_no_cross_section(gt, schema):
    rep = build_report(gt, [_run(gt, schema, "Shanghai")], schema)
    assert rep.groups == [ALL] and rep.cross_rows == []
    assert "Train City" not in rep.render_text()


def test_summary_has_split_columns(report):
    text = report.render_text()
    assert "Base mAP" in text and "Novel mAP" in text
    s = report.detection[("Wuhan", ALL)]
    novel = [c for c, sp in s.splits.items() if sp == "novel" and c in s.per_class]
    assert abs(s.split_map("novel") - np.mean([s.per_class[c].map for c in novel])) <= 1e-12


def test_attribute_footnote_reports_pooled(report):
    assert "Pooled over every attribute" in report.render_text()
    d = report.to_dict()["runs"][0]["groups"]["Shanghai"]["attributes"]
    assert set(d) >= {"all", "overall_pooled", "per_class"}


def test_write_outputs(report, tmp_path):
    written = report.write(tmp_path, figures=True)
    names = {p.name for p in written}
    assert {"report.json", "report.txt", "report.csv", "per_class_ap.png", "attribute_accuracy.png"} <= names
    assert any(n.startswith("pr_curves_") for n in names)
    for p in written:
        assert p.stat().st_size > 0
    rows = list(csv.DictReader((tmp_path / "report.csv").open()))
    assert len(rows) == 2 * 3 * 11
    assert json.loads((tmp_path / "report.json").read_text())["group_tag"] == "city"


def test_report_errors(gt, schema):
    run = _run(gt, schema, "Shanghai")
    with pytest.raises(EvaluationError):
        build_report(gt, [], schema)
    with pytest.raises(EvaluationError, match="duplicate"):
        build_report(gt, [run, run], schema)
    with pytest.raises(EvaluationError, match="tag"):
        build_report(gt, [run], schema, "weather")
    with pytest.raises(EvaluationError, match="unknown training group"):
        build_report(gt, [Run("x", run.predictions, [], "Paris")], schema, "city")

"""Evaluation reports: text tables, JSON, CSV and matplotlib figures."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .evaluation import (AttributeMetrics, DetectionMetrics, EvaluationError, GroundTruthSet,
                         align_attribute_predictions, attribute_accuracy, evaluate_detection)

ALL = "all"


@dataclass
class Run:
    """One prediction set; ``train_group`` names the group it was trained on, if any."""
    label: str
    predictions: list
    records: list = field(default_factory=list)
    train_group: str | None = None


@dataclass
class Report:
    groups: list[str]
    categories: list[str]
    runs: list[Run]
    detection: dict  # (run label, group) -> DetectionMetrics
    attributes: dict  # (run label, group) -> AttributeMetrics
    group_tag: str | None = None

    # -- selection --------------------------------------------------------

    def column_run(self, group: str) -> Run | None:
        """The run shown in a group's per-class column: trained there, or the only run."""
        for r in self.runs:
            if r.train_group == group:
                return r
        return self.runs[0] if len(self.runs) == 1 else None

    @property
    def cross_rows(self) -> list[dict]:
        if len(self.groups) < 2 or not any(r.train_group for r in self.runs):
            return []
        rows = []
        for r in self.runs:
            if not r.train_group:
                continue
            tests = [r.train_group] + [g for g in self.groups if g != r.train_group]
            for g in tests:
                m = self.detection[(r.label, g)]
                rows.append({"run": r.label, "train": r.train_group, "test": g,
                             "setting": "In-domain" if g == r.train_group else "Cross-city",
                             "map": m.map, "map50": m.map50})
        return rows

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        out = {"group_tag": self.group_tag, "groups": self.groups, "categories": self.categories, "runs": []}
        for r in self.runs:
            entry = {"label": r.label, "train_group": r.train_group, "groups": {}}
            for g in self.groups + [ALL]:
                key = (r.label, g)
                if key not in self.detection:
                    continue
                m = self.detection[key]
                d = {"detection": {"summary": m.summary(), "undefined_classes": m.undefined,
                                   "per_class": {c: v.to_dict() for c, v in m.per_class.items()}}}
                if key in self.attributes:
                    d["attributes"] = self.attributes[key].to_dict()
                entry["groups"][g] = d
            out["runs"].append(entry)
        out["cross_city"] = self.cross_rows
        return out

    def csv_rows(self) -> list[dict]:
        rows = []
        for r in self.runs:
            for g in self.groups + [ALL]:
                key = (r.label, g)
                if key not in self.detection:
                    continue
                m = self.detection[key]
                a = self.attributes.get(key)
                for c in self.categories + ["All"]:
                    row = {"run": r.label, "group": g, "category": c}
                    if c == "All":
                        row.update(ap50=m.map50, ap75=m.map75, map=m.map, ar=m.mar,
                                   attr_accuracy=a.class_mean if a else None)
                    else:
                        d = m.per_class.get(c)
                        row.update(ap50=d.ap50 if d else None, ap75=d.ap75 if d else None,
                                   map=d.map if d else None, ar=d.ar if d else None,
                                   attr_accuracy=a.accuracy(c) if a and c in a.per_class else None)
                    rows.append(row)
        return rows

    # -- text -------------------------------------------------------------

    def render_text(self) -> str:
        parts = [self._detection_table()]
        if self.attributes:
            parts.append(self._attribute_table())
        cross = self.cross_rows
        if cross:
            parts.append(_table(["Train City", "Test City", "Setting", "mAP", "mAP@50"],
                                [[r["train"], r["test"], r["setting"], f"{r['map']:.3f}", f"{r['map50']:.3f}"]
                                 for r in cross], "Cross-group generalization"))
        parts.append(self._summary_table())
        return "\n\n".join(parts) + "\n"

    def _columns(self):
        return [(g, self.column_run(g)) for g in self.groups if self.column_run(g) is not None]

    def _detection_table(self) -> str:
        cols = self._columns()
        header = ["Category"]
        for g, _ in cols:
            header += [f"{g} mAP", f"{g} mAP@50"]
        rows, notes = [], set()
        for c in self.categories:
            row = [c]
            for g, r in cols:
                d = self.detection[(r.label, g)].per_class.get(c)
                if d is None:
                    row += ["-", "-"]
                    notes.add(f"{c} has no ground truth in {g}; excluded from the All row.")
                else:
                    row += [_pct(d.map), _pct(d.ap50)]
            rows.append(row)
        row = ["All"]
        for g, r in cols:
            m = self.detection[(r.label, g)]
            row += [_pct(m.map), _pct(m.map50)]
        rows.append(row)
        return _table(header, rows, "Per-class detection (%)", sorted(notes))

    def _attribute_table(self) -> str:
        cols = [(g, r) for g, r in self._columns() if (r.label, g) in self.attributes]
        header = ["Category"] + [g for g, _ in cols]
        rows = []
        for c in self.categories:
            row = [c]
            for g, r in cols:
                a = self.attributes[(r.label, g)]
                row.append(_pct(a.accuracy(c)) if c in a.per_class else "-")
            rows.append(row)
        rows.append(["All"] + [_pct(self.attributes[(r.label, g)].class_mean) for g, r in cols])
        notes = ["All is the unweighted mean over classes. Pooled over every attribute: "
                 + ", ".join(f"{g} {_pct(self.attributes[(r.label, g)].overall)}" for g, r in cols) + "."]
        return _table(header, rows, "Per-class attribute accuracy (%)", notes)

    def _summary_table(self) -> str:
        splits = any(self.detection[(r.label, ALL)].splits for r in self.runs)
        header = ["Run", "mAP@50", "mAP@75", "mAP", "mAR"] + (["Base mAP", "Novel mAP"] if splits else [])
        if self.attributes:
            header.append("Attr acc")
        rows = []
        for r in self.runs:
            m = self.detection[(r.label, ALL)]
            row = [r.label, _pct(m.map50), _pct(m.map75), _pct(m.map), _pct(m.mar)]
            if splits:
                row += [_pct(m.split_map("base")), _pct(m.split_map("novel"))]
            if self.attributes:
                a = self.attributes.get((r.label, ALL))
                row.append(_pct(a.class_mean) if a else "-")
            rows.append(row)
        return _table(header, rows, "Run summary over all images (%)")

    # -- files ------------------------------------------------------------

    def write(self, out_dir, figures: bool = True) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.json", out / "report.txt", out / "report.csv"]
        written[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n", encoding="utf-8")
        written[1].write_text(self.render_text(), encoding="utf-8")
        rows = self.csv_rows()
        with written[2].open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["run"])
            w.writeheader()
            for row in rows:
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else ("" if v is None else v))
                            for k, v in row.items()})
        if figures:
            from .plots import render_figures
            written += render_figures(self, out)
        return written


def _pct(v) -> str:
    return "-" if v is None else f"{100 * v:.1f}"


def _table(header, rows, title, notes=()) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)  # noqa: E731
                                   for i, (c, w) in enumerate(zip(cells, widths))).rstrip()
    sep = "-" * len(line(header))
    out = [title, sep, line(header), sep] + [line(r) for r in rows[:-1]]
    if rows:
        if rows[-1][0] == "All":
            out.append(sep)
        out.append(line(rows[-1]))
    out.append(sep)
    out += [f"* {n}" for n in notes]
    return "\n".join(out)


def build_report(gt: GroundTruthSet, runs: list[Run], schema, group_tag: str | None = None) -> Report:
    """Evaluate every run on every group and on the full image set."""
    if not runs:
        raise EvaluationError("no prediction runs")
    labels = [r.label for r in runs]
    if len(set(labels)) != len(labels):
        raise EvaluationError(f"duplicate run labels: {labels}")
    groups, members = [], {}
    if group_tag:
        tags = gt.image_tags(group_tag)
        if all(v is None for v in tags.values()):
            raise EvaluationError(f"no image carries the tag {group_tag!r}")
        missing = [i for i, v in tags.items() if v is None]
        if missing:
            raise EvaluationError(f"images without tag {group_tag!r}: {missing[:5]}")
        for i, v in tags.items():
            members.setdefault(str(v), []).append(i)
        groups = list(members)
        for r in runs:
            if r.train_group is not None and r.train_group not in members:
                raise EvaluationError(f"run {r.label!r}: unknown training group {r.train_group!r}; "
                                      f"known: {groups}")
    else:
        groups = [ALL]
    members[ALL] = gt.image_ids
    order = [c.name for c in schema.categories if c.name in gt.categories]
    order += [c for c in gt.categories if c not in order]

    det, attr = {}, {}
    for r in runs:
        for g in dict.fromkeys(groups + [ALL]):
            det[(r.label, g)] = evaluate_detection(gt, r.predictions, members[g])
            if r.records:
                pairs = align_attribute_predictions(gt, r.records, members[g])
                if pairs:
                    attr[(r.label, g)] = attribute_accuracy(pairs, schema)
    return Report(groups, order, runs, det, attr, group_tag)

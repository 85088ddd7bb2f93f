"""COCO-style detection metrics and attribute accuracy.

AP uses the 101-point interpolated protocol: precision is made monotone
(running max from high recall down) and sampled at recall 0.00, 0.01, ..., 1.00.
Predictions with equal scores keep image order, then per-image rank.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BoundingBox, GeometryError, unwrap_box

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


class EvaluationError(ValueError):
    pass


# --- IoU ------------------------------------------------------------------

def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    a.check()
    b.check()
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter
    return inter / union


def iou_wrapped(a: BoundingBox, b: BoundingBox, pano_width: float | None = None) -> float:
    """IoU for panorama boxes that may cross the longitude seam."""
    if pano_width is None or not (a.wraps or b.wraps):
        return iou(a, b)
    ua, ub = unwrap_box(a, pano_width), unwrap_box(b, pano_width)
    best = 0.0
    for shift in (-pano_width, 0.0, pano_width):
        moved = BoundingBox(ub.x_min + shift, ub.y_min, ub.x_max + shift, ub.y_max)
        best = max(best, iou(ua, moved))
    return best


def iou_matrix(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise IoU for ``(n, 4)`` and ``(m, 4)`` xyxy arrays."""
    if len(preds) == 0 or len(gts) == 0:
        return np.zeros((len(preds), len(gts)))
    iw = np.minimum(preds[:, None, 2], gts[None, :, 2]) - np.maximum(preds[:, None, 0], gts[None, :, 0])
    ih = np.minimum(preds[:, None, 3], gts[None, :, 3]) - np.maximum(preds[:, None, 1], gts[None, :, 1])
    pos = (iw > 0) & (ih > 0)
    inter = np.where(pos, iw * ih, 0.0)
    area_p = (preds[:, 2] - preds[:, 0]) * (preds[:, 3] - preds[:, 1])
    area_g = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])
    union = area_p[:, None] + area_g[None, :] - inter
    return np.where(pos, inter / union, 0.0)


# --- data -----------------------------------------------------------------

@dataclass(frozen=True)
class GtObject:
    id: str
    image_id: str
    category: str
    bbox: BoundingBox
    attributes: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Prediction:
    image_id: str
    category: str
    bbox: BoundingBox
    score: float
    object_id: str = ""


@dataclass
class GroundTruthSet:
    images: list[dict]
    objects: list[GtObject]
    categories: list[str]
    category_splits: dict = field(default_factory=dict)  # name -> "base" | "novel"

    def __post_init__(self):
        names = set(self.categories)
        for o in self.objects:
            if o.category not in names:
                raise EvaluationError(f"object {o.id}: category {o.category!r} not in category list")
            o.bbox.check(allow_wrap=True)

    @property
    def image_ids(self) -> list[str]:
        return [str(im["id"]) for im in self.images]

    def image_tags(self, tag: str) -> dict:
        return {str(im["id"]): im.get(tag) for im in self.images}

    def resolve_image(self, ref: str) -> str | None:
        if not hasattr(self, "_lookup"):
            self._lookup = {}
            for im in self.images:
                self._lookup[str(im["id"])] = str(im["id"])
                if im.get("file_name"):
                    self._lookup.setdefault(Path(im["file_name"]).stem, str(im["id"]))
                    self._lookup.setdefault(im["file_name"], str(im["id"]))
        return self._lookup.get(str(ref))

    def width_of(self, image_id: str) -> float | None:
        for im in self.images:
            if str(im["id"]) == image_id:
                return im.get("width")
        return None


def load_coco_gt(path, schema=None) -> GroundTruthSet:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    cats = {}
    names, splits = [], {}
    for c in doc.get("categories", []):
        name = c["name"]
        if schema is not None:
            name = schema.canonical_category(name) or name
        cats[c["id"]] = name
        names.append(name)
        if c.get("split"):
            splits[name] = c["split"]
    objs = []
    for a in doc.get("annotations", []):
        if a.get("iscrowd"):
            continue
        objs.append(GtObject(str(a["id"]), str(a["image_id"]), cats[a["category_id"]],
                             BoundingBox.from_xywh(a["bbox"]), dict(a.get("attributes") or {})))
    return GroundTruthSet(list(doc.get("images", [])), objs, names, splits)


def load_predictions(path, gt: GroundTruthSet, schema=None) -> tuple[list[Prediction], list]:
    """Read records JSONL or a COCO results JSON list.

    Returns ``(predictions, records)``; ``records`` is empty for COCO input.
    """
    from .schema import StructuredObjectRecord
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    preds, records = [], []
    cat_by_id = {}
    if stripped.startswith("["):
        for i, r in enumerate(json.loads(text)):
            image_id = gt.resolve_image(r["image_id"])
            if image_id is None:
                raise EvaluationError(f"prediction {i}: unknown image {r['image_id']!r}")
            cat = r.get("category") or cat_by_id.get(r.get("category_id"))
            if cat is None:
                cat = _category_for_id(gt, path, r.get("category_id"))
            preds.append(Prediction(image_id, cat, BoundingBox.from_xywh(r["bbox"]), float(r["score"]),
                                    str(r.get("id", i))))
        return preds, records
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        rec = StructuredObjectRecord.from_json(line)
        records.append(rec)
        if rec.bbox is None:
            continue
        image_id = gt.resolve_image(rec.source_image)
        if image_id is None:
            raise EvaluationError(f"{path}:{n}: unknown image {rec.source_image!r}")
        cat = schema.canonical_category(rec.category) if schema is not None else rec.category
        preds.append(Prediction(image_id, cat or rec.category, rec.bbox,
                                float(rec.confidence if rec.confidence is not None else 1.0), rec.object_id))
    return preds, records


def _category_for_id(gt, path, cid):
    raise EvaluationError(f"{path}: COCO results need a 'category' name (category_id {cid!r} is ambiguous "
                          "without the ground-truth id map)")


# --- matching & AP ----------------------------------------------------------

@dataclass
class MatchResult:
    """Predictions of one class in confidence order with TP flags at one threshold."""
    scores: list[float]
    tp: list[bool]
    n_gt: int

    @property
    def tp_count(self) -> int:
        return sum(self.tp)

    @property
    def fp_count(self) -> int:
        return len(self.tp) - self.tp_count

    @property
    def fn_count(self) -> int:
        return self.n_gt - self.tp_count

    @property
    def precision(self) -> float:
        return self.tp_count / len(self.tp) if self.tp else 0.0

    @property
    def recall(self) -> float:
        return self.tp_count / self.n_gt if self.n_gt else 0.0


def _greedy_match(ious: np.ndarray, thr: float) -> np.ndarray:
    """Rows are predictions already in confidence order."""
    n, m = ious.shape
    tp = np.zeros(n, dtype=bool)
    if m == 0:
        return tp
    free = np.ones(m, dtype=bool)
    for d in range(n):
        cand = np.where(free, ious[d], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= thr:
            tp[d] = True
            free[j] = False
    return tp


def _rank(preds: list[Prediction]) -> list[Prediction]:
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    return [preds[i] for i in order]


def _xyxy(boxes) -> np.ndarray:
    return np.array([b.to_list() for b in boxes], dtype=np.float64).reshape(-1, 4)


def match_detections(preds: list[Prediction], gts: list[GtObject], iou_thr: float) -> MatchResult:
    """Greedy COCO matching for one class in one image."""
    ranked = _rank(preds)
    ious = iou_matrix(_xyxy(p.bbox for p in ranked), _xyxy(g.bbox for g in gts))
    tp = _greedy_match(ious, iou_thr)
    return MatchResult([p.score for p in ranked], tp.tolist(), len(gts))


def interpolated_precision(tp_sorted: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (recall, monotone precision, precision at the 101 recall points)."""
    tp_sorted = np.asarray(tp_sorted, dtype=bool)
    q = np.zeros(len(RECALL_POINTS))
    if len(tp_sorted) == 0:
        return np.zeros(0), np.zeros(0), q
    tpc = np.cumsum(tp_sorted, dtype=np.float64)
    fpc = np.cumsum(~tp_sorted, dtype=np.float64)
    rc = tpc / n_gt
    pr = tpc / (tpc + fpc)
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
    ok = idx < len(pr)
    q[ok] = pr[idx[ok]]
    return rc, pr, q


def average_precision(tp_sorted, n_gt: int) -> float:
    """101-point interpolated AP of one class at one threshold.

    ``tp_sorted`` are TP flags of all predictions in global confidence order.
    """
    if n_gt <= 0:
        raise EvaluationError("AP is undefined for a class without ground truth")
    return float(np.mean(interpolated_precision(tp_sorted, n_gt)[2]))


@dataclass
class ClassDetection:
    category: str
    n_gt: int
    n_pred: int
    ap: dict  # threshold -> AP
    recall: dict  # threshold -> final recall
    pr_curve: tuple = ()  # (recall, precision) at IoU 0.50

    @property
    def ap50(self) -> float:
        return self.ap[0.5]

    @property
    def ap75(self) -> float:
        return self.ap[0.75]

    @property
    def map(self) -> float:
        return float(np.mean([self.ap[t] for t in IOU_THRESHOLDS]))

    @property
    def ar(self) -> float:
        return float(np.mean([self.recall[t] for t in IOU_THRESHOLDS]))

    def to_dict(self) -> dict:
        return {"n_gt": self.n_gt, "n_pred": self.n_pred, "ap50": self.ap50, "ap75": self.ap75,
                "map": self.map, "ar": self.ar, "ap": {f"{t:.2f}": v for t, v in self.ap.items()}}


@dataclass
class DetectionMetrics:
    per_class: dict  # category -> ClassDetection (defined classes only)
    undefined: list  # categories without ground truth
    splits: dict = field(default_factory=dict)

    def _mean(self, attr: str, cats=None) -> float | None:
        vals = [getattr(c, attr) for name, c in self.per_class.items() if cats is None or name in cats]
        return float(np.mean(vals)) if vals else None

    @property
    def map50(self):
        return self._mean("ap50")

    @property
    def map75(self):
        return self._mean("ap75")

    @property
    def map(self):
        return self._mean("map")

    @property
    def mar(self):
        return self._mean("ar")

    def split_map(self, split: str):
        return self._mean("map", {c for c, s in self.splits.items() if s == split})

    def ap_at(self, thr: float) -> float | None:
        vals = [c.ap[thr] for c in self.per_class.values()]
        return float(np.mean(vals)) if vals else None

    def summary(self) -> dict:
        out = {"map50": self.map50, "map75": self.map75, "map": self.map, "mar": self.mar}
        if self.splits:
            out["base_map"] = self.split_map("base")
            out["novel_map"] = self.split_map("novel")
        return out


def evaluate_detection(gt: GroundTruthSet, preds: list[Prediction], image_ids=None,
                       thresholds=IOU_THRESHOLDS, max_dets: int = MAX_DETS) -> DetectionMetrics:
    """Per-class AP over ``thresholds`` and recall at ``max_dets`` per image and class."""
    if not thresholds:
        raise EvaluationError("no IoU thresholds")
    images = [i for i in gt.image_ids if image_ids is None or i in set(image_ids)]
    image_set = set(images)
    gts: dict = {}
    for o in gt.objects:
        if o.image_id in image_set:
            gts.setdefault((o.category, o.image_id), []).append(o)
    pds: dict = {}
    for p in preds:
        if p.image_id in image_set:
            pds.setdefault((p.category, p.image_id), []).append(p)
    widths = {i: gt.width_of(i) for i in images}

    per_class, undefined = {}, []
    for cat in gt.categories:
        n_gt = sum(len(gts.get((cat, i), [])) for i in images)
        if n_gt == 0:
            undefined.append(cat)
            continue
        flags = {t: [] for t in thresholds}
        scores = []
        for img in images:
            ranked = _rank(pds.get((cat, img), []))[:max_dets]
            if not ranked:
                continue
            g = gts.get((cat, img), [])
            if any(p.bbox.wraps for p in ranked) or any(o.bbox.wraps for o in g):
                ious = np.array([[iou_wrapped(p.bbox, o.bbox, widths.get(img)) for o in g] for p in ranked]
                                ).reshape(len(ranked), len(g))
            else:
                ious = iou_matrix(_xyxy(p.bbox for p in ranked), _xyxy(o.bbox for o in g))
            scores.extend(p.score for p in ranked)
            for t in thresholds:
                flags[t].append(_greedy_match(ious, t))
        order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
        ap, rec = {}, {}
        curve = ()
        for t in thresholds:
            tp = np.concatenate(flags[t])[order] if flags[t] else np.zeros(0, dtype=bool)
            rc, pr, q = interpolated_precision(tp, n_gt)
            ap[t] = float(np.mean(q))
            rec[t] = float(rc[-1]) if len(rc) else 0.0
            if t == thresholds[0]:
                curve = (rc, pr)
        per_class[cat] = ClassDetection(cat, n_gt, len(scores), ap, rec, curve)
    splits = {c: s for c, s in gt.category_splits.items()}
    return DetectionMetrics(per_class, undefined, splits)


# --- attribute accuracy -----------------------------------------------------

@dataclass
class AttributeMetrics:
    per_class: dict  # category -> (correct, total)
    missing_predictions: int = 0
    invalid_predictions: int = 0

    def accuracy(self, category: str) -> float:
        c, t = self.per_class[category]
        return c / t

    @property
    def overall(self) -> float:
        """Pooled accuracy over every attribute of every object."""
        total = sum(t for _, t in self.per_class.values())
        if total == 0:
            raise EvaluationError("no attributes to score")
        return sum(c for c, _ in self.per_class.values()) / total

    @property
    def class_mean(self) -> float:
        return float(np.mean([self.accuracy(c) for c in self.per_class]))

    def to_dict(self) -> dict:
        return {"per_class": {c: {"correct": k, "total": t, "accuracy": k / t}
                              for c, (k, t) in self.per_class.items()},
                "all": self.class_mean, "overall_pooled": self.overall,
                "missing_predictions": self.missing_predictions,
                "invalid_predictions": self.invalid_predictions}


def _same(adef, gt_value, pred_value) -> bool:
    from .schema import _key
    if pred_value is None:
        return False
    g, _ = adef.canonical(gt_value) if gt_value is not None else ("unknown", False)
    p, _ = adef.canonical(pred_value)
    if g is None or p is None:
        return False
    return _key(g) == _key(p) if adef.free_text else g == p


def attribute_accuracy(pairs, schema) -> AttributeMetrics:
    """Score ``(gt object, predicted record or None)`` pairs.

    Every schema attribute of the object's category counts once; a missing
    prediction counts as wrong.
    """
    per_class: dict = {}
    missing = invalid = 0
    for obj, rec in pairs:
        cat = schema.category(obj.category)
        if cat is None:
            raise EvaluationError(f"object {obj.id}: category {obj.category!r} not in schema")
        pred = {}
        if rec is None:
            missing += 1
        else:
            invalid += rec.status == "invalid"
            for a in rec.attributes:
                adef = cat.attribute(a.name)
                if adef is not None:
                    pred.setdefault(adef.name, a.value)
        gt_vals = {}
        for k, v in obj.attributes.items():
            adef = cat.attribute(k)
            if adef is not None:
                gt_vals[adef.name] = v
        correct = sum(_same(adef, gt_vals.get(adef.name), pred.get(adef.name)) for adef in cat.attributes)
        c, t = per_class.get(cat.name, (0, 0))
        per_class[cat.name] = (c + correct, t + len(cat.attributes))
    if sum(t for _, t in per_class.values()) == 0:
        raise EvaluationError("attribute accuracy is undefined for an empty object set")
    ordered = {c.name: per_class[c.name] for c in schema.categories if c.name in per_class}
    return AttributeMetrics(ordered, missing, invalid)


def align_attribute_predictions(gt: GroundTruthSet, records, image_ids=None) -> list[tuple]:
    """Pair each ground-truth object with the record whose object_id is its annotation id."""
    by_id = {r.object_id: r for r in records}
    keep = None if image_ids is None else set(image_ids)
    return [(o, by_id.get(o.id)) for o in gt.objects if keep is None or o.image_id in keep]

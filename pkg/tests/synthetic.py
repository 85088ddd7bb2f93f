"""Random detection datasets shared by the metric tests."""

from __future__ import annotations

import numpy as np

from curbsight.evaluation import GroundTruthSet, GtObject, Prediction
from curbsight.geometry import BoundingBox


def _box(rng, size=640.0):
    w, h = rng.uniform(8, 120, size=2)
    x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
    return (float(x), float(y), float(x + w), float(y + h))


def _jitter(rng, b, amount):
    w, h = b[2] - b[0], b[3] - b[1]
    dx0, dy0, dx1, dy1 = rng.normal(0, amount, size=4) * np.array([w, h, w, h])
    x0, y0 = b[0] + dx0, b[1] + dy0
    x1, y1 = max(x0 + 1.0, b[2] + dx1), max(y0 + 1.0, b[3] + dy1)
    return (float(x0), float(y0), float(x1), float(y1))


def random_dataset(rng, n_images, classes, max_gt=6, tie_step=None):
    """Returns (raw, gt set, predictions).

    ``raw`` holds plain tuples for the oracle: images, dets (img, cls, score, box)
    and gts (img, cls, box). Scores are rounded to ``tie_step`` when given so
    that equal scores occur.
    """
    images = [f"img{i:03d}" for i in range(n_images)]
    gts, dets = [], []
    for img in images:
        for _ in range(int(rng.integers(0, max_gt + 1))):
            c = classes[int(rng.integers(len(classes)))]
            b = _box(rng)
            gts.append((img, c, b))
            for _ in range(int(rng.integers(0, 3))):  # zero, one or two attempts at each object
                dets.append((img, c, None, _jitter(rng, b, rng.uniform(0.0, 0.25))))
        for _ in range(int(rng.integers(0, 4))):  # background false positives
            dets.append((img, classes[int(rng.integers(len(classes)))], None, _box(rng)))
    scored = []
    for img, c, _, b in dets:
        s = float(rng.uniform(0.01, 1.0))
        if tie_step:
            s = max(tie_step, round(s / tie_step) * tie_step)
        scored.append((img, c, s, b))
    perm = rng.permutation(len(scored))
    scored = [scored[i] for i in perm]
    objects = [GtObject(f"g{n}", img, c, BoundingBox(*b)) for n, (img, c, b) in enumerate(gts)]
    gt = GroundTruthSet([{"id": i, "width": 640, "height": 640} for i in images], objects, list(classes))
    preds = [Prediction(img, c, BoundingBox(*b), s) for img, c, s, b in scored]
    return {"images": images, "dets": scored, "gts": gts}, gt, preds

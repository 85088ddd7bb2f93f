import json

import numpy as np
import pytest

from curbsight.clients import Detection, MockVlm
from curbsight.config import build_services, load_config
from curbsight.evaluation import iou
from curbsight.geometry import BoundingBox, pano_bbox_to_view
from curbsight.pipeline import (TRUNCATION_NOTE, ContextBudgetError, SceneContext, Stores, answer_query,
                                assemble_context, dedup_indices, load_panorama, run_batch, run_on_boxes,
                                run_scene)
from curbsight.retrieval import RetrievalHit, VectorStore
from curbsight.schema import read_records
from conftest import CONFIG, FIXTURES, GOLDEN

PANOS = sorted((FIXTURES / "panos").glob("*.png"))


@pytest.fixture
def env(schema):
    cfg = load_config(CONFIG)
    stores = Stores(VectorStore.load(cfg.path("stores", "text")), VectorStore.load(cfg.path("stores", "visual")),
                    cfg.path("stores", "text"), cfg.path("stores", "visual"))
    return cfg, stores, build_services(cfg, schema)


def _det(label, score, box):
    return Detection(label, score, BoundingBox(*box))


# --- dedup ----------------------------------------------------------------

def test_dedup_identical_boxes_keep_higher_confidence():
    dets = [_det("Bollard", 0.4, (0, 0, 10, 10)), _det("Bollard", 0.9, (0, 0, 10, 10))]
    assert dedup_indices(dets, 0.5) == [1]


def test_dedup_different_categories_both_kept():
    dets = [_det("Bollard", 0.4, (0, 0, 10, 10)), _det("Trash Bin", 0.9, (0, 0, 10, 10))]
    assert dedup_indices(dets, 0.5) == [0, 1]


def test_dedup_below_threshold_both_kept():
    # overlap 40 of union 100: IoU 0.4
    dets = [_det("Bollard", 0.9, (0, 0, 7, 10)), _det("Bollard", 0.8, (3, 0, 10, 10))]
    assert iou(dets[0].bbox, dets[1].bbox) == pytest.approx(0.4)
    assert dedup_indices(dets, 0.5) == [0, 1]
    assert dedup_indices(dets, 0.4) == [0]


def test_dedup_across_seam():
    dets = [_det("Bollard", 0.9, (8180, 0, 20, 10)), _det("Bollard", 0.7, (8182, 0, 22, 10))]
    assert dedup_indices(dets, 0.5, 8192) == [0]


# --- prompt assembly ------------------------------------------------------

def _hit(i, score, body="x" * 200):
    return RetrievalHit(f"h{i}", score, {"source_doc": "doc.md", "locator": f"chars {i}", "body": body,
                                         "attributes": [["Color", "red"]]})


def _ctx(schema, texts=(), precs=()):
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    return SceneContext(("c", img), ("o", img), schema.category("Traffic Light"), list(texts), list(precs))


def test_context_orders_sections(schema):
    cfg = load_config().pipeline
    prompt = assemble_context(_ctx(schema, [_hit(1, 0.9), _hit(2, 0.5)], [_hit(3, 0.8)]), cfg)
    i_schema = prompt.index("Attribute schema for Traffic Light")
    i_text, i_prec = prompt.index("[1] doc.md"), prompt.index("(1) exemplar h3")
    assert i_schema < i_text < prompt.index("[2] doc.md") < i_prec < prompt.index('"category": "Traffic Light"')
    assert "red | green | yellow | off" in prompt and TRUNCATION_NOTE not in prompt


def test_context_truncates_lowest_text_first(schema):
    full = load_config().pipeline
    ctx = _ctx(schema, [_hit(1, 0.9), _hit(2, 0.5)], [_hit(3, 0.8), _hit(4, 0.7)])
    size = len(assemble_context(ctx, full))
    cfg = load_config(None, [f"context_char_budget={size - 100}"]).pipeline
    prompt = assemble_context(ctx, cfg)
    assert len(prompt) <= cfg.context_char_budget and TRUNCATION_NOTE in prompt
    assert "[1] doc.md" in prompt and "[2] doc.md" not in prompt and "(2) exemplar h4" in prompt


def test_context_with_no_retrieval(schema):
    prompt = assemble_context(_ctx(schema), load_config(None, ["k=0", "m=0"]).pipeline)
    assert "Reference fragments" not in prompt and "Precedents" not in prompt
    assert "Attribute schema for Traffic Light" in prompt


def test_context_budget_error(schema):
    cfg = load_config(None, ["context_char_budget=200"]).pipeline
    with pytest.raises(ContextBudgetError):
        assemble_context(_ctx(schema, [_hit(1, 0.9)]), cfg)


def test_context_requires_sorted_hits(schema):
    with pytest.raises(ValueError):
        _ctx(schema, [_hit(1, 0.2), _hit(2, 0.9)])


# --- scenes ---------------------------------------------------------------

def test_run_scene_matches_golden(env, schema):
    cfg, stores, services = env
    for path in PANOS:
        res = run_scene(load_panorama(path), cfg.pipeline, schema, stores, services)
        assert res.records == read_records(GOLDEN / "annotate" / f"{path.stem}.records.jsonl")
    manifest = json.loads((GOLDEN / "annotate" / "manifest.json").read_text())
    stats = {im["image_id"]: im["stats"] for im in manifest["images"]}
    res = run_scene(load_panorama(PANOS[0]), cfg.pipeline, schema, stores, services)
    assert res.stats == stats["scene_a"]
    assert res.stats["detections"] == 5 and res.stats["dedup_drops"] == 1


def test_every_record_validates_and_is_well_formed(env, schema):
    cfg, stores, services = env
    for path in PANOS:
        for rec in run_scene(load_panorama(path), cfg.pipeline, schema, stores, services).records:
            assert rec.status in ("ok", "repair_applied")
            names = [a.name for a in rec.attributes]
            assert names == schema.category(rec.category).attribute_names


def test_empty_detector_gives_empty_scene(env, schema):
    cfg, stores, services = env
    res = run_scene(load_panorama(FIXTURES / "panos" / "scene_c.png"), cfg.pipeline, schema, stores, services)
    assert res.records == [] and res.ok and res.stats["detections"] == 0


def test_malformed_vlm_marks_every_object_invalid(env, schema):
    cfg, stores, services = env
    services.vlm = MockVlm("malformed")
    res = run_scene(load_panorama(PANOS[0]), cfg.pipeline, schema, stores, services)
    assert res.stats["invalids"] == res.stats["records"] == res.stats["detections"] - res.stats["dedup_drops"]
    assert all(r.attributes == () and r.status == "invalid" for r in res.records)


def test_projection_consistency_on_fixture(env, schema):
    # every record's panorama box, reprojected into its source view, overlaps the raw detection
    cfg, stores, services = env
    detector = json.loads((FIXTURES / "detector.json").read_text())
    views = {v.view_id: v for v in cfg.pipeline.views}
    for path in PANOS:
        pano = load_panorama(path)
        for rec in run_scene(pano, cfg.pipeline, schema, stores, services).records:
            raw = [d for d in detector[f"{pano.image_id}/{rec.source_view}"] if d["score"] == rec.confidence]
            assert len(raw) == 1
            back = pano_bbox_to_view(views[rec.source_view], rec.bbox, pano)
            assert iou(back, BoundingBox(*raw[0]["bbox"])) >= 0.5


def test_trace_records_prompt_and_images(env, schema):
    cfg, stores, services = env
    res = run_scene(load_panorama(PANOS[0]), cfg.pipeline, schema, stores, services)
    assert [t["object_id"] for t in res.transcripts] == [r.object_id for r in res.records]
    assert all(t["images"][0].endswith("/crop") and t["images"][1] == "scene_a" for t in res.transcripts)


def test_run_on_boxes_uses_given_boxes(env, schema):
    cfg, stores, services = env
    pano = load_panorama(PANOS[0])
    objs = [{"object_id": "scene_a-000", "category": "traffic sign", "bbox": BoundingBox(10, 10, 60, 60)},
            {"object_id": "x", "category": "Drone", "bbox": BoundingBox(10, 10, 60, 60)}]
    res = run_on_boxes(pano, objs, cfg.pipeline, schema, stores, services)
    assert [r.object_id for r in res.records] == ["scene_a-000"]
    assert res.records[0].bbox == BoundingBox(10, 10, 60, 60) and res.records[0].category == "Traffic Sign"


# --- batches --------------------------------------------------------------

def _dump(results):
    return [[r.to_json() for r in res.records] for res in results]


def test_batch_jobs_do_not_change_output(env, schema):
    cfg, stores, services = env
    one, m1 = run_batch(PANOS, cfg.pipeline, schema, stores, services, jobs=1, config_hash="h")
    four, m4 = run_batch(PANOS, cfg.pipeline, schema, stores, services, jobs=4, config_hash="h")
    assert _dump(one) == _dump(four) and m1 == m4
    assert m1["totals"] == {"detections": 10, "dedup_drops": 1, "records": 9, "repairs": 5, "invalids": 0,
                            "images": 3, "failed_images": 0}


def test_batch_isolates_unreadable_image(env, schema, tmp_path):
    cfg, stores, services = env
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not a png")
    results, manifest = run_batch([PANOS[0], bad], cfg.pipeline, schema, stores, services)
    assert results[0].ok and len(results[0].records) == 4
    assert not results[1].ok and manifest["images"][1]["status"] == "failed"
    assert manifest["totals"]["failed_images"] == 1


def test_batch_empty_list(env, schema):
    cfg, stores, services = env
    with pytest.raises(ValueError):
        run_batch([], cfg.pipeline, schema, stores, services)


def test_manifest_store_hashes(env, schema):
    cfg, stores, services = env
    _, manifest = run_batch(PANOS[:1], cfg.pipeline, schema, stores, services)
    assert set(manifest["store_hashes"]) == {"text", "visual"} and all(manifest["store_hashes"].values())
    assert manifest["schema_version"] == schema.version


# --- query ----------------------------------------------------------------

def test_answer_query(env):
    cfg, stores, services = env
    services.vlm = MockVlm("echo")
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    out = answer_query(img, "What colour should a warning sign be?", cfg.pipeline, stores, services)
    assert "What colour should a warning sign be?" in out and "[1] " in out
    with pytest.raises(ValueError):
        answer_query(img, "  ", cfg.pipeline, stores, services)

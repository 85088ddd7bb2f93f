"""Per-panorama orchestration: split, detect, deduplicate, retrieve, prompt, parse."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import __version__
from .clients import Detection, ServiceError, VlmExchange
from .config import PipelineConfig
from .evaluation import iou_wrapped
from .geometry import (BoundingBox, EquirectImage, GeometryError, crop, split_panorama,
                       view_bbox_to_pano)
from .retrieval import RetrievalHit, VectorStore, query_text, query_visual
from .schema import (AttributeSchema, CategoryDef, ExtractionError, StructuredObjectRecord,
                     extract_and_repair, validate_record)

log = logging.getLogger(__name__)

TRUNCATION_NOTE = "[context truncated to fit the budget]"
FORMAT_CONTRACT = ('Respond with a single JSON object of the form {{"category": "{category}", '
                   '"attributes": {{"<attribute>": {{"value": "<allowed value>", "confidence": <0..1>}}}}}} '
                   'and nothing else. Use "unknown" for attributes you cannot determine.')


class SceneError(RuntimeError):
    pass


class ContextBudgetError(ValueError):
    pass


@dataclass
class Stores:
    text: VectorStore | None = None
    visual: VectorStore | None = None
    text_path: Path | None = None
    visual_path: Path | None = None

    def hashes(self) -> dict:
        out = {}
        for name, p in (("text", self.text_path), ("visual", self.visual_path)):
            out[name] = hashlib.sha256(Path(p).read_bytes()).hexdigest() if p and Path(p).is_file() else None
        return out


@dataclass
class SceneContext:
    crop: tuple  # (ref, raster)
    original: tuple  # (ref, raster)
    category: CategoryDef
    text_hits: list[RetrievalHit] = field(default_factory=list)
    exemplar_hits: list[RetrievalHit] = field(default_factory=list)

    def __post_init__(self):
        for hits in (self.text_hits, self.exemplar_hits):
            if any(a.score < b.score for a, b in zip(hits, hits[1:])):
                raise ValueError("retrieval hits must be sorted by score")


@dataclass
class SceneResult:
    image_id: str
    records: list[StructuredObjectRecord] = field(default_factory=list)
    stats: dict = field(default_factory=lambda: {"detections": 0, "dedup_drops": 0, "records": 0,
                                                 "repairs": 0, "invalids": 0})
    timing_ms: float = 0.0
    transcripts: list[dict] = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


# --- deduplication --------------------------------------------------------

def dedup_indices(dets: list[Detection], iou_threshold: float, pano_width: float | None = None) -> list[int]:
    """Greedy per-category suppression; returns surviving indices in input order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    kept: list[int] = []
    for i in order:
        d = dets[i]
        if all(dets[j].label != d.label or iou_wrapped(d.bbox, dets[j].bbox, pano_width) < iou_threshold
               for j in kept):
            kept.append(i)
    return sorted(kept)


def dedup_detections(dets: list[Detection], iou_threshold: float, pano_width: float | None = None):
    return [dets[i] for i in dedup_indices(dets, iou_threshold, pano_width)]


# --- prompt assembly ------------------------------------------------------

def schema_slice(category: CategoryDef) -> str:
    lines = [f"Attribute schema for {category.name}:"]
    for a in category.attributes:
        vals = "free text" if a.free_text else " | ".join(a.allowed_values)
        lines.append(f"- {a.name}: {vals}")
    return "\n".join(lines)


def _fragment(i: int, hit: RetrievalHit) -> str:
    p = hit.payload
    return f"[{i}] {p.get('source_doc', hit.id)} ({p.get('locator', '')}) score={hit.score:.3f}\n{p.get('body', '')}"


def _precedent(i: int, hit: RetrievalHit) -> str:
    attrs = {k: v for k, v in hit.payload.get("attributes", [])}
    return f"({i}) exemplar {hit.id} score={hit.score:.3f}: {json.dumps(attrs, ensure_ascii=False)}"


def _render(cfg: PipelineConfig, ctx: SceneContext, texts, precs, truncated: bool) -> str:
    parts = [cfg.object_prompt.format(category=ctx.category.name), schema_slice(ctx.category)]
    if texts:
        parts.append("Reference fragments from standards documents:\n"
                     + "\n\n".join(_fragment(i, h) for i, h in enumerate(texts, 1)))
    if precs:
        parts.append("Precedents from visually similar annotated objects:\n"
                     + "\n".join(_precedent(i, h) for i, h in enumerate(precs, 1)))
    if truncated:
        parts.append(TRUNCATION_NOTE)
    parts.append(FORMAT_CONTRACT.format(category=ctx.category.name))
    return "\n\n".join(parts)


def assemble_context(ctx: SceneContext, cfg: PipelineConfig) -> str:
    """Build the per-object prompt within ``cfg.context_char_budget``.

    Over budget, the lowest-scoring text fragments go first, then the
    lowest-scoring precedents; the schema slice is never dropped.
    """
    texts, precs = list(ctx.text_hits), list(ctx.exemplar_hits)
    truncated = False
    prompt = _render(cfg, ctx, texts, precs, truncated)
    while len(prompt) > cfg.context_char_budget:
        if texts:
            texts.pop()
        elif precs:
            precs.pop()
        else:
            raise ContextBudgetError(
                f"budget {cfg.context_char_budget} is smaller than the bare prompt ({len(prompt)} chars)")
        truncated = True
        prompt = _render(cfg, ctx, texts, precs, truncated)
    return prompt


def text_query_for(category: CategoryDef) -> str:
    return f"{category.name}: {', '.join(category.attribute_names)}"


# --- scene ----------------------------------------------------------------

def load_panorama(path) -> EquirectImage:
    path = Path(path)
    try:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as e:
        raise SceneError(f"cannot read panorama {path}: {e}") from e
    try:
        return EquirectImage(path.stem, pixels)
    except GeometryError as e:
        raise SceneError(str(e)) from e


def _detect_views(views, rendered, pano, cfg, schema, services):
    vocab = schema.category_names

    def one(i):
        view = views[i]
        return services.detector.detect(rendered[i], vocab, cfg.conf_threshold,
                                        image_id=pano.image_id, view_id=view.view_id)

    results, failures = [], []
    with ThreadPoolExecutor(max_workers=min(4, len(views))) as pool:
        futures = [pool.submit(one, i) for i in range(len(views))]
        for i, fut in enumerate(futures):
            try:
                results.append(fut.result())
            except (ServiceError, ValueError) as e:
                log.warning("%s/%s: detector failed: %s", pano.image_id, views[i].view_id, e)
                failures.append(str(e))
                results.append([])
    if failures and len(failures) == len(views):
        raise SceneError(f"detector failed on every view of {pano.image_id}: {failures[0]}")
    return results


def _describe(obj_id, category, crop_img, original, cfg, schema, stores, services, trace):
    """Run retrieval + VLM + parsing for one object; returns an unplaced record."""
    exemplars, texts = [], []
    if cfg.m > 0 and stores.visual is not None and len(stores.visual):
        q = services.image_embedder.embed_image(crop_img)
        filt = category.name if cfg.category_filter_on_visual else None
        exemplars = query_visual(stores.visual, q, cfg.m, filt)
    if cfg.k > 0 and stores.text is not None and len(stores.text):
        q = services.text_embedder.embed_text(text_query_for(category))
        texts = query_text(stores.text, q, cfg.k)
    ctx = SceneContext((f"{obj_id}/crop", crop_img), original, category, texts, exemplars)
    prompt = assemble_context(ctx, cfg)
    ex = VlmExchange([ctx.crop, ctx.original], prompt, cfg.system_prompt,
                     metadata={"object_id": obj_id, "category": category.name,
                               "precedents": [h.payload.get("attributes", []) for h in exemplars]})
    raw = services.vlm.complete_multimodal(ex)
    trace.append({"object_id": obj_id, "system": cfg.system_prompt, "prompt": prompt,
                  "images": [ctx.crop[0], ctx.original[0]], "response": raw,
                  "latency_ms": round(ex.latency_ms, 3)})
    return extract_and_repair(raw, schema, category.name)


def _finalize(rec_or_exc, obj_id, category, bbox, image_id, view_id, confidence, schema):
    if isinstance(rec_or_exc, StructuredObjectRecord):
        rec = replace(rec_or_exc, object_id=obj_id, bbox=bbox, source_image=image_id,
                      source_view=view_id, confidence=confidence)
        report = validate_record(rec, schema)
        if report.valid:
            return replace(report.normalized, status=rec.status)
        log.warning("%s: record failed validation: %s", obj_id, report.codes())
    else:
        log.warning("%s: attribute stage failed: %s", obj_id, rec_or_exc)
    return StructuredObjectRecord(obj_id, category, bbox, (), image_id, view_id, confidence, "invalid")


def _attribute_stage(obj_id, category, crop_img, original, cfg, schema, stores, services, trace):
    try:
        return _describe(obj_id, category, crop_img, original, cfg, schema, stores, services, trace)
    except (ExtractionError, ServiceError, ContextBudgetError, GeometryError, ValueError) as e:
        return e


def _tally(result: SceneResult) -> None:
    s = result.stats
    s["records"] = len(result.records)
    s["repairs"] = sum(r.status == "repair_applied" for r in result.records)
    s["invalids"] = sum(r.status == "invalid" for r in result.records)


def run_scene(pano: EquirectImage, cfg: PipelineConfig, schema: AttributeSchema, stores: Stores,
              services) -> SceneResult:
    t0 = time.perf_counter()
    result = SceneResult(pano.image_id)
    rendered = [r for _, r in split_panorama(pano, cfg.views)]
    per_view = _detect_views(cfg.views, rendered, pano, cfg, schema, services)

    flat: list[tuple[int, Detection]] = []
    pano_dets: list[Detection] = []
    for vi, dets in enumerate(per_view):
        for d in dets:
            try:
                pbox = view_bbox_to_pano(cfg.views[vi], d.bbox, pano)
            except GeometryError as e:
                log.warning("%s/%s: dropping detection: %s", pano.image_id, d.view_id, e)
                continue
            flat.append((vi, d))
            pano_dets.append(replace(d, bbox=pbox))
    result.stats["detections"] = len(flat)
    keep = dedup_indices(pano_dets, cfg.dedup_iou, pano.width)
    result.stats["dedup_drops"] = len(flat) - len(keep)

    for n, i in enumerate(keep):
        vi, det = flat[i]
        obj_id = f"{pano.image_id}-{n:03d}"
        category = schema.category(det.label)
        if cfg.original_image == "panorama":
            original = (pano.image_id, pano.pixels)
        else:
            original = (f"{pano.image_id}/{det.view_id}", rendered[vi])
        try:
            patch = crop(rendered[vi], det.bbox, cfg.pad_fraction)
        except GeometryError as e:
            outcome = e
        else:
            outcome = _attribute_stage(obj_id, category, patch, original, cfg, schema, stores,
                                       services, result.transcripts)
        result.records.append(_finalize(outcome, obj_id, category.name, pano_dets[i].bbox,
                                        pano.image_id, det.view_id, det.confidence, schema))
    _tally(result)
    result.timing_ms = (time.perf_counter() - t0) * 1000.0
    return result


def run_on_boxes(pano: EquirectImage, objects: list[dict], cfg: PipelineConfig, schema: AttributeSchema,
                 stores: Stores, services) -> SceneResult:
    """Attribute stage only, on given panorama-space boxes.

    ``objects`` items carry ``object_id``, ``category`` and ``bbox``
    (BoundingBox). Detection and deduplication are skipped.
    """
    t0 = time.perf_counter()
    result = SceneResult(pano.image_id)
    result.stats["detections"] = len(objects)
    for obj in objects:
        category = schema.category(obj["category"])
        if category is None:
            log.warning("%s: category %r not in schema, skipped", obj["object_id"], obj["category"])
            continue
        try:
            patch = crop(pano.pixels, obj["bbox"], cfg.pad_fraction)
        except GeometryError as e:
            outcome = e
        else:
            outcome = _attribute_stage(obj["object_id"], category, patch, (pano.image_id, pano.pixels),
                                       cfg, schema, stores, services, result.transcripts)
        result.records.append(_finalize(outcome, obj["object_id"], category.name, obj["bbox"],
                                        pano.image_id, "", obj.get("confidence"), schema))
    _tally(result)
    result.timing_ms = (time.perf_counter() - t0) * 1000.0
    return result


def run_batch(paths, cfg: PipelineConfig, schema: AttributeSchema, stores: Stores, services,
              jobs: int = 1, config_hash: str = "", scene_fn=None) -> tuple[list[SceneResult], dict]:
    """Process panoramas with a bounded worker pool; results keep input order."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("no images to process")

    def one(path):
        try:
            pano = load_panorama(path)
            if scene_fn is not None:
                return scene_fn(pano)
            return run_scene(pano, cfg, schema, stores, services)
        except (SceneError, ServiceError) as e:
            log.error("%s: %s", path.name, e)
            return SceneResult(path.stem, error=str(e))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(one, paths))
    manifest = build_manifest(paths, results, schema, stores, config_hash)
    return results, manifest


def build_manifest(paths, results, schema, stores, config_hash) -> dict:
    images = []
    for path, res in zip(paths, results):
        images.append({"image": path.name, "image_id": res.image_id,
                       "status": "ok" if res.ok else "failed", "error": res.error,
                       "records_file": f"{res.image_id}.records.jsonl" if res.ok else None,
                       "stats": dict(res.stats)})
    totals = {k: sum(im["stats"][k] for im in images)
              for k in ("detections", "dedup_drops", "records", "repairs", "invalids")}
    totals["images"] = len(images)
    totals["failed_images"] = sum(im["status"] == "failed" for im in images)
    return {"tool": "curbsight", "version": __version__, "config_hash": config_hash,
            "schema_version": schema.version, "store_hashes": stores.hashes(),
            "images": images, "totals": totals}


def answer_query(image: np.ndarray, question: str, cfg: PipelineConfig, stores: Stores, services,
                 image_ref: str = "image") -> str:
    """Retrieval-grounded free-form question answering; no schema enforcement."""
    if not question or not question.strip():
        raise ValueError("empty question")
    hits = []
    if cfg.k > 0 and stores.text is not None and len(stores.text):
        hits = query_text(stores.text, services.text_embedder.embed_text(question), cfg.k)
    parts = [f"Question: {question}"]
    if hits:
        parts.append("Reference fragments from standards documents:\n"
                     + "\n\n".join(_fragment(i, h) for i, h in enumerate(hits, 1)))
    parts.append("Answer the question about the image, using the fragments where relevant.")
    ex = VlmExchange([(image_ref, image)], "\n\n".join(parts), cfg.system_prompt,
                     metadata={"object_id": image_ref, "question": question})
    return services.vlm.complete_multimodal(ex)

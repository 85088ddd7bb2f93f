"""Command-line entry point.

Exit codes: 0 success, 1 processing failure (failed image, invalid record,
failed validation), 2 usage or configuration error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from . import __version__
from .config import Config, ConfigError, build_services, load_config
from .geometry import GeometryError
from .retrieval import CorruptStoreError, StoreError, VectorStore

log = logging.getLogger("curbsight")

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff", ".webp"}


class Failure(click.ClickException):
    """Processing failure; exit 1."""
    exit_code = 1


class UsageProblem(click.ClickException):
    exit_code = 2


def _setup_logging(verbose: int, quiet: bool) -> None:
    level = logging.ERROR if quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[min(verbose, 2)]
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def common_options(fn):
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), envvar="CURBSIGHT_CONFIG",
                  help="Config file (YAML or JSON). Defaults to $CURBSIGHT_CONFIG.")
    @click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                  help="Override a config key, e.g. --set k=5 (repeatable).")
    @click.option("-v", "--verbose", count=True, help="More diagnostics on stderr (repeatable).")
    @click.option("-q", "--quiet", is_flag=True, help="Only errors on stderr.")
    @functools.wraps(fn)
    def wrapper(config_path, overrides, verbose, quiet, **kw):
        _setup_logging(verbose, quiet)
        try:
            cfg = load_config(config_path, overrides)
        except ConfigError as e:
            raise UsageProblem(str(e)) from e
        try:
            return fn(cfg, **kw)
        except (ConfigError, StoreError, FileNotFoundError) as e:
            code = UsageProblem if isinstance(e, (ConfigError, FileNotFoundError)) else Failure
            if isinstance(e, CorruptStoreError):
                code = Failure
            raise code(str(e)) from e
    return wrapper


def _schema(cfg: Config):
    from .schema import SchemaError, load_schema
    try:
        return load_schema(cfg.path("schema"))
    except (SchemaError, OSError) as e:
        raise UsageProblem(f"schema: {e}") from e


def _open_store(path: Path | None, modality: str, dim: int, must_exist: bool) -> VectorStore:
    if path is not None and path.is_file():
        store = VectorStore.load(path)
        if store.modality != modality:
            raise UsageProblem(f"{path} is a {store.modality} store, expected {modality}")
        return store
    if must_exist and path is not None:
        raise UsageProblem(f"store not found: {path}")
    return VectorStore(modality, dim)


def _stores(cfg: Config):
    from .pipeline import Stores
    st = cfg.raw["stores"]
    tp, vp = cfg.path("stores", "text"), cfg.path("stores", "visual")
    return Stores(_open_store(tp, "text", int(st["text_dim"]), True),
                  _open_store(vp, "visual", int(st["visual_dim"]), True), tp, vp)


def _store_target(cfg: Config, explicit, key: str) -> Path:
    path = Path(explicit) if explicit else cfg.path("stores", key)
    if path is None:
        raise UsageProblem(f"no store path: pass --store or set stores.{key}")
    return path


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="curbsight")
def main():
    """Roadside asset inventory from street-level panoramas."""


@main.command("ingest-kb")
@click.argument("docs", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--store", type=click.Path(dir_okay=False), help="Text store file (default: stores.text).")
@common_options
def ingest_kb(cfg: Config, docs, store):
    """Chunk and embed standards documents into the text store."""
    from .retrieval import ingest_documents
    path = _store_target(cfg, store, "text")
    vs = _open_store(path, "text", int(cfg.raw["stores"]["text_dim"]), False)
    services = build_services(cfg, _schema(cfg))
    ch = cfg.raw["chunking"]
    report = ingest_documents(docs, services.text_embedder, vs, int(ch["max_chars"]), int(ch["overlap_chars"]))
    path.parent.mkdir(parents=True, exist_ok=True)
    vs.save(path)
    click.echo(json.dumps({**report.to_dict(), "store": str(path), "entries": len(vs)}, sort_keys=True))


@main.command("index-exemplars")
@click.argument("annotations", type=click.Path(exists=True, dir_okay=False))
@click.argument("images", type=click.Path(exists=True, file_okay=False))
@click.option("--store", type=click.Path(dir_okay=False), help="Visual store file (default: stores.visual).")
@common_options
def index_exemplars_cmd(cfg: Config, annotations, images, store):
    """Embed annotated exemplar crops (COCO file + image folder) into the visual store."""
    from .retrieval import index_exemplars
    schema = _schema(cfg)
    path = _store_target(cfg, store, "visual")
    vs = _open_store(path, "visual", int(cfg.raw["stores"]["visual_dim"]), False)
    services = build_services(cfg, schema)
    report = index_exemplars(annotations, images, services.image_embedder, vs, schema, cfg.pipeline.pad_fraction)
    for s in report.skipped:
        log.warning("exemplar %s skipped: %s", s["id"], s["reason"])
    path.parent.mkdir(parents=True, exist_ok=True)
    vs.save(path)
    click.echo(json.dumps({**report.to_dict(), "store": str(path), "entries": len(vs)}, sort_keys=True))


@main.command("split")
@click.argument("pano", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Directory for the rendered views.")
@common_options
def split_cmd(cfg: Config, pano, out_dir):
    """Render the configured perspective views of one panorama as PNG files."""
    from PIL import Image

    from .geometry import split_panorama
    from .pipeline import SceneError, load_panorama
    try:
        image = load_panorama(pano)
        views = split_panorama(image, cfg.pipeline.views)
    except (SceneError, GeometryError) as e:
        raise Failure(str(e)) from e
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for view_id, raster in views:
        target = out / f"{image.image_id}_{view_id}.png"
        Image.fromarray(raster).save(target)
        click.echo(str(target))


def _panoramas(input_dir: Path) -> list[Path]:
    if input_dir.is_file():
        return [input_dir]
    return sorted(p for p in input_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@main.command("annotate")
@click.argument("input_dir", type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Directory for <image>.records.jsonl and manifest.json.")
@click.option("--jobs", type=click.IntRange(min=1), default=None,
              help="Scenes processed in parallel (default: config 'jobs', else CPU count).")
@click.option("--trace", is_flag=True, help="Also write <image>.trace.jsonl prompt/response transcripts.")
@click.option("--from-gt", "from_gt", type=click.Path(exists=True, dir_okay=False),
              help="COCO ground truth; describe its boxes instead of running the detector.")
@common_options
def annotate(cfg: Config, input_dir, out_dir, jobs, trace, from_gt):
    """Detect and describe roadside assets in every panorama of INPUT_DIR."""
    from .pipeline import run_batch, run_on_boxes
    from .schema import write_records
    schema = _schema(cfg)
    stores = _stores(cfg)
    services = build_services(cfg, schema)
    paths = _panoramas(Path(input_dir))
    if not paths:
        raise UsageProblem(f"no images in {input_dir}")

    scene_fn = None
    if from_gt:
        from .evaluation import EvaluationError, load_coco_gt
        try:
            gt = load_coco_gt(from_gt, schema)
        except (EvaluationError, GeometryError, KeyError) as e:
            raise UsageProblem(f"{from_gt}: {e}") from e
        boxes: dict = {}
        for o in gt.objects:
            boxes.setdefault(o.image_id, []).append({"object_id": o.id, "category": o.category, "bbox": o.bbox})

        def scene_fn(pano):
            image_id = gt.resolve_image(pano.image_id)
            return run_on_boxes(pano, boxes.get(image_id, []), cfg.pipeline, schema, stores, services)

    results, manifest = run_batch(paths, cfg.pipeline, schema, stores, services, jobs or cfg.jobs,
                                  cfg.hash(), scene_fn)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for path, res in zip(paths, results):
        meta = path.with_suffix(".json")
        if meta.is_file():
            try:
                entry = next(e for e in manifest["images"] if e["image"] == path.name)
                entry["metadata"] = json.loads(meta.read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                log.warning("%s: ignoring unreadable metadata: %s", meta.name, e)
        if not res.ok:
            continue
        write_records(out / f"{res.image_id}.records.jsonl", res.records)
        if trace:
            with open(out / f"{res.image_id}.trace.jsonl", "w", encoding="utf-8", newline="\n") as fh:
                for t in res.transcripts:
                    fh.write(json.dumps(t, ensure_ascii=False, sort_keys=True) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    totals = manifest["totals"]
    click.echo(json.dumps(totals, sort_keys=True))
    if totals["failed_images"] or totals["invalids"]:
        raise Failure(f"{totals['failed_images']} image(s) failed, {totals['invalids']} invalid record(s)")


def _labelled_path(text: str) -> tuple[str | None, Path]:
    if "=" in text:
        label, path = text.split("=", 1)
        return label.strip(), Path(path)
    return None, Path(text)


@main.command("evaluate")
@click.option("--gt", "gt_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="COCO ground truth with an 'attributes' object per annotation.")
@click.option("--pred", "preds", required=True, multiple=True, metavar="[LABEL=]FILE",
              help="Detections: records JSONL or COCO results JSON. With --group-tag, LABEL names "
                   "the group the model was trained on (repeatable).")
@click.option("--attr-pred", "attr_preds", multiple=True, metavar="[LABEL=]FILE",
              help="Records JSONL from 'annotate --from-gt', paired with the --pred of the same LABEL.")
@click.option("--group-tag", help="Image field that groups images (e.g. city).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              help="Write report.json, report.txt, report.csv and figures here.")
@click.option("--no-figures", is_flag=True, help="Skip the PNG figures.")
@common_options
def evaluate(cfg: Config, gt_path, preds, attr_preds, group_tag, out_dir, no_figures):
    """Detection AP/mAP and attribute accuracy against ground truth."""
    from .evaluation import EvaluationError, load_coco_gt, load_predictions
    from .report import Run, build_report
    from .schema import SchemaError, read_records
    schema = _schema(cfg)
    try:
        gt = load_coco_gt(gt_path, schema)
        runs = []
        for arg in preds:
            label, path = _labelled_path(arg)
            if not path.is_file():
                raise UsageProblem(f"prediction file not found: {path}")
            p, recs = load_predictions(path, gt, schema)
            runs.append(Run(label or path.stem, p, [], label if group_tag else None))
        by_label = {r.label: r for r in runs}
        for arg in attr_preds:
            label, path = _labelled_path(arg)
            if label is None and len(runs) == 1:
                label = runs[0].label
            if label not in by_label:
                raise UsageProblem(f"--attr-pred {arg!r}: no --pred with label {label!r}")
            if not path.is_file():
                raise UsageProblem(f"attribute prediction file not found: {path}")
            by_label[label].records = read_records(path)
        report = build_report(gt, runs, schema, group_tag)
    except (EvaluationError, GeometryError, SchemaError, KeyError, json.JSONDecodeError) as e:
        raise UsageProblem(str(e)) from e
    if out_dir:
        for p in report.write(out_dir, figures=not no_figures):
            log.info("wrote %s", p)
    click.echo(report.render_text(), nl=False)


@main.command("query")
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.argument("question")
@common_options
def query(cfg: Config, image, question):
    """Ask a free-form question about an image, grounded in the text store."""
    from .clients import ServiceError
    from .pipeline import answer_query
    from .retrieval import load_raster
    if not question.strip():
        raise UsageProblem("question must not be empty")
    schema = _schema(cfg)
    stores = _stores(cfg)
    services = build_services(cfg, schema)
    try:
        raster = load_raster(image)
        click.echo(answer_query(raster, question, cfg.pipeline, stores, services, Path(image).name))
    except (ServiceError, OSError) as e:
        raise Failure(str(e)) from e


@main.group("schema")
def schema_group():
    """Attribute schema utilities."""


@schema_group.command("validate")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@common_options
def schema_validate(cfg: Config, file):
    """Validate a schema file, or a records JSONL file against the configured schema."""
    from .schema import SchemaError, StructuredObjectRecord, load_schema, validate_record
    text = Path(file).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, dict) and "categories" in doc:
        try:
            s = load_schema(file)
        except SchemaError as e:
            raise Failure(str(e)) from e
        click.echo(f"schema ok: {len(s.categories)} categories, version {s.version}")
        return
    schema = _schema(cfg)
    bad = total = 0
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        total += 1
        try:
            rec = StructuredObjectRecord.from_json(line)
        except (ValueError, KeyError, TypeError, GeometryError) as e:
            bad += 1
            click.echo(f"{file}:{n}: unreadable record: {e}", err=True)
            continue
        report = validate_record(rec, schema)
        problems = [f"{v.path}: {v.code}: {v.message}" for v in report.violations]
        if rec.status == "invalid":
            problems.append("status: record is marked invalid")
        if problems:
            bad += 1
            for p in problems:
                click.echo(f"{file}:{n}: {rec.object_id}: {p}", err=True)
    click.echo(json.dumps({"records": total, "failed": bad}, sort_keys=True))
    if bad:
        raise Failure(f"{bad} of {total} record(s) failed validation")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

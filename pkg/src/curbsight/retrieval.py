"""Text and visual knowledge stores with exact cosine top-k search."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BoundingBox, GeometryError, crop
from .numerics import as_vector

log = logging.getLogger(__name__)

STORE_MAGIC = "curbsight-store"
STORE_VERSION = 1


class StoreError(ValueError):
    pass


class CorruptStoreError(StoreError):
    pass


@dataclass(frozen=True)
class RetrievalHit:
    id: str
    score: float
    payload: dict


@dataclass
class IngestReport:
    docs: int = 0
    chunks: int = 0
    skipped: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"docs": self.docs, "chunks": self.chunks, "skipped": list(self.skipped)}


class VectorStore:
    """Exhaustive cosine store. ``modality`` is ``"text"`` or ``"visual"``.

    Scores are pairwise, so adding entries never reorders existing pairs.
    Results are sorted by score descending, then id ascending.
    """

    def __init__(self, modality: str, dim: int):
        if modality not in ("text", "visual"):
            raise StoreError(f"unknown modality {modality!r}")
        if dim <= 0:
            raise StoreError(f"dim must be positive, got {dim}")
        self.modality = modality
        self.dim = int(dim)
        self._ids: list[str] = []
        self._payloads: list[dict] = []
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None
        self._norms: np.ndarray | None = None
        self._pos: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    def payload(self, entry_id: str) -> dict:
        return self._payloads[self._pos[entry_id]]

    def embedding(self, entry_id: str) -> np.ndarray:
        return self._rows[self._pos[entry_id]].copy()

    def __contains__(self, entry_id) -> bool:
        return entry_id in self._pos

    def add(self, entry_id: str, embedding, payload: dict | None = None) -> None:
        v = as_vector(embedding)
        if v.size != self.dim:
            raise StoreError(f"embedding dim {v.size} != store dim {self.dim}")
        if not np.any(v):
            raise StoreError(f"entry {entry_id!r} has a zero embedding")
        entry_id = str(entry_id)
        if entry_id in self._pos:
            raise StoreError(f"duplicate id {entry_id!r}")
        self._pos[entry_id] = len(self._ids)
        self._ids.append(entry_id)
        self._rows.append(v)
        self._payloads.append(dict(payload or {}))
        self._matrix = None

    def discard(self, entry_id: str) -> None:
        if entry_id in self._pos:
            i = self._pos[entry_id]
            del self._ids[i], self._rows[i], self._payloads[i]
            self._reindex()

    def remove_where(self, predicate) -> int:
        keep = [i for i, p in enumerate(self._payloads) if not predicate(p)]
        removed = len(self._ids) - len(keep)
        self._ids = [self._ids[i] for i in keep]
        self._rows = [self._rows[i] for i in keep]
        self._payloads = [self._payloads[i] for i in keep]
        self._reindex()
        return removed

    def _reindex(self) -> None:
        self._pos = {eid: i for i, eid in enumerate(self._ids)}
        self._matrix = None

    def merge(self, other: "VectorStore") -> None:
        if other.dim != self.dim or other.modality != self.modality:
            raise StoreError(f"cannot merge {other.modality}/{other.dim} into {self.modality}/{self.dim}")
        for i, eid in enumerate(other._ids):
            self.add(eid, other._rows[i], other._payloads[i])

    def _ensure_matrix(self) -> None:
        if self._matrix is None:
            self._matrix = np.array(self._rows, dtype=np.float64).reshape(len(self._rows), self.dim)
            self._norms = np.sqrt((self._matrix * self._matrix).sum(axis=1))

    def scores(self, query) -> np.ndarray:
        q = as_vector(query)
        if q.size != self.dim:
            raise StoreError(f"query dim {q.size} != store dim {self.dim}")
        qn = float(np.sqrt(np.dot(q, q)))
        if qn == 0.0:
            raise StoreError("zero-norm query")
        self._ensure_matrix()
        if not len(self._ids):
            return np.zeros(0)
        s = (self._matrix * q).sum(axis=1) / (self._norms * qn)
        return np.clip(s, -1.0, 1.0)

    def query(self, query, k: int, where=None) -> list[RetrievalHit]:
        if k < 1:
            raise StoreError(f"k must be >= 1, got {k}")
        s = self.scores(query)
        idx = range(len(self._ids)) if where is None else [
            i for i, p in enumerate(self._payloads) if where(p)]
        order = sorted(idx, key=lambda i: (-s[i], self._ids[i]))[:k]
        return [RetrievalHit(self._ids[i], float(s[i]), self._payloads[i]) for i in order]

    # --- persistence ------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"magic": STORE_MAGIC, "version": STORE_VERSION, "modality": self.modality,
                  "dim": self.dim, "count": len(self._ids)}
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header) + "\n")
            for i, eid in enumerate(self._ids):
                fh.write(json.dumps({"id": eid, "payload": self._payloads[i],
                                     "embedding": self._rows[i].tolist()}, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path) -> "VectorStore":
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except UnicodeDecodeError as e:
            raise CorruptStoreError(f"{path}: not UTF-8 text") from e
        if not lines:
            raise CorruptStoreError(f"{path}: empty file")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as e:
            raise CorruptStoreError(f"{path}: bad header") from e
        if not isinstance(header, dict) or header.get("magic") != STORE_MAGIC:
            raise CorruptStoreError(f"{path}: not a store file (magic mismatch)")
        if header.get("version") != STORE_VERSION:
            raise CorruptStoreError(f"{path}: unsupported store version {header.get('version')!r}")
        body = [ln for ln in lines[1:] if ln.strip()]
        if len(body) != header.get("count"):
            raise CorruptStoreError(f"{path}: header says {header.get('count')} entries, found {len(body)}")
        store = cls(header["modality"], header["dim"])
        for n, line in enumerate(body, start=2):
            try:
                e = json.loads(line)
                store.add(e["id"], e["embedding"], e.get("payload"))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise CorruptStoreError(f"{path}:{n}: {err}") from err
        return store


def query_text(store: VectorStore, query_embedding, k: int = 3) -> list[RetrievalHit]:
    return store.query(query_embedding, k)


def query_visual(store: VectorStore, query_embedding, m: int = 3,
                 category_filter: str | None = None, schema=None) -> list[RetrievalHit]:
    if category_filter is None:
        return store.query(query_embedding, m)
    name = category_filter
    if schema is not None:
        name = schema.canonical_category(category_filter)
        if name is None:
            raise StoreError(f"unknown filter category {category_filter!r}")
    elif not any(p.get("category", "").casefold() == name.casefold() for p in store._payloads):
        raise StoreError(f"unknown filter category {category_filter!r}")
    key = name.casefold()
    return store.query(query_embedding, m, where=lambda p: p.get("category", "").casefold() == key)


# --- text chunking & ingestion --------------------------------------------

_SENTENCE_END = re.compile(r"[.!?;。！？；](?:\s+|$)")
_HEADING = re.compile(r"^#{1,6}\s+(.+)$", re.MULTILINE)


def chunk_document(body: str, max_chars: int = 512, overlap_chars: int = 64) -> list[tuple[int, int]]:
    """Split ``body`` into overlapping ``(start, end)`` spans.

    A cut prefers the last paragraph break, then the last sentence end, in
    the second half of the window; otherwise it is hard at ``max_chars``.
    Consecutive spans share exactly ``overlap_chars`` characters.
    """
    if not body:
        raise ValueError("cannot chunk an empty document")
    if not max_chars > overlap_chars >= 0:
        raise ValueError(f"need max_chars > overlap_chars >= 0, got {max_chars}, {overlap_chars}")
    spans = []
    start, n = 0, len(body)
    while True:
        if n - start <= max_chars:
            spans.append((start, n))
            return spans
        lo = start + max(overlap_chars + 1, max_chars // 2)
        hi = start + max_chars
        window = body[lo:hi]
        cut = None
        para = window.rfind("\n\n")
        if para >= 0:
            cut = lo + para + 2
        else:
            ends = list(_SENTENCE_END.finditer(window))
            if ends:
                cut = lo + ends[-1].end()
        if cut is None or cut > hi:
            cut = hi
        spans.append((start, cut))
        start = cut - overlap_chars


def _locator(body: str, start: int, end: int) -> str:
    heading = None
    for m in _HEADING.finditer(body):
        if m.start() > start:
            break
        heading = m.group(1).strip()
    where = f"chars {start}-{end}"
    return f"{heading}; {where}" if heading else where


def ingest_documents(paths, embedder, store: VectorStore, max_chars: int = 512,
                     overlap_chars: int = 64) -> IngestReport:
    """Chunk, embed and store plain-text / Markdown documents.

    Documents are keyed by file name; re-ingesting one replaces its chunks.
    """
    if store.modality != "text":
        raise StoreError("ingest_documents needs a text store")
    report = IngestReport()
    for p in paths:
        p = Path(p)
        try:
            body = p.read_text(encoding="utf-8")
        except OSError as e:
            raise FileNotFoundError(f"cannot read document {p}: {e.strerror or e}") from e
        source = p.name
        spans = chunk_document(body, max_chars, overlap_chars)
        staged = []
        for i, (a, b) in enumerate(spans):
            text = body[a:b]
            staged.append((f"{source}#{i:04d}", embedder.embed_text(text),
                           {"source_doc": source, "locator": _locator(body, a, b), "body": text}))
        store.remove_where(lambda payload: payload.get("source_doc") == source)
        for eid, vec, payload in staged:
            store.add(eid, vec, payload)
        report.docs += 1
        report.chunks += len(spans)
        log.info("ingested %s: %d chunks", source, len(spans))
    return report


def load_raster(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def index_exemplars(annotations, images_root, embedder, store: VectorStore, schema,
                    pad_fraction: float = 0.10) -> IngestReport:
    """Embed every annotated object crop of a COCO file into a visual store.

    ``annotations`` is a path or an already parsed COCO dict whose
    annotations may carry an ``attributes`` object.
    """
    if store.modality != "visual":
        raise StoreError("index_exemplars needs a visual store")
    if not isinstance(annotations, dict):
        annotations = json.loads(Path(annotations).read_text(encoding="utf-8"))
    images = {img["id"]: img for img in annotations.get("images", [])}
    cats = {c["id"]: c["name"] for c in annotations.get("categories", [])}
    root = Path(images_root)
    cache: dict = {}
    report = IngestReport(docs=len(images))
    for ann in annotations.get("annotations", []):
        aid = str(ann["id"])
        cat = schema.canonical_category(cats.get(ann.get("category_id"), ""))
        if cat is None:
            report.skipped.append({"id": aid, "reason": f"unknown category {cats.get(ann.get('category_id'))!r}"})
            continue
        img = images.get(ann["image_id"])
        if img is None:
            report.skipped.append({"id": aid, "reason": f"unknown image id {ann['image_id']!r}"})
            continue
        path = root / img["file_name"]
        if path not in cache:
            if not path.is_file():
                raise FileNotFoundError(f"exemplar image missing: {path}")
            cache[path] = load_raster(path)
        try:
            patch = crop(cache[path], BoundingBox.from_xywh(ann["bbox"]), pad_fraction)
        except GeometryError as e:
            report.skipped.append({"id": aid, "reason": str(e)})
            continue
        attrs = ann.get("attributes", {}) or {}
        payload = {"category": cat, "image_ref": img["file_name"],
                   "attributes": [[k, v] for k, v in attrs.items()]}
        store.discard(aid)
        store.add(aid, embedder.embed_image(patch), payload)
        report.chunks += 1
    return report

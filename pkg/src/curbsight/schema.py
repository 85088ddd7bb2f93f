"""Attribute schema, structured object records, validation and JSON repair."""

from __future__ import annotations

import ast
import json
import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .geometry import BoundingBox, GeometryError

UNKNOWN = "unknown"
STATUSES = ("ok", "repair_applied", "invalid")


class SchemaError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ExtractionError(ValueError):
    pass


def _key(text: str) -> str:
    return " ".join(str(text).split()).casefold()


@dataclass(frozen=True)
class AttributeDef:
    name: str
    kind: str = "enumerated"  # or "free-text"
    allowed_values: tuple[str, ...] = ()
    synonyms: dict = field(default_factory=dict)

    @property
    def free_text(self) -> bool:
        return self.kind == "free-text"

    def canonical(self, raw) -> tuple[str | None, bool]:
        """Map a raw value onto the canonical vocabulary.

        Returns ``(value, changed)``; ``value`` is None when the raw value
        cannot be mapped. ``unknown`` is accepted for every attribute.
        """
        changed = False
        if isinstance(raw, bool):
            raw, changed = ("true" if raw else "false"), True
        elif isinstance(raw, (int, float)):
            if isinstance(raw, float) and raw.is_integer():
                raw = int(raw)
            raw, changed = str(raw), True
        elif not isinstance(raw, str):
            return None, True
        text = raw.strip()
        changed = changed or text != raw
        if not text:
            return None, True
        if _key(text) == UNKNOWN:
            return UNKNOWN, changed or text != UNKNOWN
        if self.free_text:
            return text, changed
        if text in self.allowed_values:
            return text, changed
        k = _key(text)
        for v in self.allowed_values:
            if _key(v) == k:
                return v, True
        for alias, target in self.synonyms.items():
            if _key(alias) == k:
                return target, True
        return None, True


@dataclass(frozen=True)
class CategoryDef:
    name: str
    attributes: tuple[AttributeDef, ...]
    aliases: tuple[str, ...] = ()

    def attribute(self, name: str) -> AttributeDef | None:
        k = _key(name)
        for a in self.attributes:
            if _key(a.name) == k:
                return a
        return None

    @property
    def attribute_names(self) -> list[str]:
        return [a.name for a in self.attributes]


@dataclass(frozen=True)
class AttributeSchema:
    categories: tuple[CategoryDef, ...]
    version: str = ""

    def category(self, name: str) -> CategoryDef | None:
        """Case-insensitive lookup by name or alias."""
        if not isinstance(name, str):
            return None
        k = _key(name)
        for c in self.categories:
            if _key(c.name) == k or any(_key(a) == k for a in c.aliases):
                return c
        return None

    def canonical_category(self, name: str) -> str | None:
        c = self.category(name)
        return c.name if c else None

    @property
    def category_names(self) -> list[str]:
        return [c.name for c in self.categories]


# --- loading --------------------------------------------------------------

def _parse_attribute(d, path: str) -> AttributeDef:
    if not isinstance(d, dict) or not isinstance(d.get("name"), str) or not d["name"].strip():
        raise SchemaError(path, "attribute needs a non-empty 'name'")
    kind = d.get("kind", "enumerated")
    if kind not in ("enumerated", "free-text"):
        raise SchemaError(path, f"unknown kind {kind!r}")
    values = d.get("allowed_values", [])
    if not isinstance(values, list) or not all(isinstance(v, str) and v.strip() for v in values):
        raise SchemaError(path, "allowed_values must be a list of non-empty strings")
    if kind == "free-text" and values:
        raise SchemaError(path, "free-text attribute must not list allowed_values")
    if kind == "enumerated" and len(values) < 2:
        raise SchemaError(path, "enumerated attribute needs at least 2 allowed values")
    seen = set()
    for v in values:
        if _key(v) in seen:
            raise SchemaError(path, f"duplicate allowed value {v!r}")
        if _key(v) == UNKNOWN:
            raise SchemaError(path, f"{UNKNOWN!r} is reserved and implicit")
        seen.add(_key(v))
    synonyms = d.get("synonyms", {}) or {}
    if not isinstance(synonyms, dict):
        raise SchemaError(path, "synonyms must be an object")
    for alias, target in synonyms.items():
        if target not in values:
            raise SchemaError(f"{path}.synonyms.{alias}", f"synonym targets unknown value {target!r}")
    return AttributeDef(d["name"].strip(), kind, tuple(values), dict(synonyms))


def parse_schema(doc) -> AttributeSchema:
    if not isinstance(doc, dict) or not isinstance(doc.get("categories"), list):
        raise SchemaError("$", "schema must be an object with a 'categories' list")
    cats = []
    names = set()
    for i, c in enumerate(doc["categories"]):
        path = f"categories[{i}]"
        if not isinstance(c, dict) or not isinstance(c.get("name"), str) or not c["name"].strip():
            raise SchemaError(path, "category needs a non-empty 'name'")
        name = c["name"].strip()
        aliases = tuple(c.get("aliases", []))
        for label in (name, *aliases):
            if _key(label) in names:
                raise SchemaError(path, f"duplicate category {label!r}")
            names.add(_key(label))
        attrs_doc = c.get("attributes")
        if not isinstance(attrs_doc, list) or not attrs_doc:
            raise SchemaError(path, f"category {name!r} needs at least one attribute")
        attrs = []
        anames = set()
        for j, a in enumerate(attrs_doc):
            attr = _parse_attribute(a, f"{path}.attributes[{j}]")
            if _key(attr.name) in anames:
                raise SchemaError(f"{path}.attributes[{j}]", f"duplicate attribute {attr.name!r}")
            anames.add(_key(attr.name))
            attrs.append(attr)
        cats.append(CategoryDef(name, tuple(attrs), aliases))
    if not cats:
        raise SchemaError("categories", "schema declares no categories")
    return AttributeSchema(tuple(cats), str(doc.get("version", "")))


def load_schema(path=None) -> AttributeSchema:
    """Load a schema file; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("curbsight").joinpath("data/default_schema.json").read_text("utf-8")
        where = "default_schema.json"
    else:
        where = str(path)
        text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(where, f"parse error: {e}") from e
    try:
        return parse_schema(doc)
    except SchemaError as e:
        raise SchemaError(f"{where}:{e.path}", str(e).split(": ", 1)[1]) from e


def schema_to_dict(schema: AttributeSchema) -> dict:
    return {
        "version": schema.version,
        "categories": [
            {"name": c.name, **({"aliases": list(c.aliases)} if c.aliases else {}),
             "attributes": [{"name": a.name, "kind": a.kind, "allowed_values": list(a.allowed_values),
                             "synonyms": dict(a.synonyms)} for a in c.attributes]}
            for c in schema.categories
        ],
    }


# --- records --------------------------------------------------------------

@dataclass(frozen=True)
class AttributeValue:
    name: str
    value: str
    confidence: float


@dataclass(frozen=True)
class StructuredObjectRecord:
    object_id: str
    category: str
    bbox: BoundingBox | None
    attributes: tuple[AttributeValue, ...]
    source_image: str = ""
    source_view: str = ""
    confidence: float | None = None
    status: str = "ok"

    def attribute_map(self) -> dict[str, str]:
        return {a.name: a.value for a in self.attributes}

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "category": self.category,
            "confidence": self.confidence,
            "bbox": self.bbox.to_dict() if self.bbox is not None else None,
            "attributes": [{"name": a.name, "value": a.value, "confidence": a.confidence}
                           for a in self.attributes],
            "source_image": self.source_image,
            "source_view": self.source_view,
            "status": self.status,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredObjectRecord":
        bbox = d.get("bbox")
        return cls(
            object_id=str(d.get("object_id", "")),
            category=d["category"],
            bbox=BoundingBox.from_dict(bbox) if bbox is not None else None,
            attributes=tuple(AttributeValue(a["name"], a["value"], a["confidence"])
                             for a in d.get("attributes", [])),
            source_image=d.get("source_image", ""),
            source_view=d.get("source_view", ""),
            confidence=d.get("confidence"),
            status=d.get("status", "ok"),
        )

    @classmethod
    def from_json(cls, text: str) -> "StructuredObjectRecord":
        return cls.from_dict(json.loads(text))


def read_records(path) -> list[StructuredObjectRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(StructuredObjectRecord.from_json(line))
    return out


def write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


# --- validation -----------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    path: str
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]
    normalized: StructuredObjectRecord | None = None

    @property
    def valid(self) -> bool:
        return not self.violations

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


def _valid_confidence(c) -> bool:
    return isinstance(c, (int, float)) and not isinstance(c, bool) and math.isfinite(c) and 0.0 <= c <= 1.0


def validate_record(record: StructuredObjectRecord, schema: AttributeSchema) -> ValidationReport:
    """Check ``record`` against ``schema``; every failure is listed.

    Casing and synonyms are normalized first; the canonicalized record is
    returned on the report when there are no violations.
    """
    vs: list[Violation] = []
    if record.status not in STATUSES:
        vs.append(Violation("status", "invalid-status", f"unknown status {record.status!r}"))
    if record.confidence is not None and not _valid_confidence(record.confidence):
        vs.append(Violation("confidence", "confidence-range", f"{record.confidence!r} not in [0, 1]"))
    if record.bbox is not None:
        try:
            record.bbox.check(allow_wrap=True)
        except GeometryError as e:
            vs.append(Violation("bbox", "invalid-bbox", str(e)))
    cat = schema.category(record.category)
    normalized_attrs = []
    if cat is None:
        vs.append(Violation("category", "unknown-category", f"{record.category!r} is not in the schema"))
    seen = set()
    for i, a in enumerate(record.attributes):
        path = f"attributes[{i}]"
        if not _valid_confidence(a.confidence):
            vs.append(Violation(f"{path}.confidence", "confidence-range", f"{a.confidence!r} not in [0, 1]"))
        if cat is None:
            continue
        adef = cat.attribute(a.name) if isinstance(a.name, str) else None
        if adef is None:
            vs.append(Violation(f"{path}.name", "unknown-attribute",
                                f"{a.name!r} is not an attribute of {cat.name}"))
            continue
        if adef.name in seen:
            vs.append(Violation(f"{path}.name", "duplicate-attribute", f"{adef.name!r} listed twice"))
            continue
        seen.add(adef.name)
        value, _ = adef.canonical(a.value)
        if value is None:
            vs.append(Violation(f"{path}.value", "invalid-value",
                                f"{a.value!r} is not an allowed value of {cat.name}.{adef.name}"))
            continue
        normalized_attrs.append(AttributeValue(adef.name, value, a.confidence))
    if vs:
        return ValidationReport(tuple(vs))
    return ValidationReport((), replace(record, category=cat.name, attributes=tuple(normalized_attrs)))


# --- extraction & repair --------------------------------------------------

def _brace_blocks(text: str):
    """Yield balanced top-level ``{...}`` substrings in order of appearance."""
    i, n = 0, len(text)
    while i < n:
        start = text.find("{", i)
        if start < 0:
            return
        depth, in_str, esc, end = 0, False, False, -1
        for j in range(start, n):
            ch = text[j]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    end = j
                    break
        if end < 0:
            i = start + 1
            continue
        yield text[start:end + 1]
        i = end + 1


_TRAILING_COMMA = re.compile(r",(\s*[}\]])")


def _lenient_load(block: str):
    """Return ``(obj, repaired)`` or raise ValueError."""
    try:
        return json.loads(block), False
    except json.JSONDecodeError:
        pass
    try:
        return json.loads(_TRAILING_COMMA.sub(r"\1", block)), True
    except json.JSONDecodeError:
        pass
    try:
        return ast.literal_eval(block), True
    except (ValueError, SyntaxError, MemoryError, RecursionError):
        raise ValueError("unparseable brace block") from None


def _field(d: dict, name: str):
    for k, v in d.items():
        if isinstance(k, str) and _key(k) == name:
            return k, v
    return None, None


def _iter_raw_attributes(d: dict, cat: CategoryDef):
    """Yield ``(name, value, confidence, restructured)`` from the supported shapes."""
    _, attrs = _field(d, "attributes")
    if attrs is None:
        for k, v in d.items():
            if isinstance(k, str) and cat.attribute(k) is not None:
                yield from _attr_entry(k, v, True)
        return
    if isinstance(attrs, dict):
        for k, v in attrs.items():
            yield from _attr_entry(k, v, False)
    elif isinstance(attrs, list):
        for item in attrs:
            if isinstance(item, dict) and "name" in item:
                yield item["name"], item.get("value"), item.get("confidence"), False
            else:
                yield None, None, None, True


def _attr_entry(name, v, restructured):
    if isinstance(v, dict):
        _, value = _field(v, "value")
        _, conf = _field(v, "confidence")
        yield name, value, conf, restructured
    else:
        yield name, v, None, True


def extract_and_repair(raw: str, schema: AttributeSchema,
                       expected_category: str | None = None) -> StructuredObjectRecord:
    """Pull one record out of free-form model text and coerce it onto the schema.

    Raises ExtractionError when no parseable brace block carries a category.
    """
    obj, repaired = None, False
    for block in _brace_blocks(raw or ""):
        try:
            cand, fixed = _lenient_load(block)
        except ValueError:
            continue
        if isinstance(cand, dict):
            obj, repaired = cand, fixed
            break
    if obj is None:
        raise ExtractionError("no parseable JSON object in model output")
    _, raw_cat = _field(obj, "category")
    if raw_cat is None:
        raise ExtractionError("JSON object has no category field")

    cat = schema.category(raw_cat)
    if expected_category is not None:
        expected = schema.category(expected_category)
        if expected is None:
            raise ExtractionError(f"expected category {expected_category!r} is not in the schema")
        if cat is not expected:
            cat, repaired = expected, True
    if cat is None:
        raise ExtractionError(f"category {raw_cat!r} is not in the schema")
    if raw_cat != cat.name:
        repaired = True

    values: dict[str, AttributeValue] = {}
    for name, value, conf, restructured in _iter_raw_attributes(obj, cat):
        repaired = repaired or restructured
        adef = cat.attribute(name) if isinstance(name, str) else None
        if adef is None or adef.name in values:
            repaired = True
            continue
        if name != adef.name:
            repaired = True
        canon, changed = adef.canonical(value)
        repaired = repaired or changed
        if _valid_confidence(conf):
            conf = float(conf)
        else:
            conf, repaired = (min(1.0, max(0.0, float(conf))), True) if _finite_number(conf) else (0.0, True)
        if canon is None:
            canon, conf, repaired = UNKNOWN, 0.0, True
        values[adef.name] = AttributeValue(adef.name, canon, conf)
    attrs = []
    for adef in cat.attributes:
        if adef.name not in values:
            repaired = True
            attrs.append(AttributeValue(adef.name, UNKNOWN, 0.0))
        else:
            attrs.append(values[adef.name])

    rec_conf = obj.get("confidence")
    if rec_conf is not None and not _valid_confidence(rec_conf):
        rec_conf, repaired = None, True
    bbox = None
    if isinstance(obj.get("bbox"), dict):
        try:
            bbox = BoundingBox.from_dict(obj["bbox"]).check(allow_wrap=True)
        except (KeyError, TypeError, ValueError):
            bbox, repaired = None, True
    return StructuredObjectRecord(
        object_id=str(obj.get("object_id", "")),
        category=cat.name,
        bbox=bbox,
        attributes=tuple(attrs),
        source_image=str(obj.get("source_image", "")),
        source_view=str(obj.get("source_view", "")),
        confidence=float(rec_conf) if rec_conf is not None else None,
        status="repair_applied" if repaired else "ok",
    )


def _finite_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)

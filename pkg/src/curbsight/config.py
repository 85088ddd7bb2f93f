"""Pipeline configuration: defaults, YAML/JSON files, ``key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .geometry import PerspectiveView, default_views

DEFAULTS: dict = {
    "schema": None,
    "views": [v.to_dict() for v in default_views()],
    "conf_threshold": 0.30,
    "dedup_iou": 0.5,
    "pad_fraction": 0.10,
    "k": 3,
    "m": 3,
    "context_char_budget": 6000,
    "category_filter_on_visual": True,
    "original_image": "panorama",
    "jobs": 0,
    "chunking": {"max_chars": 512, "overlap_chars": 64},
    "prompts": {
        "system": "You are a roadside infrastructure inspector. Describe objects strictly "
                  "within the attribute schema you are given.",
        "object": "Describe the {category} shown in the first image. The second image is "
                  "the surrounding scene for context.",
    },
    "stores": {"text": None, "visual": None, "text_dim": 64, "visual_dim": 64},
    "services": {
        name: {"backend": "http", "base_url": "", "model": "", "token_env": f"CURBSIGHT_{name.upper()}_TOKEN",
               "timeout": 60.0, "max_retries": 3, "concurrency": 4, "fixtures": None,
               "mode": "fixture", "style": "fenced", "jitter_seed": None}
        for name in ("detector", "vlm", "text_embedder", "image_embedder")
    },
}

_PATH_KEYS = [("schema",), ("stores", "text"), ("stores", "visual")] + [
    ("services", s, "fixtures") for s in DEFAULTS["services"]]


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, where: str = "") -> dict:
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v
    return base


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        node[parts[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"bad value for {key!r}: {e}") from e


def load_config(path=None, overrides=()) -> "Config":
    raw = copy.deepcopy(DEFAULTS)
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(raw, doc)
        base_dir = path.resolve().parent
    for o in overrides:
        apply_override(raw, o)
    return Config.from_dict(raw, base_dir)


@dataclass
class PipelineConfig:
    views: list[PerspectiveView]
    conf_threshold: float = 0.30
    dedup_iou: float = 0.5
    pad_fraction: float = 0.10
    k: int = 3
    m: int = 3
    system_prompt: str = DEFAULTS["prompts"]["system"]
    object_prompt: str = DEFAULTS["prompts"]["object"]
    context_char_budget: int = 6000
    category_filter_on_visual: bool = True
    original_image: str = "panorama"

    def __post_init__(self):
        if self.k < 0 or self.m < 0:
            raise ConfigError("k and m must be >= 0")
        if not self.views:
            raise ConfigError("at least one view is required")
        if self.context_char_budget <= len(self.object_prompt):
            raise ConfigError("context_char_budget must exceed the object prompt length")
        if self.original_image not in ("panorama", "view"):
            raise ConfigError("original_image must be 'panorama' or 'view'")
        if not 0.0 <= self.pad_fraction:
            raise ConfigError("pad_fraction must be >= 0")


@dataclass
class Config:
    raw: dict
    base_dir: Path
    pipeline: PipelineConfig = field(init=False)

    def __post_init__(self):
        r = self.raw
        try:
            views = [PerspectiveView.from_dict(v) for v in r["views"]]
            self.pipeline = PipelineConfig(
                views=views, conf_threshold=float(r["conf_threshold"]), dedup_iou=float(r["dedup_iou"]),
                pad_fraction=float(r["pad_fraction"]), k=int(r["k"]), m=int(r["m"]),
                system_prompt=r["prompts"]["system"], object_prompt=r["prompts"]["object"],
                context_char_budget=int(r["context_char_budget"]),
                category_filter_on_visual=bool(r["category_filter_on_visual"]),
                original_image=r["original_image"])
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid configuration: {e}") from e

    @classmethod
    def from_dict(cls, raw: dict, base_dir=None) -> "Config":
        return cls(raw, Path(base_dir or Path.cwd()))

    def path(self, *keys) -> Path | None:
        node = self.raw
        for k in keys:
            node = node[k]
        if node is None:
            return None
        p = Path(os.path.expanduser(str(node)))
        return p if p.is_absolute() else self.base_dir / p

    @property
    def jobs(self) -> int:
        return int(self.raw.get("jobs") or 0) or (os.cpu_count() or 1)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode("utf-8")).hexdigest()

    def service(self, name: str) -> dict:
        return self.raw["services"][name]


def build_endpoint(svc: dict):
    from .clients import ServiceEndpoint
    return ServiceEndpoint(base_url=svc["base_url"], model_name=svc["model"], token_env=svc["token_env"],
                           timeout=float(svc["timeout"]), max_retries=int(svc["max_retries"]),
                           concurrency=int(svc["concurrency"]), jitter_seed=svc.get("jitter_seed"))


@dataclass
class Services:
    detector: object
    vlm: object
    text_embedder: object
    image_embedder: object


def build_services(cfg: Config, schema) -> Services:
    from . import clients

    def fixtures(name):
        return cfg.path("services", name, "fixtures")

    def backend(name):
        b = cfg.service(name)["backend"]
        if b not in ("http", "mock"):
            raise ConfigError(f"services.{name}.backend must be 'http' or 'mock', got {b!r}")
        if b == "http" and not cfg.service(name)["base_url"]:
            raise ConfigError(f"services.{name}.base_url is required for the http backend")
        return b

    det = cfg.service("detector")
    detector = (clients.MockDetector(fixtures("detector"), schema) if backend("detector") == "mock"
                else clients.HttpDetector(build_endpoint(det), schema))
    vlm_cfg = cfg.service("vlm")
    vlm = (clients.MockVlm(vlm_cfg["mode"], fixtures("vlm"), vlm_cfg["style"]) if backend("vlm") == "mock"
           else clients.HttpVlm(build_endpoint(vlm_cfg)))
    stores = cfg.raw["stores"]
    embedders = []
    for name, dim in (("text_embedder", stores["text_dim"]), ("image_embedder", stores["visual_dim"])):
        embedders.append(clients.MockEmbedder(int(dim)) if backend(name) == "mock"
                         else clients.HttpEmbedder(build_endpoint(cfg.service(name)), int(dim)))
    return Services(detector, vlm, *embedders)

"""Run configuration: defaults, validation, file loading and merging."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigError

LAYER_SETS = ("decoder", "all")
REFINE_MODES = ("off", "auto", "on")


@dataclass(frozen=True)
class DirectorConfig:
    n_scenes: int | None = None
    max_subjects: int = 6
    max_scenes: int = 12
    word_limit: int = 40
    retries: int = 3
    jaccard_floor: float = 0.3
    descriptor_max_words: int = 6
    workers: int = 1
    requests_per_minute: float | None = None
    templates_dir: str | None = None

    def __post_init__(self):
        if self.n_scenes is not None and not 1 <= self.n_scenes <= self.max_scenes:
            raise ConfigError(f"n_scenes must lie in [1, {self.max_scenes}], got {self.n_scenes}")
        if self.max_subjects < 1:
            raise ConfigError("max_subjects must be >= 1")
        if self.retries < 0:
            raise ConfigError("retries must be >= 0")
        if self.word_limit < 1:
            raise ConfigError("word_limit must be >= 1")


@dataclass(frozen=True)
class RenderConfig:
    steps: int = 50
    guidance_scale: float = 7.0
    width: int = 1280
    height: int = 768
    lam: float = 0.9
    dropout: float = 0.5
    mmsa_enabled: bool = True
    mmca_enabled: bool = True
    mmsa_layers: str = "decoder"
    mmca_layers: str = "all"
    mask_refine: str = "auto"
    drift_threshold: float = 0.35
    refine_powers: int = 4
    union_mode: str = "union"
    rewrite: bool = True
    seed: int = 0
    seed_policy: str = "hash"
    style_suffix: str = ""
    workers: int = 1
    fail_fast: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.width < 1 or self.height < 1:
            raise ConfigError("width and height must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mmsa_layers not in LAYER_SETS or self.mmca_layers not in LAYER_SETS:
            raise ConfigError(f"layer sets must be one of {LAYER_SETS}")
        if self.mask_refine not in REFINE_MODES:
            raise ConfigError(f"mask_refine must be one of {REFINE_MODES}")
        if not 0.0 <= self.drift_threshold <= 1.0:
            raise ConfigError("drift_threshold must lie in [0, 1]")
        if self.refine_powers < 1:
            raise ConfigError("refine_powers must be >= 1")
        if self.union_mode not in ("union", "intersection"):
            raise ConfigError("union_mode must be 'union' or 'intersection'")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.seed_policy != "hash":
            raise ConfigError(f"unknown seed_policy {self.seed_policy!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def arm(self) -> dict:
        return {"mmsa": self.mmsa_enabled, "mmca": self.mmca_enabled, "rewrite": self.rewrite}


# nested config-file blocks -> flat field names
_NESTED = {
    ("mmsa", "enabled"): "mmsa_enabled",
    ("mmsa", "layers"): "mmsa_layers",
    ("mmsa", "dropout"): "dropout",
    ("mmca", "enabled"): "mmca_enabled",
    ("mmca", "layers"): "mmca_layers",
    ("mmca", "lambda"): "lam",
}


def flatten_config(doc: dict) -> dict:
    flat = {}
    for key, value in (doc or {}).items():
        if key in ("mmsa", "mmca") and isinstance(value, dict):
            for sub, v in value.items():
                target = _NESTED.get((key, sub))
                if target is None:
                    raise ConfigError(f"unknown option {key}.{sub}")
                flat[target] = v
        elif key == "lambda":
            flat["lam"] = value
        else:
            flat[key] = value
    return flat


def render_config_from(doc: dict | None = None, **overrides) -> RenderConfig:
    """Build a RenderConfig: defaults < ``doc`` (file contents) < ``overrides``."""
    known = {f.name for f in fields(RenderConfig)}
    merged = {}
    for source in (flatten_config(doc or {}), {k: v for k, v in overrides.items() if v is not None}):
        for key, value in source.items():
            if key not in known:
                raise ConfigError(f"unknown render option {key!r}")
            merged[key] = value
    try:
        return replace(RenderConfig(), **merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return doc

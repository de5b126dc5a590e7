"""JSON schemas for every file the package reads or writes."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import jsonschema

from .errors import SchemaError

PLAN_SCHEMA = "dreamstory.plan.v1"
RUN_SCHEMA = "dreamstory.run.v1"
METRICS_SCHEMA = "dreamstory.metrics.v1"
BENCH_SCHEMA = "dreamstory.bench.v1"

_str = {"type": "string"}
_nonempty = {"type": "string", "minLength": 1}
_int0 = {"type": "integer", "minimum": 0}
_num = {"type": "number"}
_unit = {"type": "number", "minimum": 0, "maximum": 1}

SUBJECT = {
    "type": "object",
    "required": ["name", "portrait_prompt", "short_descriptor", "type_token"],
    "properties": {
        "name": _nonempty,
        "portrait_prompt": _nonempty,
        "short_descriptor": _nonempty,
        "type_token": _nonempty,
        "style_tags": {"type": "array", "items": _str},
    },
}

SCENE = {
    "type": "object",
    "required": ["index", "raw_prompt", "rewritten_prompt", "present_subjects", "word_count"],
    "properties": {
        "index": _int0,
        "raw_prompt": _str,
        "rewritten_prompt": _str,
        "present_subjects": {"type": "array", "items": _nonempty, "uniqueItems": True},
        "word_count": _int0,
    },
}

FILE_SCHEMAS: dict[str, dict] = {
    PLAN_SCHEMA: {
        "type": "object",
        "required": ["schema", "story_text", "subjects", "scenes", "creation_trace", "director_model_id"],
        "properties": {
            "schema": {"const": PLAN_SCHEMA},
            "story_text": _nonempty,
            "director_model_id": _str,
            "n_scenes_requested": {"type": ["integer", "null"], "minimum": 1},
            "subjects": {"type": "array", "items": SUBJECT},
            "scenes": {"type": "array", "items": SCENE},
            "creation_trace": {
                "type": "array",
                "items": {"type": "array", "items": _str, "minItems": 2, "maxItems": 2},
            },
        },
    },
    RUN_SCHEMA: {
        "type": "object",
        "required": ["schema", "run_id", "config", "plan_hash", "arm", "anchors", "scenes", "layers"],
        "properties": {
            "schema": {"const": RUN_SCHEMA},
            "run_id": _nonempty,
            "config": {"type": "object"},
            "plan_hash": _nonempty,
            "backend": _str,
            "arm": {
                "type": "object",
                "required": ["mmsa", "mmca", "rewrite"],
                "properties": {"mmsa": {"type": "boolean"}, "mmca": {"type": "boolean"}, "rewrite": {"type": "boolean"}},
            },
            "layers": {"type": "object", "additionalProperties": {"type": "array", "items": {"enum": ["mmsa", "mmca"]}}},
            "anchors": {
                "type": "object",
                "additionalProperties": {
                    "type": "object",
                    "required": ["seed", "image", "flags"],
                    "properties": {"seed": _int0, "image": _str, "flags": {"type": "array", "items": _str}},
                },
            },
            "scenes": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["index", "status", "seed", "flags"],
                    "properties": {
                        "index": _int0,
                        "status": {"enum": ["ok", "failed", "pending"]},
                        "seed": _int0,
                        "prompt": _str,
                        "present_subjects": {"type": "array", "items": _str},
                        "flags": {"type": "array", "items": _str},
                        "image": _str,
                        "rehearsal": _str,
                        "masks": {"type": "object", "additionalProperties": _str},
                        "image_sha256": _str,
                        "error": _str,
                    },
                },
            },
        },
    },
    METRICS_SCHEMA: {
        "type": "object",
        "required": ["schema", "metrics", "scenes", "aggregates"],
        "properties": {
            "schema": {"const": METRICS_SCHEMA},
            "metrics": {"type": "array", "items": {"enum": ["aes", "clip_t", "ds", "dc_ds"]}},
            "dc_ds_rule": _str,
            "scenes": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["scene_id", "k_subjects"],
                    "properties": {
                        "scene_id": _str,
                        "k_subjects": _int0,
                        "aes": {"type": ["number", "null"]},
                        "clip_t": {"type": ["number", "null"]},
                        "ds_per_subject": {"type": "object", "additionalProperties": _unit},
                        "dc_ds": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                        "detection_log": {"type": "object"},
                    },
                },
            },
            "aggregates": {"type": "array", "items": {"type": "object", "required": ["group", "n"]}},
            "annotation_accuracy": {"type": "object"},
        },
    },
    BENCH_SCHEMA: {
        "type": "object",
        "required": ["schema", "generator_model_id", "word_limit", "pool", "group_sizes", "cases"],
        "properties": {
            "schema": {"const": BENCH_SCHEMA},
            "generator_model_id": _str,
            "word_limit": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer"},
            "pool": {"type": "array", "items": SUBJECT},
            "group_sizes": {"type": "object", "additionalProperties": _int0},
            "cases": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["case_id", "k_subjects", "subjects", "scene_prompt", "word_count", "review_status"],
                    "properties": {
                        "case_id": _nonempty,
                        "k_subjects": {"type": "integer", "enum": [0, 1, 2, 3]},
                        "subjects": {"type": "array", "items": _nonempty, "uniqueItems": True, "maxItems": 3},
                        "scene_prompt": _str,
                        "word_count": _int0,
                        "review_status": {"enum": ["auto", "approved", "rejected"]},
                    },
                },
            },
        },
    },
}

_MIGRATION_HINTS = {
    BENCH_SCHEMA: "re-export the benchmark with `dreamstory bench build` (v1 adds group_sizes and review_status)",
    PLAN_SCHEMA: "regenerate the plan with `dreamstory plan`",
}


def _location(err: jsonschema.ValidationError) -> str:
    loc = "$"
    for part in err.absolute_path:
        loc += f"[{part}]" if isinstance(part, int) else f".{part}"
    return loc


def validate_document(doc, schema_id: str, source: str = "") -> None:
    """Validate ``doc`` against a registered file schema; raise SchemaError."""
    prefix = f"{source}:" if source else ""
    if not isinstance(doc, dict):
        raise SchemaError("document must be a JSON object", location=prefix + "$")
    found = doc.get("schema")
    if found != schema_id:
        hint = _MIGRATION_HINTS.get(schema_id, "")
        msg = f"unsupported schema {found!r}, expected {schema_id!r}"
        if hint:
            msg += f"; migration: {hint}"
        raise SchemaError(msg, location=prefix + "$.schema")
    validator = jsonschema.Draft202012Validator(FILE_SCHEMAS[schema_id])
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise SchemaError(err.message, location=prefix + _location(err))


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_json_atomic(path: str | Path, doc) -> Path:
    """Write pretty JSON via a temp file and rename, so readers never see halves."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_json(path: str | Path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", location=f"{path}:line {exc.lineno}") from exc

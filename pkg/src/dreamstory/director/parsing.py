"""Pull JSON out of chatty LLM answers and check it against a response schema."""

from __future__ import annotations

import json
import re

import jsonschema

from ..errors import LLMFormatError

_s = {"type": "string", "minLength": 1}

RESPONSE_SCHEMAS: dict[str, dict] = {
    "subjects": {
        "type": "object",
        "required": ["subjects"],
        "properties": {
            "subjects": {
                "type": "array",
                "items": {"type": "object", "required": ["name"], "properties": {"name": _s}},
            },
            "no_characters": {"type": "boolean"},
        },
    },
    "subject_portrait": {
        "type": "object",
        "required": ["portrait_prompt"],
        "properties": {"portrait_prompt": _s, "style_tags": {"type": "array", "items": {"type": "string"}}},
    },
    "subject_descriptor": {
        "type": "object",
        "required": ["short_descriptor", "type_token"],
        "properties": {"short_descriptor": _s, "type_token": _s},
    },
    "scenes": {
        "type": "object",
        "required": ["scenes"],
        "properties": {"scenes": {"type": "array", "minItems": 1, "items": _s}},
    },
    "prompt": {"type": "object", "required": ["prompt"], "properties": {"prompt": _s}},
    "presence": {"type": "object", "required": ["present"], "properties": {"present": {"type": "boolean"}}},
    "pool": {
        "type": "object",
        "required": ["subjects"],
        "properties": {
            "subjects": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["name", "portrait_prompt", "short_descriptor", "type_token"],
                    "properties": {
                        "name": _s,
                        "portrait_prompt": _s,
                        "short_descriptor": _s,
                        "type_token": _s,
                    },
                },
            }
        },
    },
}

_FENCE = re.compile(r"```[a-zA-Z0-9_-]*\s*\n?(.*?)```", re.S)


def _islands(text: str):
    """Yield every JSON object/array decodable from ``text``, fenced blocks first."""
    decoder = json.JSONDecoder()
    seen = set()
    chunks = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    for chunk in chunks:
        i = 0
        while i < len(chunk):
            if chunk[i] in "{[":
                try:
                    value, end = decoder.raw_decode(chunk, i)
                except json.JSONDecodeError:
                    i += 1
                    continue
                key = json.dumps(value, sort_keys=True)
                if key not in seen:
                    seen.add(key)
                    yield value
                i = end
            else:
                i += 1


def parse_structured_response(text: str, schema_id: str):
    """Return the first JSON island in ``text`` that satisfies ``schema_id``."""
    schema = RESPONSE_SCHEMAS[schema_id]
    validator = jsonschema.Draft202012Validator(schema)
    first_error = None
    found_any = False
    for value in _islands(text or ""):
        found_any = True
        err = jsonschema.exceptions.best_match(validator.iter_errors(value))
        if err is None:
            return value
        first_error = first_error or err.message
    if not found_any:
        raise LLMFormatError("no JSON object found in response", text=text)
    raise LLMFormatError(f"response does not match schema {schema_id!r}: {first_error}", text=text)

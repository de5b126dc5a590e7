"""Prompt template registry backed by editable text files.

A template file is split into ``### <section>`` blocks: ``stage``, ``schema``,
``system``, one ``example`` block per in-context example, and ``user``.
``$name`` placeholders are filled with :class:`string.Template`; the user block
carries the structured request as ``$payload`` (a JSON object).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from string import Template

from ..errors import ConfigError

DEFAULT_DIR = Path(__file__).parent / "templates"
MIN_EXAMPLES = 2
STAGE_TAG = "[stage: {}]"


@dataclass(frozen=True)
class PromptTemplate:
    stage: str
    schema: str
    system: str
    examples: tuple[str, ...]
    user: str

    def render(self, payload: dict, **extra) -> list[tuple[str, str]]:
        fields = {k: str(v) for k, v in extra.items()}
        fields["payload"] = json.dumps(payload, ensure_ascii=False, sort_keys=True)
        system = Template(self.system).safe_substitute(fields)
        shots = "\n\n".join(f"Example {i + 1}:\n{ex}" for i, ex in enumerate(self.examples))
        head = STAGE_TAG.format(self.stage)
        return [
            ("system", f"{head}\n{system}\n\n{shots}"),
            ("user", Template(self.user).safe_substitute(fields)),
        ]


def parse_template(text: str, source: str = "<string>") -> PromptTemplate:
    sections: list[tuple[str, list[str]]] = []
    for line in text.splitlines():
        if line.startswith("### "):
            sections.append((line[4:].strip().lower(), []))
        elif sections:
            sections[-1][1].append(line)
    blocks: dict[str, list[str]] = {}
    for name, lines in sections:
        blocks.setdefault(name, []).append("\n".join(lines).strip())
    missing = {"stage", "schema", "system", "user"} - blocks.keys()
    if missing:
        raise ConfigError(f"template {source} lacks sections: {sorted(missing)}")
    examples = tuple(blocks.get("example", []))
    if len(examples) < MIN_EXAMPLES:
        raise ConfigError(f"template {source} has {len(examples)} in-context examples, needs >= {MIN_EXAMPLES}")
    return PromptTemplate(
        stage=blocks["stage"][0],
        schema=blocks["schema"][0],
        system=blocks["system"][0],
        examples=examples,
        user=blocks["user"][0],
    )


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Load every ``*.txt`` template; fails if any has fewer than two examples."""
    directory = Path(directory) if directory else DEFAULT_DIR
    registry = {}
    for path in sorted(directory.glob("*.txt")):
        tpl = parse_template(path.read_text(encoding="utf-8"), str(path))
        registry[tpl.stage] = tpl
    if not registry:
        raise ConfigError(f"no templates found in {directory}")
    return registry


def stage_of(messages) -> str | None:
    """Recover the stage name from rendered messages (used by mock LLMs)."""
    for role, text in messages:
        if role == "system" and text.startswith("[stage: "):
            return text[len("[stage: "):text.index("]")]
    return None


def payload_of(messages) -> dict:
    """Recover the JSON payload from the first user message."""
    for role, text in messages:
        if role == "user" and "INPUT: " in text:
            return json.loads(text.split("INPUT: ", 1)[1].strip())
    return {}

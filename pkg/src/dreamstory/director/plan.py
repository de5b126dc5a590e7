"""StoryPlan data model, invariant checks and plan.json I/O."""

from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import PlanIntegrityError
from ..schemas import PLAN_SCHEMA, canonical_json, read_json, validate_document, write_json_atomic

_PUNCT = re.compile(r"[^\w\s-]")


def word_count(text: str) -> int:
    return len(text.split())


def mentions(text: str, name: str) -> bool:
    """Case-sensitive whole-word occurrence of ``name`` in ``text``."""
    if not name:
        return False
    return re.search(r"(?<!\w)" + re.escape(name) + r"(?!\w)", text) is not None


def jaccard(a: str, b: str) -> float:
    wa = set(re.findall(r"\w+", a.lower()))
    wb = set(re.findall(r"\w+", b.lower()))
    if not wa and not wb:
        return 1.0
    return len(wa & wb) / len(wa | wb)


@dataclass
class SubjectSpec:
    name: str
    portrait_prompt: str
    short_descriptor: str
    type_token: str
    style_tags: list[str] = field(default_factory=list)

    def problems(self) -> list[str]:
        out = []
        if not self.name.strip():
            out.append("subject name is empty")
        if not self.portrait_prompt.strip():
            out.append(f"subject {self.name!r}: empty portrait_prompt")
        if not self.type_token.strip() or _PUNCT.search(self.type_token):
            out.append(f"subject {self.name!r}: type_token {self.type_token!r} must be a bare noun phrase")
        if not self.short_descriptor.strip():
            out.append(f"subject {self.name!r}: empty short_descriptor")
        elif mentions(self.short_descriptor, self.name):
            out.append(f"subject {self.name!r}: short_descriptor repeats the name")
        return out


@dataclass
class SceneSpec:
    index: int
    raw_prompt: str
    rewritten_prompt: str = ""
    present_subjects: list[str] = field(default_factory=list)
    word_count: int = 0

    def __post_init__(self):
        if not self.word_count:
            self.word_count = word_count(self.raw_prompt)


@dataclass
class StoryPlan:
    story_text: str
    subjects: list[SubjectSpec]
    scenes: list[SceneSpec]
    director_model_id: str = ""
    n_scenes_requested: int | None = None
    creation_trace: list[tuple[str, str]] = field(default_factory=list)

    def subject(self, name: str) -> SubjectSpec:
        for s in self.subjects:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "schema": PLAN_SCHEMA,
            "story_text": self.story_text,
            "director_model_id": self.director_model_id,
            "n_scenes_requested": self.n_scenes_requested,
            "subjects": [asdict(s) for s in self.subjects],
            "scenes": [asdict(s) for s in self.scenes],
            "creation_trace": [[stage, text] for stage, text in self.creation_trace],
        }

    @classmethod
    def from_dict(cls, doc: dict, source: str = "") -> "StoryPlan":
        validate_document(doc, PLAN_SCHEMA, source)
        return cls(
            story_text=doc["story_text"],
            subjects=[SubjectSpec(**{"style_tags": [], **s}) for s in doc["subjects"]],
            scenes=[SceneSpec(**s) for s in doc["scenes"]],
            director_model_id=doc.get("director_model_id", ""),
            n_scenes_requested=doc.get("n_scenes_requested"),
            creation_trace=[(a, b) for a, b in doc["creation_trace"]],
        )

    def plan_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()


def plan_problems(plan: StoryPlan) -> list[str]:
    """Every violated plan invariant, as human-readable strings."""
    out: list[str] = []
    names = [s.name for s in plan.subjects]
    if len(set(names)) != len(names):
        out.append("duplicate subject names")
    for s in plan.subjects:
        out.extend(s.problems())
    known = set(names)
    for i, scene in enumerate(plan.scenes):
        if scene.index != i:
            out.append(f"scene at position {i} has index {scene.index}")
        if len(set(scene.present_subjects)) != len(scene.present_subjects):
            out.append(f"scene {scene.index}: duplicate present subjects")
        for name in scene.present_subjects:
            if name not in known:
                out.append(f"scene {scene.index}: unknown subject {name!r}")
            if mentions(scene.rewritten_prompt, name):
                out.append(f"scene {scene.index}: rewritten prompt still names {name!r}")
        if not scene.present_subjects and scene.rewritten_prompt != scene.raw_prompt:
            out.append(f"scene {scene.index}: no subjects but prompt was rewritten")
    if not plan.subjects and any(sc.present_subjects for sc in plan.scenes):
        out.append("scenes reference subjects but the plan has none")
    return out


def validate_plan(plan: StoryPlan) -> StoryPlan:
    problems = plan_problems(plan)
    if problems:
        raise PlanIntegrityError(problems)
    return plan


def save_plan(plan: StoryPlan, path: str | Path) -> Path:
    return write_json_atomic(path, plan.to_dict())


def load_plan(path: str | Path) -> StoryPlan:
    return validate_plan(StoryPlan.from_dict(read_json(path), source=str(path)))

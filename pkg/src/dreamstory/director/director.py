"""The LLM story director: story text in, validated StoryPlan out.

Every stage is a small, separately validated LLM exchange. Invalid answers are
quoted back to the model and re-asked up to ``DirectorConfig.retries`` times.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

from ..backends.base import LLMClient
from ..backends.llm import RateLimitedLLM
from ..config import DirectorConfig
from ..errors import (
    InputError,
    LLMError,
    LLMFormatError,
    LLMTransportError,
    RewriteLeak,
    SceneCountMismatch,
)
from .parsing import parse_structured_response
from .plan import SceneSpec, StoryPlan, SubjectSpec, jaccard, mentions, validate_plan, word_count
from .templates import PromptTemplate, load_templates

log = logging.getLogger(__name__)

Trace = list  # list[tuple[str, str]]

_TYPE_TOKEN = re.compile(r"^[A-Za-z][A-Za-z -]*$")


class _Invalid(Exception):
    def __init__(self, reason: str, error_cls=LLMFormatError, soft: bool = False):
        super().__init__(reason)
        self.reason = reason
        self.error_cls = error_cls
        self.soft = soft


_REGISTRY_CACHE: dict[str | None, dict[str, PromptTemplate]] = {}


def templates_for(config: DirectorConfig | None) -> dict[str, PromptTemplate]:
    key = config.templates_dir if config else None
    if key not in _REGISTRY_CACHE:
        _REGISTRY_CACHE[key] = load_templates(key)
    return _REGISTRY_CACHE[key]


def _ask(
    llm: LLMClient,
    tpl: PromptTemplate,
    payload: dict,
    *,
    label: str,
    trace: Trace,
    retries: int,
    check: Callable[[dict], None] | None = None,
    extra: dict | None = None,
):
    messages = tpl.render(payload, **(extra or {}))
    text = ""
    failure: _Invalid | None = None
    value = None
    for attempt in range(retries + 1):
        try:
            text = llm.complete(messages)
        except LLMError as exc:
            exc.stage = exc.stage or label
            raise
        except Exception as exc:
            raise LLMTransportError(f"LLM client failed: {exc}", stage=label) from exc
        trace.append((label, text))
        try:
            value = parse_structured_response(text, tpl.schema)
            if check is not None:
                check(value)
            return value
        except LLMFormatError as exc:
            failure = _Invalid(str(exc))
            value = None
        except _Invalid as exc:
            failure = exc
        log.debug("stage %s attempt %d rejected: %s", label, attempt + 1, failure.reason)
        messages = list(messages) + [
            ("assistant", text),
            ("user", f"Your previous answer was invalid: {failure.reason}\n"
                     "Answer again, with JSON only, following the instructions."),
        ]
    if failure.soft and value is not None:
        trace.append((f"flag:{label}", failure.reason))
        return value
    raise failure.error_cls(
        f"gave up after {retries + 1} attempts: {failure.reason}", stage=label, text=text
    )


# --- subjects -------------------------------------------------------------


def extract_subjects(
    story_text: str,
    llm: LLMClient,
    max_subjects: int = 6,
    *,
    config: DirectorConfig | None = None,
    trace: Trace | None = None,
) -> list[SubjectSpec]:
    if not story_text or not story_text.strip():
        raise InputError("story text is empty")
    if max_subjects < 1:
        raise InputError("max_subjects must be >= 1")
    config = config or DirectorConfig(max_subjects=max_subjects)
    trace = trace if trace is not None else []
    tpls = templates_for(config)

    def check_names(value):
        names = [s["name"].strip() for s in value["subjects"]]
        if not names and not value.get("no_characters"):
            raise _Invalid("the subject list is empty; list the characters or set no_characters")
        if len(set(names)) != len(names):
            raise _Invalid("subject names must be unique")
        if len(names) > max_subjects:
            raise _Invalid(f"at most {max_subjects} subjects allowed, got {len(names)}")

    value = _ask(
        llm, tpls["subjects"], {"story": story_text, "max_subjects": max_subjects},
        label="subjects", trace=trace, retries=config.retries, check=check_names,
    )
    names = [s["name"].strip() for s in value["subjects"]]
    subjects = []
    for name in names:
        portrait = _ask(
            llm, tpls["subject_portrait"], {"story": story_text, "name": name},
            label=f"subject_portrait[{name}]", trace=trace, retries=config.retries,
        )
        prompt = portrait["portrait_prompt"].strip()

        def check_descriptor(v, name=name):
            desc, token = v["short_descriptor"].strip(), v["type_token"].strip()
            if mentions(desc, name):
                raise _Invalid(f"short_descriptor must not contain the name {name!r}")
            if word_count(desc) > config.descriptor_max_words:
                raise _Invalid(f"short_descriptor must have at most {config.descriptor_max_words} words")
            if not _TYPE_TOKEN.match(token) or word_count(token) > 3:
                raise _Invalid("type_token must be a single category noun without punctuation")

        desc = _ask(
            llm, tpls["subject_descriptor"], {"name": name, "portrait_prompt": prompt},
            label=f"subject_descriptor[{name}]", trace=trace, retries=config.retries,
            check=check_descriptor, extra={"max_words": config.descriptor_max_words},
        )
        subjects.append(SubjectSpec(
            name=name,
            portrait_prompt=prompt,
            short_descriptor=desc["short_descriptor"].strip(),
            type_token=desc["type_token"].strip(),
            style_tags=[t for t in portrait.get("style_tags", []) if t],
        ))
    return subjects


# --- scenes ---------------------------------------------------------------


def shorten_prompt(prompt: str, word_limit: int, llm: LLMClient, *, label: str, trace: Trace,
                   retries: int, config: DirectorConfig | None = None) -> str:
    """Re-ask the LLM to fit ``prompt`` under ``word_limit``; flag, never truncate."""
    tpls = templates_for(config)

    def check(v):
        n = word_count(v["prompt"])
        if n > word_limit:
            raise _Invalid(f"the prompt has {n} words, the limit is {word_limit}")

    try:
        return _ask(
            llm, tpls["scene_shorten"], {"prompt": prompt, "word_limit": word_limit},
            label=label, trace=trace, retries=retries, check=check, extra={"word_limit": word_limit},
        )["prompt"].strip()
    except LLMFormatError as exc:
        trace.append((f"flag:word_limit:{label}", f"{word_count(prompt)} words > {word_limit}: {exc}"))
        return prompt


def generate_scenes(
    story_text: str,
    subjects: Sequence[SubjectSpec],
    n_scenes: int | None,
    llm: LLMClient,
    *,
    config: DirectorConfig | None = None,
    trace: Trace | None = None,
) -> list[SceneSpec]:
    config = config or DirectorConfig()
    trace = trace if trace is not None else []
    tpls = templates_for(config)
    if n_scenes is not None:
        instruction = f"Write exactly {n_scenes} scenes."
    else:
        instruction = f"Choose the number of scenes the story needs, at most {config.max_scenes}."

    def check(v):
        got = len(v["scenes"])
        if n_scenes is not None and got != n_scenes:
            raise _Invalid(f"expected exactly {n_scenes} scenes, got {got}", SceneCountMismatch)
        if n_scenes is None and got > config.max_scenes:
            raise _Invalid(f"at most {config.max_scenes} scenes allowed, got {got}", SceneCountMismatch)

    value = _ask(
        llm, tpls["scenes"],
        {"story": story_text, "subjects": [s.name for s in subjects], "n_scenes": n_scenes},
        label="scenes", trace=trace, retries=config.retries, check=check,
        extra={"word_limit": config.word_limit, "count_instruction": instruction},
    )
    scenes = []
    for i, raw in enumerate(value["scenes"]):
        raw = raw.strip()
        if word_count(raw) > config.word_limit:
            raw = shorten_prompt(raw, config.word_limit, llm, label=f"scene_shorten[scene={i}]",
                                 trace=trace, retries=config.retries, config=config)
        scenes.append(SceneSpec(index=i, raw_prompt=raw, word_count=word_count(raw)))
    return scenes


def annotate_presence(
    scene: SceneSpec,
    subjects: Sequence[SubjectSpec],
    llm: LLMClient,
    *,
    config: DirectorConfig | None = None,
    trace: Trace | None = None,
) -> list[str]:
    """Ask once per subject whether it is visible in the scene."""
    config = config or DirectorConfig()
    trace = trace if trace is not None else []
    tpl = templates_for(config)["presence"]
    present = []
    for subject in subjects:
        value = _ask(
            llm, tpl,
            {"name": subject.name, "portrait_prompt": subject.portrait_prompt, "scene": scene.raw_prompt},
            label=f"presence[scene={scene.index},subject={subject.name}]",
            trace=trace, retries=config.retries,
        )
        if value["present"]:
            present.append(subject.name)
    return present


def _strip_terms(text: str, terms: Sequence[str]) -> str:
    for term in terms:
        text = re.sub(r"(?<!\w)" + re.escape(term) + r"(?!\w)", " ", text)
    return text


def rewrite_scene(
    scene: SceneSpec,
    subjects: Sequence[SubjectSpec],
    llm: LLMClient,
    *,
    config: DirectorConfig | None = None,
    trace: Trace | None = None,
) -> str:
    """Replace present subjects' names with their short descriptors."""
    config = config or DirectorConfig()
    trace = trace if trace is not None else []
    by_name = {s.name: s for s in subjects}
    present = [by_name[n] for n in scene.present_subjects if n in by_name]
    if not present:
        return scene.raw_prompt
    missing = [s.name for s in present if not s.short_descriptor]
    if missing:
        raise InputError(f"subjects without short_descriptor: {missing}")
    names = [s.name for s in present]
    descriptors = [s.short_descriptor for s in present]
    core_raw = _strip_terms(scene.raw_prompt, names)

    def check(v):
        text = v["prompt"]
        leaked = [n for n in names if mentions(text, n)]
        if leaked:
            raise _Invalid(f"the rewritten prompt still contains the names {leaked}", RewriteLeak)
        absent = [d for d in descriptors if d.lower() not in text.lower()]
        if absent:
            raise _Invalid(f"the rewritten prompt must contain the descriptors {absent}")
        overlap = jaccard(core_raw, _strip_terms(text, descriptors))
        if overlap < config.jaccard_floor:
            raise _Invalid(
                f"the rewrite drifted from the original scene (word overlap {overlap:.2f} < {config.jaccard_floor})",
                soft=True,
            )

    value = _ask(
        llm, templates_for(config)["rewrite"],
        {"scene": scene.raw_prompt,
         "subjects": [{"name": s.name, "short_descriptor": s.short_descriptor} for s in present]},
        label=f"rewrite[scene={scene.index}]", trace=trace, retries=config.retries, check=check,
    )
    return value["prompt"].strip()


# --- whole plan -------------------------------------------------------------


def _annotate_and_rewrite(scene, subjects, llm, config):
    trace: Trace = []
    scene.present_subjects = annotate_presence(scene, subjects, llm, config=config, trace=trace)
    scene.rewritten_prompt = rewrite_scene(scene, subjects, llm, config=config, trace=trace)
    return trace


def build_story_plan(story_text: str, config: DirectorConfig | None, llm: LLMClient) -> StoryPlan:
    if not story_text or not story_text.strip():
        raise InputError("story text is empty")
    config = config or DirectorConfig()
    if config.requests_per_minute:
        llm = RateLimitedLLM(llm, config.requests_per_minute)
    trace: Trace = []
    stage = "subjects"
    try:
        subjects = extract_subjects(story_text, llm, config.max_subjects, config=config, trace=trace)
        stage = "scenes"
        scenes = generate_scenes(story_text, subjects, config.n_scenes, llm, config=config, trace=trace)
        stage = "annotate"
        if config.workers > 1 and len(scenes) > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                traces = list(pool.map(lambda sc: _annotate_and_rewrite(sc, subjects, llm, config), scenes))
        else:
            traces = [_annotate_and_rewrite(sc, subjects, llm, config) for sc in scenes]
        for t in traces:
            trace.extend(t)
    except LLMError as exc:
        exc.stage = exc.stage or stage
        raise
    plan = StoryPlan(
        story_text=story_text,
        subjects=subjects,
        scenes=scenes,
        director_model_id=getattr(llm, "model_id", ""),
        n_scenes_requested=config.n_scenes,
        creation_trace=trace,
    )
    return validate_plan(plan)

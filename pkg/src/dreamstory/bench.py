"""Synthetic multi-subject benchmarks: subject pools, k-subject scene cases,
bench.json import/export, conversion to renderable plans and presence-annotation
evaluation.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .attention import derive_seed
from .backends.base import LLMClient
from .config import DirectorConfig
from .director.director import _ask, _Invalid, annotate_presence, templates_for
from .director.plan import SceneSpec, StoryPlan, SubjectSpec, mentions, word_count
from .errors import InputError, LLMFormatError, PoolExhausted, SchemaError
from .metrics import AccuracyTable, annotation_accuracy
from .schemas import BENCH_SCHEMA, read_json, validate_document, write_json_atomic

log = logging.getLogger(__name__)

REVIEW_STATUSES = ("auto", "approved", "rejected")
DEFAULT_GROUPS = {0: 100, 1: 100, 2: 100, 3: 100}


@dataclass
class BenchmarkCase:
    case_id: str
    k_subjects: int
    subjects: list[SubjectSpec]
    scene_prompt: str
    word_count: int = 0
    review_status: str = "auto"

    def __post_init__(self):
        if not self.word_count:
            self.word_count = word_count(self.scene_prompt)

    @property
    def subject_names(self) -> list[str]:
        return [s.name for s in self.subjects]

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "k_subjects": self.k_subjects,
            "subjects": self.subject_names,
            "scene_prompt": self.scene_prompt,
            "word_count": self.word_count,
            "review_status": self.review_status,
        }


@dataclass
class BenchmarkManifest:
    cases: list[BenchmarkCase]
    pool: list[SubjectSpec]
    generator_model_id: str = ""
    word_limit: int = 40
    seed: int = 0
    group_sizes: dict[int, int] = field(default_factory=dict)

    def groups(self) -> dict[int, list[BenchmarkCase]]:
        out: dict[int, list[BenchmarkCase]] = {}
        for c in self.cases:
            out.setdefault(c.k_subjects, []).append(c)
        return out

    def active_cases(self) -> list[BenchmarkCase]:
        """Cases not marked rejected by review."""
        return [c for c in self.cases if c.review_status != "rejected"]

    def to_dict(self) -> dict:
        return {
            "schema": BENCH_SCHEMA,
            "generator_model_id": self.generator_model_id,
            "word_limit": self.word_limit,
            "seed": self.seed,
            "pool": [asdict(s) for s in self.pool],
            "group_sizes": {str(k): v for k, v in sorted(self.group_sizes.items())},
            "cases": [c.to_dict() for c in self.cases],
        }


# --- invariants -----------------------------------------------------------------


def mentioned_pool_names(text: str, pool: Sequence[SubjectSpec]) -> list[str]:
    return [s.name for s in pool if mentions(text, s.name)]


def case_problems(case: BenchmarkCase, pool: Sequence[SubjectSpec], word_limit: int) -> list[tuple[str, str]]:
    """(field, message) for every violated case invariant."""
    out = []
    if case.k_subjects not in (0, 1, 2, 3):
        out.append(("k_subjects", f"k_subjects must be 0..3, got {case.k_subjects}"))
    names = case.subject_names
    if len(names) != case.k_subjects:
        out.append(("subjects", f"{len(names)} subjects listed for k_subjects={case.k_subjects}"))
    if len(set(names)) != len(names):
        out.append(("subjects", "a subject is repeated"))
    if case.word_count != word_count(case.scene_prompt):
        out.append(("word_count", f"word_count {case.word_count} but the prompt has {word_count(case.scene_prompt)} words"))
    if word_count(case.scene_prompt) > word_limit:
        out.append(("scene_prompt", f"{word_count(case.scene_prompt)} words exceeds the limit of {word_limit}"))
    intruders = [n for n in mentioned_pool_names(case.scene_prompt, pool) if n not in names]
    if intruders:
        out.append(("scene_prompt", f"mentions pool subjects outside the case: {intruders}"))
    for s in case.subjects:
        if not (mentions(case.scene_prompt, s.name) or s.short_descriptor.lower() in case.scene_prompt.lower()):
            out.append(("scene_prompt", f"does not mention {s.name!r}"))
    if case.review_status not in REVIEW_STATUSES:
        out.append(("review_status", f"unknown review status {case.review_status!r}"))
    return out


# --- generation -------------------------------------------------------------------


def gen_subject_pool(llm: LLMClient, n: int, *, config: DirectorConfig | None = None,
                     trace: list | None = None) -> list[SubjectSpec]:
    """Ask for subjects until ``n`` unique ones are collected.

    Duplicates (same name, case-insensitive, or same portrait prompt) and
    malformed subjects are dropped and asked for again. After
    ``config.retries + 1`` consecutive rounds without a new subject the pool
    is declared exhausted.
    """
    if n < 1:
        raise InputError(f"pool size must be >= 1, got {n}")
    config = config or DirectorConfig()
    trace = trace if trace is not None else []
    tpl = templates_for(config)["pool"]
    pool: list[SubjectSpec] = []
    names: set[str] = set()
    portraits: set[str] = set()
    stalled = 0
    round_ = 0
    while len(pool) < n:
        value = _ask(llm, tpl, {"n": n - len(pool), "avoid": sorted(s.name for s in pool)},
                     label=f"pool[round={round_}]", trace=trace, retries=config.retries)
        round_ += 1
        added = 0
        for raw in value["subjects"]:
            s = SubjectSpec(raw["name"].strip(), raw["portrait_prompt"].strip(), raw["short_descriptor"].strip(),
                            raw["type_token"].strip(), list(raw.get("style_tags", [])))
            problems = s.problems()
            if s.name.lower() in names or s.portrait_prompt.lower() in portraits:
                problems.append("duplicate")
            if problems:
                log.info("pool: dropped %r (%s)", s.name, "; ".join(problems))
                trace.append((f"flag:pool:{s.name}", "; ".join(problems)))
                continue
            pool.append(s)
            names.add(s.name.lower())
            portraits.add(s.portrait_prompt.lower())
            added += 1
            if len(pool) == n:
                break
        stalled = 0 if added else stalled + 1
        if stalled > config.retries:
            raise PoolExhausted(f"no new subjects after {stalled} rounds; collected {len(pool)} of {n}")
    return pool


def gen_cases(pool: Sequence[SubjectSpec], k_subjects: int, n_cases: int, word_limit: int, llm: LLMClient, *,
              seed: int = 0, config: DirectorConfig | None = None, trace: list | None = None,
              max_regenerations: int = 3) -> list[BenchmarkCase]:
    """``n_cases`` scene cases featuring exactly ``k_subjects`` distinct pool subjects.

    Subjects are sampled uniformly with a generator seeded by (seed, k). An
    over-long or non-exclusive answer is re-asked; if the re-asks fail the
    case is rejected and regenerated with a fresh sample.
    """
    if k_subjects not in (0, 1, 2, 3):
        raise InputError(f"k_subjects must be 0..3, got {k_subjects}")
    if len(pool) < k_subjects:
        raise InputError(f"pool has {len(pool)} subjects, need {k_subjects}")
    config = config or DirectorConfig()
    trace = trace if trace is not None else []
    tpl = templates_for(config)["case"]
    rng = random.Random(derive_seed(seed, "cases", k_subjects))
    cases = []
    for i in range(n_cases):
        case_id = f"k{k_subjects}-{i:03d}"
        for attempt in range(max_regenerations + 1):
            chosen = rng.sample(list(pool), k_subjects)

            def check(v, chosen=chosen):
                probe = BenchmarkCase(case_id, k_subjects, chosen, v["prompt"].strip())
                problems = case_problems(probe, pool, word_limit)
                if problems:
                    raise _Invalid("; ".join(msg for _, msg in problems))

            payload = {"case_id": case_id, "word_limit": word_limit,
                       "subjects": [{"name": s.name, "short_descriptor": s.short_descriptor} for s in chosen]}
            try:
                value = _ask(llm, tpl, payload, label=f"case[{case_id}]", trace=trace,
                             retries=config.retries, check=check, extra={"word_limit": word_limit})
            except LLMFormatError as exc:
                log.warning("case %s rejected (attempt %d): %s", case_id, attempt + 1, exc)
                trace.append((f"flag:rejected:{case_id}", str(exc)))
                if attempt == max_regenerations:
                    raise
                continue
            cases.append(BenchmarkCase(case_id, k_subjects, chosen, value["prompt"].strip()))
            break
    return cases


def build_benchmark(llm: LLMClient, group_sizes: Mapping[int, int] | None = None, *, pool_size: int = 20,
                    word_limit: int = 40, seed: int = 0, config: DirectorConfig | None = None) -> BenchmarkManifest:
    groups = dict(DEFAULT_GROUPS if group_sizes is None else group_sizes)
    need = max([k for k, n in groups.items() if n] or [0])
    if pool_size < need:
        raise InputError(f"pool_size {pool_size} is smaller than the largest group k={need}")
    pool = gen_subject_pool(llm, pool_size, config=config)
    cases = []
    for k in sorted(groups):
        cases.extend(gen_cases(pool, k, groups[k], word_limit, llm, seed=seed, config=config))
    return BenchmarkManifest(cases, pool, getattr(llm, "model_id", ""), word_limit, seed, groups)


# --- files ------------------------------------------------------------------------


def manifest_from_dict(doc: dict, source: str = "") -> BenchmarkManifest:
    """Parse and check a bench document; raise SchemaError naming the offending location."""
    validate_document(doc, BENCH_SCHEMA, source)
    pool = [SubjectSpec(**{"style_tags": [], **s}) for s in doc["pool"]]
    by_name = {s.name: s for s in pool}
    where = f"{source}:" if source else ""
    if len(by_name) != len(pool):
        raise SchemaError("duplicate pool subject names", location=f"{where}$.pool")
    for i, s in enumerate(pool):
        if s.problems():
            raise SchemaError("; ".join(s.problems()), location=f"{where}$.pool[{i}]")
    word_limit = doc["word_limit"]
    cases = []
    seen = set()
    for i, c in enumerate(doc["cases"]):
        loc = f"$.cases[{i}]"
        if c["case_id"] in seen:
            raise SchemaError(f"duplicate case_id {c['case_id']!r}", location=f"{where}{loc}.case_id")
        seen.add(c["case_id"])
        unknown = [n for n in c["subjects"] if n not in by_name]
        if unknown:
            raise SchemaError(f"subjects not in the pool: {unknown}", location=f"{where}{loc}.subjects")
        case = BenchmarkCase(c["case_id"], c["k_subjects"], [by_name[n] for n in c["subjects"]],
                             c["scene_prompt"], c["word_count"], c["review_status"])
        problems = case_problems(case, pool, word_limit)
        if problems:
            field_, msg = problems[0]
            raise SchemaError(f"case {case.case_id}: {msg}", location=f"{where}{loc}.{field_}")
        cases.append(case)
    group_sizes = {int(k): v for k, v in doc["group_sizes"].items()}
    counts = {k: 0 for k in group_sizes}
    for c in cases:
        counts[c.k_subjects] = counts.get(c.k_subjects, 0) + 1
    if counts != group_sizes:
        raise SchemaError(f"group sizes {group_sizes} do not match the cases {counts}", location=f"{where}$.group_sizes")
    return BenchmarkManifest(cases, pool, doc["generator_model_id"], word_limit, doc.get("seed", 0), group_sizes)


def export_manifest(manifest: BenchmarkManifest, path: str | Path) -> Path:
    doc = manifest.to_dict()
    manifest_from_dict(doc, str(path))
    return write_json_atomic(path, doc)


def import_manifest(path: str | Path) -> BenchmarkManifest:
    return manifest_from_dict(read_json(path), str(path))


# --- rendering and annotation -------------------------------------------------------


def substitute_names(text: str, subjects: Sequence[SubjectSpec]) -> str:
    """Replace every whole-word subject name by its short descriptor."""
    for s in sorted(subjects, key=lambda s: -len(s.name)):
        text = re.sub(r"(?<!\w)" + re.escape(s.name) + r"(?!\w)", s.short_descriptor, text)
    return text


def bench_plan(manifest: BenchmarkManifest, include_rejected: bool = False) -> tuple[StoryPlan, dict[int, str]]:
    """A renderable plan with one scene per case; names are swapped for descriptors lexically."""
    cases = manifest.cases if include_rejected else manifest.active_cases()
    used = {n for c in cases for n in c.subject_names}
    subjects = [s for s in manifest.pool if s.name in used]
    scenes = []
    case_ids = {}
    for i, c in enumerate(cases):
        scenes.append(SceneSpec(i, c.scene_prompt, substitute_names(c.scene_prompt, c.subjects), c.subject_names))
        case_ids[i] = c.case_id
    plan = StoryPlan(
        story_text=f"benchmark with {len(cases)} cases",
        subjects=subjects,
        scenes=scenes,
        director_model_id=manifest.generator_model_id,
        n_scenes_requested=len(cases),
    )
    return plan, case_ids


def annotation_ground_truth(manifest: BenchmarkManifest, distractors: int = 1, seed: int = 0,
                            include_rejected: bool = False) -> tuple[dict[tuple[str, str], bool], dict[str, int]]:
    """(case_id, subject) -> presence for every case subject plus ``distractors`` absent pool subjects."""
    truth: dict[tuple[str, str], bool] = {}
    k_of = {}
    cases = manifest.cases if include_rejected else manifest.active_cases()
    for c in cases:
        rng = random.Random(derive_seed(seed, "distractors", c.case_id))
        others = [s for s in manifest.pool if s.name not in c.subject_names]
        for s in c.subjects:
            truth[(c.case_id, s.name)] = True
        for s in rng.sample(others, min(distractors, len(others))):
            truth[(c.case_id, s.name)] = False
        k_of[c.case_id] = c.k_subjects
    return truth, k_of


def evaluate_annotation(manifest: BenchmarkManifest, llm: LLMClient, *, distractors: int = 1, seed: int = 0,
                        config: DirectorConfig | None = None) -> AccuracyTable:
    """Run the director's presence annotation on every active case and score it."""
    truth, k_of = annotation_ground_truth(manifest, distractors, seed)
    by_name = {s.name: s for s in manifest.pool}
    predictions = {}
    by_case: dict[str, list[str]] = {}
    for case_id, name in truth:
        by_case.setdefault(case_id, []).append(name)
    prompts = {c.case_id: c.scene_prompt for c in manifest.cases}
    for i, (case_id, names) in enumerate(by_case.items()):
        scene = SceneSpec(i, prompts[case_id])
        present = set(annotate_presence(scene, [by_name[n] for n in names], llm, config=config))
        for n in names:
            predictions[(case_id, n)] = n in present
    return annotation_accuracy(predictions, truth, k_of)

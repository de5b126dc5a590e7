"""Story rendering: anchors, rehearsal renders, masked joint renders, run directories.

Output layout for a run::

    <out>/<run_id>/manifest.json
    <out>/<run_id>/plan.json
    <out>/<run_id>/anchors/<subject>.png
    <out>/<run_id>/rehearsal/<index>.png
    <out>/<run_id>/scenes/<index>.png
    <out>/<run_id>/masks/<index>/<subject>.png
    <out>/<run_id>/timings.jsonl
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .attention import derive_seed
from .backends.base import AttnKind, DenoiserBackend, LayerId, Segmenter, TokenEmbeddings
from .config import RenderConfig
from .director.plan import SceneSpec, StoryPlan, SubjectSpec, plan_problems, save_plan
from .errors import DreamStoryError, PlanIntegrityError, TimestepMisalignment
from .masks import MaskSet, PixelMask, save_mask_png, segment_subjects, with_layer_masks
from .processors import RenderContext, select_layers
from .schemas import RUN_SCHEMA, canonical_json, read_json, validate_document, write_json_atomic

log = logging.getLogger(__name__)

EMPTY_ANCHOR_MASK = "EmptyAnchorMask"
MSD_SKIPPED = "MSDSkipped"


# --- seeds and prompts ----------------------------------------------------------


def anchor_seed(global_seed: int, subject_name: str) -> int:
    return derive_seed(global_seed, "anchor", subject_name) % (2**31)


def scene_seed(global_seed: int, index: int) -> int:
    return derive_seed(global_seed, "scene", index) % (2**31)


def _with_style(prompt: str, *styles: str) -> str:
    parts = [prompt.strip()] + [s.strip() for s in styles if s and s.strip()]
    return ", ".join(parts)


def portrait_prompt(subject: SubjectSpec, config: RenderConfig) -> str:
    return _with_style(subject.portrait_prompt, *subject.style_tags, config.style_suffix)


def scene_prompt(scene: SceneSpec, config: RenderConfig) -> str:
    base = scene.rewritten_prompt if config.rewrite and scene.rewritten_prompt else scene.raw_prompt
    return _with_style(base, config.style_suffix)


def safe_name(name: str) -> str:
    return re.sub(r"[^\w-]+", "_", name).strip("_") or "subject"


# --- data -------------------------------------------------------------------------


@dataclass
class MultimodalAnchor:
    subject: SubjectSpec
    portrait_image: np.ndarray
    portrait_seed: int
    prompt: str
    text_embedding: TokenEmbeddings
    pixel_mask: PixelMask
    layer_masks: dict[LayerId, np.ndarray]
    steps: int
    guidance_scale: float
    flags: list[str] = field(default_factory=list)


@dataclass
class SceneRender:
    scene: SceneSpec
    prompt: str
    rehearsal_image: np.ndarray
    final_image: np.ndarray | None
    target_masks: MaskSet
    seed: int
    flags: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    activation: dict[str, list[str]] = field(default_factory=dict)


@dataclass
class StoryResult:
    run_dir: Path
    manifest: dict
    anchors: dict[str, MultimodalAnchor]
    renders: dict[int, SceneRender]


# --- single renders ---------------------------------------------------------------


def _vanilla(backend: DenoiserBackend, prompt: str, seed: int, config: RenderConfig):
    emb = backend.encode_text(prompt)
    lat = backend.init_latents(seed, config.height, config.width)
    out = backend.run_steps(lat[None], [emb], config.steps, config.guidance_scale, None)
    return emb, backend.decode(out[0], config.height, config.width)


def _layer_vectors(masks: MaskSet, name: str, catalog) -> dict[LayerId, np.ndarray]:
    return {layer: masks.layer_masks[(name, layer)].values.astype(np.uint8) for layer in catalog}


def generate_anchor(subject: SubjectSpec, seed: int, backend: DenoiserBackend, segmenter: Segmenter,
                    config: RenderConfig) -> MultimodalAnchor:
    """Render the subject's portrait and segment the subject inside it."""
    if not subject.portrait_prompt.strip():
        raise PlanIntegrityError([f"subject {subject.name!r} has an empty portrait prompt"])
    prompt = portrait_prompt(subject, config)
    emb, image = _vanilla(backend, prompt, seed, config)
    catalog = backend.layer_catalog()
    masks = with_layer_masks(segment_subjects(image, [subject], segmenter), catalog, backend.layer_grid)
    pm = masks.pixel_masks[subject.name]
    flags = [f"{EMPTY_ANCHOR_MASK}:{subject.name}"] if pm.empty else []
    return MultimodalAnchor(
        subject=subject, portrait_image=image, portrait_seed=seed, prompt=prompt, text_embedding=emb,
        pixel_mask=pm, layer_masks=_layer_vectors(masks, subject.name, catalog),
        steps=config.steps, guidance_scale=config.guidance_scale, flags=flags,
    )


def rehearsal_render(scene: SceneSpec, seed: int, backend: DenoiserBackend, segmenter: Segmenter,
                     subjects: Sequence[SubjectSpec], config: RenderConfig) -> tuple[np.ndarray, MaskSet]:
    """Vanilla render of the scene plus target masks for its present subjects."""
    _, image = _vanilla(backend, scene_prompt(scene, config), seed, config)
    by_name = {s.name: s for s in subjects}
    present = [by_name[n] for n in scene.present_subjects]
    if not present:
        return image, MaskSet()
    masks = segment_subjects(image, present, segmenter)
    return image, with_layer_masks(masks, backend.layer_catalog(), backend.layer_grid)


def render_scene_msd(scene: SceneSpec, anchors: Sequence[MultimodalAnchor], target_masks: MaskSet, seed: int,
                     backend: DenoiserBackend, config: RenderConfig,
                     rehearsal_image: np.ndarray | None = None) -> SceneRender:
    """Jointly denoise the anchors' portrait trajectories and the scene with MSD processors."""
    t0 = time.perf_counter()
    prompt = scene_prompt(scene, config)
    by_name = {a.subject.name: a for a in anchors}
    missing = [n for n in scene.present_subjects if n not in by_name]
    if missing:
        raise PlanIntegrityError([f"scene {scene.index}: no anchor for {missing}"])
    refs = [by_name[n] for n in scene.present_subjects]
    flags = list(target_masks.flags)
    render = SceneRender(scene, prompt, rehearsal_image, None, target_masks, seed, flags)
    if not refs:
        if rehearsal_image is None:
            _, rehearsal_image = _vanilla(backend, prompt, seed, config)
            render.rehearsal_image = rehearsal_image
        render.final_image = rehearsal_image
        render.flags.append(f"{MSD_SKIPPED}:no-subjects")
        render.timings["msd"] = time.perf_counter() - t0
        return render
    for a in refs:
        if a.steps != config.steps or a.guidance_scale != config.guidance_scale:
            raise TimestepMisalignment(
                f"anchor {a.subject.name!r} was rendered with {a.steps} steps / guidance {a.guidance_scale}, "
                f"scene uses {config.steps} / {config.guidance_scale}"
            )
    catalog = backend.layer_catalog()
    emb = backend.encode_text(prompt)
    latents = np.stack(
        [backend.init_latents(a.portrait_seed, config.height, config.width) for a in refs]
        + [backend.init_latents(seed, config.height, config.width)]
    )
    ctx = RenderContext(
        subjects=[a.subject.name for a in refs],
        target_masks=[_layer_vectors(target_masks, a.subject.name, catalog) for a in refs],
        ref_masks=[a.layer_masks for a in refs],
        config=config,
        catalog=catalog,
        seed=derive_seed(config.seed, "dropout", seed),
        target_tokens=[
            backend.token_indices(prompt, a.subject.short_descriptor) or backend.token_indices(prompt, a.subject.type_token)
            for a in refs
        ],
        ref_tokens=[backend.token_indices(a.prompt, a.subject.type_token) or list(range(1, a.text_embedding.token_count)) for a in refs],
    )
    out = backend.run_steps(latents, [a.text_embedding for a in refs] + [emb], config.steps,
                            config.guidance_scale, ctx.registry())
    render.final_image = backend.decode(out[-1], config.height, config.width)
    render.flags.extend(ctx.flags)
    render.activation = ctx.activation()
    render.timings["msd"] = time.perf_counter() - t0
    return render


# --- whole story --------------------------------------------------------------------


def configured_activation(catalog: Sequence[LayerId], config: RenderConfig) -> dict[str, list[str]]:
    mmsa = set(select_layers(catalog, AttnKind.self, config.mmsa_layers)) if config.mmsa_enabled else set()
    mmca = set(select_layers(catalog, AttnKind.cross, config.mmca_layers)) if config.mmca_enabled else set()
    return {
        l.key: [k for k, s in (("mmsa", mmsa), ("mmca", mmca)) if l in s]
        for l in sorted(mmsa | mmca)
    }


# scheduling knobs that never change pixels
_NON_OUTPUT = ("workers", "fail_fast")


def _output_config(config: dict) -> dict:
    return {k: v for k, v in config.items() if k not in _NON_OUTPUT}


def default_run_id(plan: StoryPlan, config: RenderConfig, backend_name: str) -> str:
    doc = {"plan": plan.plan_hash(), "config": _output_config(config.to_dict()), "backend": backend_name}
    return "run-" + hashlib.sha256(canonical_json(doc).encode()).hexdigest()[:12]


def _save_png(image: np.ndarray, path: Path) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path, format="PNG")
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_image(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


class _Manifest:
    def __init__(self, path: Path, doc: dict):
        self.path = path
        self.doc = doc
        self._lock = threading.Lock()

    def set_scene(self, record: dict) -> None:
        with self._lock:
            scenes = {s["index"]: s for s in self.doc["scenes"]}
            scenes[record["index"]] = record
            self.doc["scenes"] = [scenes[k] for k in sorted(scenes)]
            write_json_atomic(self.path, self.doc)

    def flush(self) -> None:
        with self._lock:
            write_json_atomic(self.path, self.doc)


def _completed(doc: dict, run_dir: Path) -> dict[int, dict]:
    done = {}
    for rec in doc.get("scenes", []):
        if rec.get("status") != "ok":
            continue
        img = run_dir / rec.get("image", "")
        if img.is_file() and hashlib.sha256(img.read_bytes()).hexdigest() == rec.get("image_sha256"):
            done[rec["index"]] = rec
    return done


def run_story(
    plan: StoryPlan,
    config: RenderConfig,
    denoiser: DenoiserBackend,
    segmenter: Segmenter,
    out_dir: str | Path,
    run_id: str | None = None,
    anchors: dict[str, MultimodalAnchor] | None = None,
    resume: bool = True,
    on_scene_done: Callable[[int], None] | None = None,
) -> StoryResult:
    """Render every scene of ``plan`` into ``out_dir/run_id``.

    The manifest is rewritten after each scene, so an interrupted run resumes
    by re-rendering only scenes without a verified image.
    """
    problems = plan_problems(plan)
    if anchors is not None:
        for scene in plan.scenes:
            problems += [f"scene {scene.index}: no anchor for {n!r}" for n in scene.present_subjects if n not in anchors]
    if problems:
        raise PlanIntegrityError(problems)

    backend_name = getattr(denoiser, "name", type(denoiser).__name__)
    run_id = run_id or default_run_id(plan, config, backend_name)
    run_dir = Path(out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    save_plan(plan, run_dir / "plan.json")
    manifest_path = run_dir / "manifest.json"

    previous = {}
    if resume and manifest_path.is_file():
        old = read_json(manifest_path)
        same_config = _output_config(old.get("config", {})) == _output_config(config.to_dict())
        if old.get("plan_hash") == plan.plan_hash() and same_config:
            previous = _completed(old, run_dir)

    catalog = denoiser.layer_catalog()
    if anchors is None:
        anchors = {
            s.name: generate_anchor(s, anchor_seed(config.seed, s.name), denoiser, segmenter, config)
            for s in plan.subjects
        }
    anchor_records = {}
    for name, a in sorted(anchors.items()):
        rel = f"anchors/{safe_name(name)}.png"
        _save_png(a.portrait_image, run_dir / rel)
        save_mask_png(a.pixel_mask.values, run_dir / f"masks/anchors/{safe_name(name)}.png")
        anchor_records[name] = {"seed": a.portrait_seed, "image": rel, "flags": list(a.flags)}

    doc = {
        "schema": RUN_SCHEMA,
        "run_id": run_id,
        "backend": backend_name,
        "config": config.to_dict(),
        "plan_hash": plan.plan_hash(),
        "arm": config.arm(),
        "layers": configured_activation(catalog, config),
        "anchors": anchor_records,
        "scenes": [previous.get(sc.index) or {"index": sc.index, "status": "pending",
                                                "seed": scene_seed(config.seed, sc.index), "flags": []}
                   for sc in plan.scenes],
    }
    manifest = _Manifest(manifest_path, doc)
    manifest.flush()
    timings_lock = threading.Lock()
    renders: dict[int, SceneRender] = {}

    def do_scene(scene: SceneSpec):
        seed = scene_seed(config.seed, scene.index)
        t0 = time.perf_counter()
        try:
            rehearsal, masks = rehearsal_render(scene, seed, denoiser, segmenter, plan.subjects, config)
            t1 = time.perf_counter()
            refs = [anchors[n] for n in scene.present_subjects]
            render = render_scene_msd(scene, refs, masks, seed, denoiser, config, rehearsal_image=rehearsal)
            render.timings["rehearsal"] = t1 - t0
        except DreamStoryError as exc:
            if config.fail_fast:
                raise
            log.error("scene %d failed: %s", scene.index, exc)
            manifest.set_scene({"index": scene.index, "status": "failed", "seed": seed, "flags": [],
                                "error": f"{type(exc).__name__}: {exc}"})
            return
        base = f"{scene.index:03d}"
        rec = {
            "index": scene.index,
            "status": "ok",
            "seed": seed,
            "prompt": render.prompt,
            "present_subjects": list(scene.present_subjects),
            "flags": render.flags,
            "rehearsal": f"rehearsal/{base}.png",
            "image": f"scenes/{base}.png",
            "masks": {},
        }
        _save_png(render.rehearsal_image, run_dir / rec["rehearsal"])
        rec["image_sha256"] = _save_png(render.final_image, run_dir / rec["image"])
        for name, pm in masks.pixel_masks.items():
            rel = f"masks/{base}/{safe_name(name)}.png"
            save_mask_png(pm.values, run_dir / rel)
            rec["masks"][name] = rel
        renders[scene.index] = render
        manifest.set_scene(rec)
        with timings_lock, open(run_dir / "timings.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"index": scene.index, **render.timings}) + "\n")
        if on_scene_done is not None:
            on_scene_done(scene.index)

    todo = [sc for sc in plan.scenes if sc.index not in previous]
    if config.workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            for fut in [pool.submit(do_scene, sc) for sc in todo]:
                fut.result()
    else:
        for sc in todo:
            do_scene(sc)

    validate_document(manifest.doc, RUN_SCHEMA, str(manifest_path))
    return StoryResult(run_dir, manifest.doc, anchors, renders)

import json
from dataclasses import replace

import numpy as np
import pytest

from dreamstory.backends import MockSegmenter
from dreamstory.config import RenderConfig
from dreamstory.director import SceneSpec, StoryPlan, SubjectSpec
from dreamstory.errors import PlanIntegrityError, SegmenterFailure, TimestepMisalignment
from dreamstory.masks import MaskSet, load_mask_png
from dreamstory.pipeline import (
    anchor_seed,
    configured_activation,
    default_run_id,
    generate_anchor,
    load_image,
    portrait_prompt,
    rehearsal_render,
    render_scene_msd,
    run_story,
    safe_name,
    scene_prompt,
    scene_seed,
)
from dreamstory.schemas import validate_document

GORILLA = SubjectSpec("Kondo", "a towering silverback gorilla", "towering gorilla", "gorilla")
PILOT = SubjectSpec("Mira", "a young woman pilot", "young woman pilot", "woman")
LEFT = (0, 0, 32, 64)
RIGHT = (32, 0, 64, 64)


@pytest.fixture()
def fixed_seg():
    # gorilla always on the left half, woman on the right
    return MockSegmenter({"gorilla": [(LEFT, 0.9)], "woman": [(RIGHT, 0.8)]}, fallback="none")


def two_subject_plan():
    return StoryPlan(
        "Kondo met Mira.", [GORILLA, PILOT],
        [
            SceneSpec(0, "Kondo on the roof", "towering gorilla on the roof", ["Kondo"]),
            SceneSpec(1, "Kondo and Mira wave", "towering gorilla and young woman pilot wave", ["Kondo", "Mira"]),
            SceneSpec(2, "An empty street", "An empty street", []),
        ],
    )


# --- prompts and seeds ----------------------------------------------------------------


def test_seeds_are_stable_and_distinct():
    assert anchor_seed(0, "Kondo") == anchor_seed(0, "Kondo")
    assert anchor_seed(0, "Kondo") != anchor_seed(0, "Mira")
    assert scene_seed(3, 1) != scene_seed(3, 2)
    assert 0 <= scene_seed(0, 0) < 2**31


def test_prompts_follow_config():
    cfg = RenderConfig(style_suffix="watercolor")
    assert portrait_prompt(GORILLA, cfg) == "a towering silverback gorilla, watercolor"
    scene = SceneSpec(0, "Kondo roars", "towering gorilla roars", ["Kondo"])
    assert scene_prompt(scene, cfg) == "towering gorilla roars, watercolor"
    assert scene_prompt(scene, replace(cfg, rewrite=False)) == "Kondo roars, watercolor"
    assert safe_name("Dr. Who/2") == "Dr_Who_2"


# --- anchors --------------------------------------------------------------------------


def test_anchor_mask_is_the_segmented_rectangle(backends, fixed_seg, small_cfg):
    a = generate_anchor(GORILLA, 7, backends.denoiser, fixed_seg, small_cfg)
    expected = np.zeros((64, 64), bool)
    expected[:, :32] = True
    assert np.array_equal(a.pixel_mask.values, expected)
    assert a.flags == []
    assert set(a.layer_masks) == set(backends.denoiser.layer_catalog())
    again = generate_anchor(GORILLA, 7, backends.denoiser, fixed_seg, small_cfg)
    assert np.array_equal(a.portrait_image, again.portrait_image)


def test_anchor_without_detection_is_flagged(backends, small_cfg):
    a = generate_anchor(GORILLA, 0, backends.denoiser, MockSegmenter(fallback="none"), small_cfg)
    assert a.pixel_mask.empty
    assert a.flags == ["EmptyAnchorMask:Kondo"]


def test_anchor_needs_a_portrait_prompt(backends, fixed_seg, small_cfg):
    with pytest.raises(PlanIntegrityError):
        generate_anchor(replace(GORILLA, portrait_prompt=" "), 0, backends.denoiser, fixed_seg, small_cfg)


# --- single scenes ----------------------------------------------------------------------


def test_rehearsal_masks(backends, fixed_seg, small_cfg):
    scene = SceneSpec(0, "x", "towering gorilla and young woman pilot", ["Kondo", "Mira"])
    image, masks = rehearsal_render(scene, 1, backends.denoiser, fixed_seg, [GORILLA, PILOT], small_cfg)
    assert image.shape == (64, 64, 3)
    k, m = masks.pixel_masks["Kondo"].values, masks.pixel_masks["Mira"].values
    assert not (k & m).any() and k.sum() == m.sum() == 2048


def test_rehearsal_without_subjects(backends, fixed_seg, small_cfg):
    _, masks = rehearsal_render(SceneSpec(0, "road", "road"), 1, backends.denoiser, fixed_seg, [], small_cfg)
    assert masks.subjects == []


def test_msd_skips_empty_scene(backends, small_cfg):
    r = render_scene_msd(SceneSpec(0, "road", "road"), [], MaskSet(), 5, backends.denoiser, small_cfg)
    assert r.flags == ["MSDSkipped:no-subjects"]
    assert np.array_equal(r.final_image, r.rehearsal_image)


def test_msd_changes_the_scene_but_not_the_reference(backends, fixed_seg, small_cfg):
    d = backends.denoiser
    anchor = generate_anchor(GORILLA, 11, d, fixed_seg, small_cfg)
    scene = SceneSpec(0, "x", "towering gorilla on a roof", ["Kondo"])
    rehearsal, masks = rehearsal_render(scene, 3, d, fixed_seg, [GORILLA], small_cfg)
    r = render_scene_msd(scene, [anchor], masks, 3, d, small_cfg, rehearsal_image=rehearsal)
    assert not np.array_equal(r.final_image, rehearsal)
    assert r.activation and all(v for v in r.activation.values())

    # the reference stream itself must still reproduce the stored portrait
    emb = d.encode_text(scene.rewritten_prompt)
    lat = np.stack([d.init_latents(11, 64, 64), d.init_latents(3, 64, 64)])
    solo = d.run_steps(lat[:1], [anchor.text_embedding], small_cfg.steps, small_cfg.guidance_scale)
    assert np.array_equal(d.decode(solo[0], 64, 64), anchor.portrait_image)
    assert emb.token_count > 0


def test_full_ablation_equals_rehearsal(backends, fixed_seg, small_cfg):
    cfg = replace(small_cfg, mmsa_enabled=False, mmca_enabled=False)
    d = backends.denoiser
    anchor = generate_anchor(GORILLA, 11, d, fixed_seg, cfg)
    scene = SceneSpec(0, "x", "towering gorilla on a roof", ["Kondo"])
    rehearsal, masks = rehearsal_render(scene, 3, d, fixed_seg, [GORILLA], cfg)
    r = render_scene_msd(scene, [anchor], masks, 3, d, cfg, rehearsal_image=rehearsal)
    assert np.array_equal(r.final_image, rehearsal)


def test_timestep_mismatch(backends, fixed_seg, small_cfg):
    anchor = generate_anchor(GORILLA, 11, backends.denoiser, fixed_seg, small_cfg)
    scene = SceneSpec(0, "x", "towering gorilla", ["Kondo"])
    other = replace(small_cfg, steps=small_cfg.steps + 1)
    _, masks = rehearsal_render(scene, 3, backends.denoiser, fixed_seg, [GORILLA], other)
    with pytest.raises(TimestepMisalignment):
        render_scene_msd(scene, [anchor], masks, 3, backends.denoiser, other)


def test_missing_anchor(backends, small_cfg):
    with pytest.raises(PlanIntegrityError):
        render_scene_msd(SceneSpec(0, "x", "x", ["Kondo"]), [], MaskSet(), 0, backends.denoiser, small_cfg)


def test_activation_respects_layer_sets(backends):
    cat = backends.denoiser.layer_catalog()
    act = configured_activation(cat, RenderConfig())
    assert all("mmsa" in v for k, v in act.items() if k.startswith("decoder.self"))
    assert not any("mmsa" in v for k, v in act.items() if not k.startswith("decoder"))
    assert sum("mmca" in v for v in act.values()) == sum(1 for l in cat if l.attn_kind.value == "cross")
    assert configured_activation(cat, RenderConfig(mmsa_enabled=False, mmca_enabled=False)) == {}


# --- whole runs -------------------------------------------------------------------------


def test_run_story_layout_and_manifest(tmp_path, backends, fixed_seg, small_cfg):
    plan = two_subject_plan()
    res = run_story(plan, small_cfg, backends.denoiser, fixed_seg, tmp_path)
    run = res.run_dir
    assert run.name == default_run_id(plan, small_cfg, "mock")
    man = json.loads((run / "manifest.json").read_text())
    validate_document(man, "dreamstory.run.v1")
    assert [s["status"] for s in man["scenes"]] == ["ok", "ok", "ok"]
    assert man["arm"] == {"mmsa": True, "mmca": True, "rewrite": True}
    assert man["layers"] == configured_activation(backends.denoiser.layer_catalog(), small_cfg)
    assert "MSDSkipped:no-subjects" in man["scenes"][2]["flags"]
    for rel in ("anchors/Kondo.png", "anchors/Mira.png", "scenes/001.png", "rehearsal/001.png",
                "masks/001/Kondo.png", "masks/anchors/Mira.png", "plan.json", "timings.jsonl"):
        assert (run / rel).is_file(), rel
    assert load_mask_png(run / "masks/001/Kondo.png")[:, :32].all()
    assert load_image(run / "scenes/001.png").shape == (64, 64, 3)
    assert "timings" not in json.dumps(man)


def test_run_story_is_deterministic(tmp_path, backends, fixed_seg, small_cfg):
    plan = two_subject_plan()
    a = run_story(plan, small_cfg, backends.denoiser, fixed_seg, tmp_path / "a")
    b = run_story(plan, replace(small_cfg, workers=3), backends.denoiser, fixed_seg, tmp_path / "b")
    strip = lambda m: {k: v for k, v in m.items() if k != "config"}
    assert a.run_dir.name == b.run_dir.name
    assert strip(a.manifest) == strip(b.manifest)
    for i in range(3):
        assert (a.run_dir / f"scenes/{i:03d}.png").read_bytes() == (b.run_dir / f"scenes/{i:03d}.png").read_bytes()


def test_run_story_resumes_after_interruption(tmp_path, backends, fixed_seg, small_cfg):
    plan = two_subject_plan()

    def die_after_first(index):
        if index == 0:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        run_story(plan, small_cfg, backends.denoiser, fixed_seg, tmp_path, on_scene_done=die_after_first)
    rendered = []
    res = run_story(plan, small_cfg, backends.denoiser, fixed_seg, tmp_path, on_scene_done=rendered.append)
    assert rendered == [1, 2]
    assert [s["status"] for s in res.manifest["scenes"]] == ["ok", "ok", "ok"]
    fresh = run_story(plan, small_cfg, backends.denoiser, fixed_seg, tmp_path / "fresh")
    assert fresh.manifest["scenes"] == res.manifest["scenes"]


def test_corrupted_image_is_rerendered(tmp_path, backends, fixed_seg, small_cfg):
    plan = two_subject_plan()
    res = run_story(plan, small_cfg, backends.denoiser, fixed_seg, tmp_path)
    (res.run_dir / "scenes/000.png").write_bytes(b"junk")
    rendered = []
    run_story(plan, small_cfg, backends.denoiser, fixed_seg, tmp_path, on_scene_done=rendered.append)
    assert rendered == [0]


def test_integrity_checked_before_rendering(tmp_path, backends, fixed_seg, small_cfg):
    plan = two_subject_plan()
    plan.scenes[0].present_subjects = ["Ghost"]
    with pytest.raises(PlanIntegrityError):
        run_story(plan, small_cfg, backends.denoiser, fixed_seg, tmp_path)
    assert not any(tmp_path.iterdir())


def test_failed_scene_is_recorded(tmp_path, backends, small_cfg):
    class Flaky(MockSegmenter):
        def segment(self, image, phrases):
            if len(phrases) == 2:  # only the two-subject rehearsal
                raise RuntimeError("GPU fell over")
            return super().segment(image, phrases)

    res = run_story(two_subject_plan(), small_cfg, backends.denoiser, Flaky(), tmp_path)
    statuses = [s["status"] for s in res.manifest["scenes"]]
    assert statuses == ["ok", "failed", "ok"]
    assert "SegmenterFailure" in res.manifest["scenes"][1]["error"]
    with pytest.raises(SegmenterFailure):
        run_story(two_subject_plan(), replace(small_cfg, fail_fast=True), backends.denoiser, Flaky(), tmp_path / "ff")


def test_disable_rewrite_uses_raw_prompts(tmp_path, backends, fixed_seg, small_cfg):
    res = run_story(two_subject_plan(), replace(small_cfg, rewrite=False), backends.denoiser, fixed_seg, tmp_path)
    assert res.manifest["scenes"][0]["prompt"] == "Kondo on the roof"
    assert res.manifest["arm"]["rewrite"] is False


def test_kondo_plan_renders(tmp_path, plan, backends, small_cfg):
    res = run_story(plan, small_cfg, backends.denoiser, backends.segmenter, tmp_path)
    assert len(res.manifest["scenes"]) == len(plan.scenes)
    assert all(s["status"] == "ok" for s in res.manifest["scenes"])

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dreamstory.backends import MockAestheticScorer, MockClipScorer
from dreamstory.backends.mock_vision import image_digest
from dreamstory.errors import InputError, KeyMismatch, SchemaError
from dreamstory.metrics import (
    DC_DS_RULE,
    DistanceAsSimilarity,
    SceneMetrics,
    aggregate_report,
    annotation_accuracy,
    compute_aes,
    compute_clip_t,
    compute_dc_ds,
    compute_ds,
    dc_ds_detail,
    ds_detail,
    evaluate_run,
    iou,
    parse_metric_list,
    render_accuracy_table,
    report_from_dict,
    write_metrics,
)
from dreamstory.pipeline import run_story
from metric_fixtures import (
    BOX_HI,
    BOX_LO,
    BOX_OVERLAP,
    BOX_SIDE,
    SCENE,
    SIM_BY_SHAPE,
    anchor,
    detector,
    keyed_similarity,
)


def test_iou_by_hand():
    assert iou(BOX_HI, BOX_OVERLAP) == pytest.approx(0.9)
    assert iou(BOX_HI, BOX_LO) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(2 / 6)


# --- DS -------------------------------------------------------------------------------


def test_ds_undetected_is_zero():
    value, rec = ds_detail(SCENE, anchor("Rex", "dog"), detector({}), keyed_similarity())
    assert value == 0.0 and rec.found is False


def test_ds_uses_highest_score_box():
    det = detector({"dog": [(BOX_LO, 0.6), (BOX_HI, 0.8)]})
    value, rec = ds_detail(SCENE, anchor("Rex", "dog"), det, keyed_similarity())
    assert value == SIM_BY_SHAPE[(10, 10)] == 0.7
    assert rec.box == BOX_HI and rec.score == 0.8


def test_ds_distance_adapter():
    det = detector({"dog": [(BOX_HI, 0.8)]})
    sim = DistanceAsSimilarity(lambda a, b: 0.25)
    assert compute_ds(SCENE, anchor("Rex", "dog"), det, sim) == 0.75


# --- D&C-DS ---------------------------------------------------------------------------


def test_dc_ds_mean_of_assigned():
    det = detector({"dog": [(BOX_HI, 0.9)], "cat": [(BOX_LO, 0.8)]})
    value = compute_dc_ds(SCENE, [anchor("Rex", "dog"), anchor("Tom", "cat")], det, keyed_similarity())
    assert value == pytest.approx((0.7 + 0.3) / 2)


def test_dc_ds_one_undetected_is_zero():
    det = detector({"dog": [(BOX_HI, 0.9)]})
    value, log = dc_ds_detail(SCENE, [anchor("Rex", "dog"), anchor("Tom", "cat")], det, keyed_similarity())
    assert value == 0.0
    assert log["Rex"].found and not log["Tom"].found


def test_dc_ds_composite_subject_is_zero():
    # the cat's only box overlaps the dog's with IoU 0.9: hand-run of the greedy rule
    # 1. (Rex, BOX_HI, 0.9) assigned   2. (Tom, BOX_OVERLAP, 0.85) rejected -> Tom unassigned -> 0
    det = detector({"dog": [(BOX_HI, 0.9)], "cat": [(BOX_OVERLAP, 0.85)]})
    rex, tom = anchor("Rex", "dog"), anchor("Tom", "cat")
    assert compute_dc_ds(SCENE, [rex, tom], det, keyed_similarity()) == 0.0
    # DS alone happily scores both
    assert compute_ds(SCENE, tom, det, keyed_similarity()) == 0.65


def test_dc_ds_shared_type_gets_distinct_boxes():
    det = detector({"person": [(BOX_HI, 0.9), (BOX_SIDE, 0.7)]})
    value, log = dc_ds_detail(SCENE, [anchor("Ann", "person"), anchor("Bo", "person")], det, keyed_similarity())
    assert log["Ann"].box == BOX_HI and log["Bo"].box == BOX_SIDE
    assert value == pytest.approx((0.7 + 0.5) / 2)


def test_dc_ds_single_box_for_two_subjects_is_zero():
    det = detector({"person": [(BOX_HI, 0.9)]})
    assert compute_dc_ds(SCENE, [anchor("Ann", "person"), anchor("Bo", "person")], det, keyed_similarity()) == 0.0


def test_dc_ds_needs_subjects():
    with pytest.raises(InputError):
        compute_dc_ds(SCENE, [], detector({}), keyed_similarity())


boxes = st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(2, 16), st.integers(2, 16)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(st.lists(st.tuples(boxes, st.floats(0.05, 1.0)), min_size=1, max_size=4),
       st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4))
def test_dc_ds_never_exceeds_ds_with_one_box_per_subject(dets, sims):
    # one detection per distinct token means the greedy pick is the DS pick
    tokens = [f"t{i}" for i in range(len(dets))]
    det = detector({t: [d] for t, d in zip(tokens, dets)})
    table = {d[0]: s for d, s in zip(dets, sims)}
    shape_sim = {}
    for (x0, y0, x1, y1), s in table.items():
        shape_sim.setdefault((y1 - y0, x1 - x0), s)
    from dreamstory.backends import MockSimilarity

    sim = MockSimilarity(lambda a, b: shape_sim[a.shape[:2]])
    anchors = [anchor(t, t) for t in tokens]
    ds = np.mean([compute_ds(SCENE, a, det, sim) for a in anchors])
    dc = compute_dc_ds(SCENE, anchors, det, sim)
    assert dc <= ds + 1e-12
    assert dc in (0.0, pytest.approx(ds))


# --- CLIP-T / AES -----------------------------------------------------------------------


def test_clip_and_aes():
    assert compute_clip_t(SCENE, "a dog", MockClipScorer(0.38)) == 0.38
    keyed = MockClipScorer(table={(image_digest(SCENE), "a dog"): 0.31})
    assert compute_clip_t(SCENE, "a dog", keyed) == 0.31
    assert compute_aes(SCENE, MockAestheticScorer(6.1)) == 6.1
    with pytest.raises(InputError):
        compute_clip_t(SCENE, "  ", MockClipScorer(0.3))
    with pytest.raises(InputError):
        compute_aes(np.zeros((4, 4)), MockAestheticScorer(6.1))


# --- annotation accuracy ------------------------------------------------------------------


def one_subject_truth(n_cases=50):
    # each case: one present subject and one distractor -> 2 decisions per case
    return {**{(f"c{i}", "A"): True for i in range(n_cases)}, **{(f"c{i}", "B"): False for i in range(n_cases)}}


def test_accuracy_all_correct():
    truth = one_subject_truth()
    t = annotation_accuracy(dict(truth), truth)
    assert t.per_decision[1] == 100.0 and t.per_scene[1] == 100.0
    assert t.per_decision[0] is None and t.decisions[1] == 100


def test_accuracy_one_wrong_of_hundred():
    truth = one_subject_truth()
    pred = dict(truth)
    pred[("c7", "B")] = True
    t = annotation_accuracy(pred, truth)
    assert t.per_decision[1] == 99.00
    assert t.per_scene[1] == 98.00


def test_accuracy_missing_prediction_is_wrong_and_extra_is_error():
    truth = {("c0", "A"): True, ("c0", "B"): False}
    assert annotation_accuracy({("c0", "A"): True}, truth).per_decision[1] == 50.0
    with pytest.raises(KeyMismatch):
        annotation_accuracy({("c9", "A"): True}, truth)


def test_accuracy_groups_by_true_count_or_given_k():
    truth = {("z", "A"): False, ("two", "A"): True, ("two", "B"): True}
    t = annotation_accuracy(dict(truth), truth)
    assert t.scenes == {0: 1, 1: 0, 2: 1, 3: 0}
    t = annotation_accuracy(dict(truth), truth, k_of={"z": 3, "two": 3})
    assert t.scenes[3] == 2


def test_accuracy_table_shape():
    reference = annotation_accuracy({}, {})
    reference.per_decision.update({0: 100.0, 1: 98.86, 2: 95.29, 3: 91.28})
    text = render_accuracy_table({"ChatGPT4": reference})
    lines = text.splitlines()
    assert lines[0] == "LLM annotation accuracy (%)"
    assert lines[1].split() == ["Model", "0-Subject", "1-Subject", "2-Subject", "3-Subject"]
    assert lines[3].split() == ["ChatGPT4", "100.00", "98.86", "95.29", "91.28"]


# --- aggregation ---------------------------------------------------------------------------


def test_aggregate_mean():
    rows = [SceneMetrics("a", 1, ds_per_subject={"x": 0.4}), SceneMetrics("b", 1, ds_per_subject={"x": 0.6})]
    rep = aggregate_report(rows, metrics=["ds"])
    assert rep.aggregates == [{"group": "1-Subject", "n": 2, "ds": pytest.approx(0.5)}]


def test_aggregate_grouped_table_matches_hand_sums():
    rows = [
        SceneMetrics("a", 2, 6.0, 0.30, {"x": 0.5, "y": 0.7}, 0.6),
        SceneMetrics("b", 2, 7.0, 0.34, {"x": 0.2, "y": 0.4}, 0.0),
        SceneMetrics("c", 3, 6.5, 0.32, {"x": 0.9, "y": 0.6, "z": 0.3}, 0.5),
    ]
    rep = aggregate_report(rows)
    two, three, everything = rep.aggregates
    assert two["group"] == "2-Subject" and two["n"] == 2
    assert two["aes"] == pytest.approx(6.5) and two["clip_t"] == pytest.approx(0.32)
    assert two["ds"] == pytest.approx((0.6 + 0.3) / 2) and two["dc_ds"] == pytest.approx(0.3)
    assert three["ds"] == pytest.approx(0.6) and three["dc_ds"] == pytest.approx(0.5)
    assert everything["group"] == "all" and everything["aes"] == pytest.approx(6.5)
    lines = rep.table().splitlines()
    assert lines[0].split() == ["Group", "N", "AES", "CLIP-T", "DS", "D&C-DS"]
    assert len(lines) == 2 + 3 + 1
    assert lines[2].split()[2:] == ["6.5000", "0.3200", "0.4500", "0.3000"]


def test_aggregate_skips_undefined_values():
    rows = [SceneMetrics("a", 0, aes=6.0), SceneMetrics("b", 0, aes=7.0)]
    agg = aggregate_report(rows).aggregates[0]
    assert agg["ds"] is None and agg["aes"] == 6.5
    with pytest.raises(InputError):
        aggregate_report([])


def test_parse_metric_list():
    assert parse_metric_list(None) == ["aes", "clip_t", "ds", "dc_ds"]
    assert parse_metric_list("ds, dc_ds") == ["ds", "dc_ds"]
    with pytest.raises(InputError):
        parse_metric_list("fid")


# --- whole runs -----------------------------------------------------------------------------


def test_evaluate_run_and_round_trip(tmp_path, plan, backends, small_cfg):
    res = run_story(plan, small_cfg, backends.denoiser, backends.segmenter, tmp_path)
    rep = evaluate_run(res.run_dir, backends)
    assert [s.scene_id for s in rep.scenes] == [f"scene-{i:03d}" for i in range(len(plan.scenes))]
    assert [s.k_subjects for s in rep.scenes] == [len(sc.present_subjects) for sc in plan.scenes]
    for s in rep.scenes:
        assert 0.0 <= (s.ds or 0.0) <= 1.0
        assert 5.5 <= s.aes <= 7.0
    path = write_metrics(rep, tmp_path / "metrics.json")
    doc = json.loads(path.read_text())
    assert doc["dc_ds_rule"] == DC_DS_RULE
    again = report_from_dict(doc)
    assert again.aggregates == rep.aggregates
    assert aggregate_report(again.scenes).aggregates == rep.aggregates


def test_metrics_file_is_validated(tmp_path):
    doc = aggregate_report([SceneMetrics("a", 0, aes=6.0)]).to_dict()
    doc["schema"] = "dreamstory.metrics.v0"
    with pytest.raises(SchemaError):
        report_from_dict(doc)

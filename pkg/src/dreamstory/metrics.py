"""Objective metrics over rendered stories and benchmark runs.

AES (aesthetic predictor), CLIP-T (image/prompt agreement), DS (identity
similarity between a detected subject crop and its anchor crop), D&C-DS
(detect-and-compare across all subjects of a scene) and LLM annotation
accuracy. Every scorer is a pluggable backend; the functions here only do
the bookkeeping.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .backends.base import (
    AestheticScorer,
    Box,
    Detection,
    Detector,
    ImageTextScorer,
    PerceptualSimilarity,
    check_image,
)
from .errors import InputError, KeyMismatch
from .schemas import METRICS_SCHEMA, validate_document, write_json_atomic

ALL_METRICS = ("aes", "clip_t", "ds", "dc_ds")
METRIC_LABELS = {"aes": "AES", "clip_t": "CLIP-T", "ds": "DS", "dc_ds": "D&C-DS"}
IOU_MAX = 0.5

DC_DS_RULE = (
    "interpretation: detections of every subject's type token are assigned greedily in descending "
    f"score order, rejecting a box whose IoU with an already assigned box exceeds {IOU_MAX}; "
    "if any subject stays unassigned the scene scores 0, otherwise the mean of the per-subject similarities"
)


# --- geometry -------------------------------------------------------------------


def box_area(box: Box) -> int:
    x0, y0, x1, y1 = box
    return max(0, x1 - x0) * max(0, y1 - y0)


def iou(a: Box, b: Box) -> float:
    inter = box_area((max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3])))
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def crop(image: np.ndarray, box: Box) -> np.ndarray:
    x0, y0, x1, y1 = box
    out = image[max(0, y0):max(0, y1), max(0, x0):max(0, x1)]
    if out.size == 0:
        raise InputError(f"box {box} gives an empty crop")
    return out


# --- anchors as the evaluator sees them -------------------------------------------


@dataclass
class EvalAnchor:
    """A subject's portrait and the crop of it used as the DS reference."""

    name: str
    type_token: str
    portrait: np.ndarray
    crop_box: Box | None = None

    @classmethod
    def from_anchor(cls, anchor) -> "EvalAnchor":
        return cls(anchor.subject.name, anchor.subject.type_token, anchor.portrait_image)

    def reference_crop(self, detector: Detector | None = None) -> np.ndarray:
        """The anchor's own highest-score box, or the full portrait if nothing is detected."""
        if self.crop_box is None and detector is not None:
            dets = detector.detect(self.portrait, self.type_token)
            if dets:
                self.crop_box = max(dets, key=lambda d: d.score).box
        return crop(self.portrait, self.crop_box) if self.crop_box else self.portrait


def _as_eval(anchor) -> EvalAnchor:
    return anchor if isinstance(anchor, EvalAnchor) else EvalAnchor.from_anchor(anchor)


class DistanceAsSimilarity:
    """Wrap a distance backend (0 = identical) so it reports 1 - distance."""

    def __init__(self, distance: Callable[[np.ndarray, np.ndarray], float]):
        self.distance = distance

    def similarity(self, image_a, image_b) -> float:
        return 1.0 - float(self.distance(image_a, image_b))


def _unit(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


# --- per-scene metrics ------------------------------------------------------------


@dataclass
class DetectionRecord:
    box: Box | None
    score: float
    found: bool

    def to_dict(self) -> dict:
        return {"box": list(self.box) if self.box else None, "score": self.score, "found": self.found}


def ds_detail(scene_image, anchor, detector: Detector, sim: PerceptualSimilarity) -> tuple[float, DetectionRecord]:
    scene_image = check_image(scene_image)
    anchor = _as_eval(anchor)
    dets = detector.detect(scene_image, anchor.type_token)
    if not dets:
        return 0.0, DetectionRecord(None, 0.0, False)
    best = max(dets, key=lambda d: d.score)
    value = sim.similarity(crop(scene_image, best.box), anchor.reference_crop(detector))
    return _unit(value), DetectionRecord(best.box, best.score, True)


def compute_ds(scene_image, anchor, detector: Detector, sim: PerceptualSimilarity) -> float:
    """Similarity between the highest-score detection of the subject and its anchor crop; 0 if undetected."""
    return ds_detail(scene_image, anchor, detector, sim)[0]


def dc_ds_detail(scene_image, anchors: Sequence, detector: Detector, sim: PerceptualSimilarity,
                 iou_max: float = IOU_MAX) -> tuple[float, dict[str, DetectionRecord]]:
    scene_image = check_image(scene_image)
    anchors = [_as_eval(a) for a in anchors]
    if not anchors:
        raise InputError("D&C-DS needs at least one expected subject")
    by_token: dict[str, list[Detection]] = {}
    candidates = []
    for i, a in enumerate(anchors):
        if a.type_token not in by_token:
            by_token[a.type_token] = list(detector.detect(scene_image, a.type_token))
        for j, d in enumerate(by_token[a.type_token]):
            candidates.append((-d.score, i, j, d))
    candidates.sort(key=lambda c: c[:3])
    assigned: dict[int, Detection] = {}
    for _, i, _, d in candidates:
        if i in assigned:
            continue
        if any(d.box == other.box or iou(d.box, other.box) > iou_max for other in assigned.values()):
            continue
        assigned[i] = d
    log = {
        a.name: DetectionRecord(assigned[i].box, assigned[i].score, True) if i in assigned
        else DetectionRecord(None, 0.0, False)
        for i, a in enumerate(anchors)
    }
    if len(assigned) < len(anchors):
        return 0.0, log
    values = [
        _unit(sim.similarity(crop(scene_image, assigned[i].box), a.reference_crop(detector)))
        for i, a in enumerate(anchors)
    ]
    return float(np.mean(values)), log


def compute_dc_ds(scene_image, anchors: Sequence, detector: Detector, sim: PerceptualSimilarity,
                  iou_max: float = IOU_MAX) -> float:
    return dc_ds_detail(scene_image, anchors, detector, sim, iou_max)[0]


def compute_clip_t(scene_image, scene_text: str, scorer: ImageTextScorer) -> float:
    scene_image = check_image(scene_image)
    if not scene_text or not scene_text.strip():
        raise InputError("CLIP-T needs a non-empty scene prompt")
    return float(scorer.score(scene_image, scene_text))


def compute_aes(scene_image, scorer: AestheticScorer) -> float:
    return float(scorer.score(check_image(scene_image)))


@dataclass
class SceneMetrics:
    scene_id: str
    k_subjects: int
    aes: float | None = None
    clip_t: float | None = None
    ds_per_subject: dict[str, float] = field(default_factory=dict)
    dc_ds: float | None = None
    detection_log: dict[str, DetectionRecord] = field(default_factory=dict)

    @property
    def ds(self) -> float | None:
        return float(np.mean(list(self.ds_per_subject.values()))) if self.ds_per_subject else None

    def value(self, metric: str) -> float | None:
        return self.ds if metric == "ds" else getattr(self, metric)

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "k_subjects": self.k_subjects,
            "aes": self.aes,
            "clip_t": self.clip_t,
            "ds_per_subject": dict(self.ds_per_subject),
            "dc_ds": self.dc_ds,
            "detection_log": {k: v.to_dict() for k, v in self.detection_log.items()},
        }


def score_scene(scene_id: str, image, prompt: str, anchors: Sequence, backends,
                metrics: Iterable[str] = ALL_METRICS) -> SceneMetrics:
    """All selected metrics for one scene. ``backends`` needs detector/similarity/clip/aesthetic."""
    metrics = set(metrics)
    anchors = [_as_eval(a) for a in anchors]
    out = SceneMetrics(scene_id, len(anchors))
    if "aes" in metrics:
        out.aes = compute_aes(image, backends.aesthetic)
    if "clip_t" in metrics:
        out.clip_t = compute_clip_t(image, prompt, backends.clip)
    if "ds" in metrics:
        for a in anchors:
            value, rec = ds_detail(image, a, backends.detector, backends.similarity)
            out.ds_per_subject[a.name] = value
            out.detection_log.setdefault(a.name, rec)
    if "dc_ds" in metrics and anchors:
        out.dc_ds, log = dc_ds_detail(image, anchors, backends.detector, backends.similarity)
        out.detection_log.update(log)
    return out


# --- annotation accuracy ---------------------------------------------------------


GROUPS = (0, 1, 2, 3)


@dataclass
class AccuracyTable:
    """Accuracy in percent per subject-count group; None for groups without data."""

    per_decision: dict[int, float | None]
    per_scene: dict[int, float | None]
    decisions: dict[int, int]
    scenes: dict[int, int]

    def to_dict(self) -> dict:
        return {
            "per_decision": {str(k): v for k, v in self.per_decision.items()},
            "per_scene": {str(k): v for k, v in self.per_scene.items()},
            "decisions": {str(k): v for k, v in self.decisions.items()},
            "scenes": {str(k): v for k, v in self.scenes.items()},
        }


def annotation_accuracy(predictions: Mapping[tuple[str, str], bool], ground_truth: Mapping[tuple[str, str], bool],
                        k_of: Mapping[str, int] | None = None) -> AccuracyTable:
    """Presence-annotation accuracy grouped by each case's true subject count.

    A case's group is ``k_of[case_id]`` if given, else the number of True
    ground-truth entries for the case. Ground-truth keys without a prediction
    count as wrong.
    """
    extra = set(predictions) - set(ground_truth)
    if extra:
        raise KeyMismatch(f"predictions for keys absent from the ground truth: {sorted(extra)[:5]}")
    cases: dict[str, list[bool]] = defaultdict(list)
    positives: dict[str, int] = defaultdict(int)
    for (case_id, subject), truth in ground_truth.items():
        pred = predictions.get((case_id, subject))
        cases[case_id].append(pred is not None and bool(pred) == bool(truth))
        positives[case_id] += bool(truth)
    right = defaultdict(int)
    total = defaultdict(int)
    exact = defaultdict(int)
    n_cases = defaultdict(int)
    for case_id, results in cases.items():
        k = k_of[case_id] if k_of is not None else positives[case_id]
        right[k] += sum(results)
        total[k] += len(results)
        exact[k] += all(results)
        n_cases[k] += 1
    groups = sorted(set(GROUPS) | set(total))

    def pct(a, b):
        return round(100.0 * a / b, 2) if b else None

    return AccuracyTable(
        per_decision={k: pct(right[k], total[k]) for k in groups},
        per_scene={k: pct(exact[k], n_cases[k]) for k in groups},
        decisions={k: total[k] for k in groups},
        scenes={k: n_cases[k] for k in groups},
    )


def _fmt(v, digits: int) -> str:
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_accuracy_table(tables: Mapping[str, AccuracyTable], mode: str = "per_decision") -> str:
    """One row per model, one column per subject-count group, percentages with two decimals."""
    groups = sorted({k for t in tables.values() for k in getattr(t, mode)} | set(GROUPS))
    rows = [["Model"] + [f"{k}-Subject" for k in groups]]
    for model, t in tables.items():
        rows.append([model] + [_fmt(getattr(t, mode).get(k), 2) for k in groups])
    title = "LLM annotation accuracy (%)" + (" - exact match per scene" if mode == "per_scene" else "")
    return title + "\n" + _align(rows)


# --- reports ------------------------------------------------------------------------


@dataclass
class MetricsReport:
    scenes: list[SceneMetrics]
    aggregates: list[dict]
    metrics: list[str]
    annotation_accuracy: dict[str, AccuracyTable] = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "schema": METRICS_SCHEMA,
            "metrics": list(self.metrics),
            "dc_ds_rule": DC_DS_RULE,
            "scenes": [s.to_dict() for s in self.scenes],
            "aggregates": self.aggregates,
        }
        if self.annotation_accuracy:
            doc["annotation_accuracy"] = {m: t.to_dict() for m, t in self.annotation_accuracy.items()}
        return doc

    def table(self) -> str:
        return render_metrics_table(self)


def _group_label(k) -> str:
    return f"{k}-Subject" if isinstance(k, int) else str(k)


def aggregate_report(scene_metrics: Sequence[SceneMetrics], grouping: str | Callable[[SceneMetrics], object] = "k_subjects",
                     metrics: Sequence[str] = ALL_METRICS) -> MetricsReport:
    """Mean of each metric per group plus an ``all`` row.

    Scenes where a metric is undefined (e.g. DS without subjects) are left
    out of that metric's mean; undetected subjects count as 0, not missing.
    """
    if not scene_metrics:
        raise InputError("no scene metrics to aggregate")
    key = (lambda s: getattr(s, grouping)) if isinstance(grouping, str) else grouping
    groups: dict[object, list[SceneMetrics]] = defaultdict(list)
    for s in scene_metrics:
        groups[key(s)].append(s)

    def row(label, items):
        out = {"group": label, "n": len(items)}
        for m in metrics:
            vals = [s.value(m) for s in items if s.value(m) is not None]
            out[m] = float(np.mean(vals)) if vals else None
        return out

    aggregates = [row(_group_label(g), groups[g]) for g in sorted(groups, key=lambda g: (str(type(g)), g))]
    if len(groups) > 1:
        aggregates.append(row("all", list(scene_metrics)))
    return MetricsReport(list(scene_metrics), aggregates, list(metrics))


def render_metrics_table(report: MetricsReport) -> str:
    digits = {"aes": 4, "clip_t": 4, "ds": 4, "dc_ds": 4}
    rows = [["Group", "N"] + [METRIC_LABELS[m] for m in report.metrics]]
    for agg in report.aggregates:
        rows.append([str(agg["group"]), str(agg["n"])] + [_fmt(agg.get(m), digits[m]) for m in report.metrics])
    text = _align(rows)
    if "dc_ds" in report.metrics:
        text += "\nD&C-DS rule (" + DC_DS_RULE + ")"
    return text


def write_metrics(report: MetricsReport, path: str | Path) -> Path:
    doc = report.to_dict()
    validate_document(doc, METRICS_SCHEMA, str(path))
    return write_json_atomic(path, doc)


def parse_metric_list(text: str | None) -> list[str]:
    if not text:
        return list(ALL_METRICS)
    names = [t.strip() for t in text.split(",") if t.strip()]
    unknown = [n for n in names if n not in ALL_METRICS]
    if unknown:
        raise InputError(f"unknown metrics {unknown}; choose from {list(ALL_METRICS)}")
    return names


# --- whole runs ------------------------------------------------------------------------


def evaluate_run(run_dir: str | Path, backends, metrics: Sequence[str] = ALL_METRICS,
                 case_ids: Mapping[int, str] | None = None, exclude: Iterable[str] = ()) -> MetricsReport:
    """Score every successfully rendered scene of a run directory.

    ``case_ids`` maps scene index to a benchmark case id (used as scene_id);
    scenes whose id is in ``exclude`` are skipped.
    """
    from .director.plan import load_plan
    from .pipeline import load_image
    from .schemas import RUN_SCHEMA, read_json

    run_dir = Path(run_dir)
    manifest = read_json(run_dir / "manifest.json")
    validate_document(manifest, RUN_SCHEMA, str(run_dir / "manifest.json"))
    plan = load_plan(run_dir / "plan.json")
    anchors = {}
    for name, rec in manifest["anchors"].items():
        anchors[name] = EvalAnchor(name, plan.subject(name).type_token, load_image(run_dir / rec["image"]))
    scenes_by_index = {s.index: s for s in plan.scenes}
    excluded = set(exclude)
    rows = []
    for rec in manifest["scenes"]:
        if rec["status"] != "ok":
            continue
        scene = scenes_by_index[rec["index"]]
        scene_id = (case_ids or {}).get(rec["index"], f"scene-{rec['index']:03d}")
        if scene_id in excluded:
            continue
        prompt = scene.rewritten_prompt if manifest["arm"].get("rewrite", True) and scene.rewritten_prompt else scene.raw_prompt
        image = load_image(run_dir / rec["image"])
        rows.append(score_scene(scene_id, image, prompt, [anchors[n] for n in scene.present_subjects], backends, metrics))
    return aggregate_report(rows, metrics=metrics)


def report_from_dict(doc: dict) -> MetricsReport:
    validate_document(doc, METRICS_SCHEMA)
    scenes = []
    for s in doc["scenes"]:
        log = {k: DetectionRecord(tuple(v["box"]) if v.get("box") else None, v.get("score", 0.0), v.get("found", False))
               for k, v in s.get("detection_log", {}).items()}
        scenes.append(SceneMetrics(s["scene_id"], s["k_subjects"], s.get("aes"), s.get("clip_t"),
                                   dict(s.get("ds_per_subject", {})), s.get("dc_ds"), log))
    return MetricsReport(scenes, list(doc["aggregates"]), list(doc["metrics"]))


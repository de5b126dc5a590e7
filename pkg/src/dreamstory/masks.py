"""Subject masks: segmentation post-processing, token-grid downsampling and
attention-derived refinement (semantic maps, Otsu thresholds, correspondence).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .backends.base import LayerId, Segmenter
from .director.plan import SubjectSpec
from .errors import SegmenterFailure, ShapeMismatch

MISSING_SUBJECT = "MissingSubject"


class NonStochasticWarning(UserWarning):
    pass


class DegenerateOtsuWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PixelMask:
    values: np.ndarray  # bool [H, W]
    subject_name: str
    source: str = "segmentation"  # or "attention_refined"
    score: float = 0.0

    @property
    def empty(self) -> bool:
        return not bool(self.values.any())


@dataclass(frozen=True)
class LayerMask:
    values: np.ndarray  # bool [n_spatial_tokens]
    layer: LayerId | None
    subject_name: str


@dataclass(frozen=True)
class SemanticMap:
    values: np.ndarray  # float [n_spatial_tokens], non-negative
    subject_name: str = ""


@dataclass(frozen=True)
class CorrespondenceMatrix:
    values: np.ndarray  # uint8 [P_tgt, P_ref]
    target_subject: str = ""
    reference_subject: str = ""


@dataclass
class MaskSet:
    pixel_masks: dict[str, PixelMask] = field(default_factory=dict)
    layer_masks: dict[tuple[str, LayerId], LayerMask] = field(default_factory=dict)
    correspondence: dict[tuple[str, LayerId], CorrespondenceMatrix] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    @property
    def subjects(self) -> list[str]:
        return list(self.pixel_masks)

    def layer_vector(self, subject: str, layer: LayerId) -> np.ndarray:
        return self.layer_masks[(subject, layer)].values

    def union_and_sum(self, layer: LayerId, union_mode: str = "union") -> tuple[np.ndarray, np.ndarray]:
        vecs = [self.layer_masks[(s, layer)].values.astype(np.float64) for s in self.pixel_masks]
        stack = np.stack(vecs)
        m_u = stack.max(axis=0) if union_mode == "union" else stack.min(axis=0)
        return m_u, stack.sum(axis=0)


# --- detection prompt ---------------------------------------------------------


def detection_groups(subjects: Sequence[SubjectSpec]) -> dict[str, list[str]]:
    """type_token -> subject names sharing it, in first-seen order."""
    groups: dict[str, list[str]] = {}
    for s in subjects:
        groups.setdefault(s.type_token.strip(), []).append(s.name)
    return groups


def build_detection_prompt(subjects: Sequence[SubjectSpec]) -> str:
    """Join the distinct type tokens as ``"man. girl."``."""
    return " ".join(f"{token}." for token in detection_groups(subjects))


# --- pixel-level segmentation -------------------------------------------------


def resolve_overlaps(masks: Sequence[np.ndarray], scores: Sequence[float]) -> list[np.ndarray]:
    """Give every contested pixel to the covering mask with the highest score.

    Ties go to the earlier mask.
    """
    if not masks:
        return []
    stack = np.stack([np.asarray(m, dtype=bool) for m in masks])
    ranked = np.where(stack, np.asarray(scores, dtype=np.float64)[:, None, None], -np.inf)
    owner = np.argmax(ranked, axis=0)
    covered = stack.any(axis=0)
    return [covered & (owner == i) for i in range(len(masks))]


def segment_subjects(image: np.ndarray, subjects: Sequence[SubjectSpec], segmenter: Segmenter) -> MaskSet:
    """Pixel masks for each subject, pairwise disjoint.

    Subjects sharing a type token get that token's detections in score order.
    Undetected subjects get an empty mask and a MissingSubject flag.
    """
    H, W = image.shape[:2]
    groups = detection_groups(subjects)
    if not groups:
        return MaskSet()
    try:
        segments = segmenter.segment(image, list(groups))
    except Exception as exc:
        raise SegmenterFailure(f"segmenter failed: {exc}") from exc
    names, raw, scores = [], [], []
    flags = []
    for token, members in groups.items():
        hits = sorted((s for s in segments if s.phrase == token), key=lambda s: -s.score)
        for i, name in enumerate(members):
            names.append(name)
            if i < len(hits):
                m = np.asarray(hits[i].mask, dtype=bool)
                if m.shape != (H, W):
                    raise ShapeMismatch(f"segment mask {m.shape} for image {(H, W)}")
                raw.append(m)
                scores.append(float(hits[i].score))
            else:
                raw.append(np.zeros((H, W), dtype=bool))
                scores.append(0.0)
                flags.append(f"{MISSING_SUBJECT}:{name}")
    resolved = resolve_overlaps(raw, scores)
    order = {s.name: i for i, s in enumerate(subjects)}
    pixel = {}
    for name, m, sc in sorted(zip(names, resolved, scores), key=lambda t: order[t[0]]):
        pixel[name] = PixelMask(m, name, "segmentation", sc)
    return MaskSet(pixel_masks=pixel, flags=flags)


# --- token grids ----------------------------------------------------------------


def downsample_mask(mask, layer: LayerId | None, token_grid: tuple[int, int]) -> LayerMask:
    """Area-average the pixel mask onto ``token_grid`` and keep cells with > 0.5 coverage."""
    values = mask.values if isinstance(mask, PixelMask) else np.asarray(mask)
    name = mask.subject_name if isinstance(mask, PixelMask) else ""
    H, W = values.shape
    h, w = token_grid
    if h < 1 or w < 1 or H % h or W % w:
        raise ShapeMismatch(f"pixel mask {H}x{W} does not tile onto a {h}x{w} token grid")
    cover = values.astype(np.float64).reshape(h, H // h, w, W // w).mean(axis=(1, 3))
    return LayerMask((cover > 0.5).reshape(-1), layer, name)


def with_layer_masks(masks: MaskSet, layers: Sequence[LayerId], grid_of) -> MaskSet:
    """Return a copy of ``masks`` with a LayerMask for every (subject, layer)."""
    layer_masks = dict(masks.layer_masks)
    for name, pm in masks.pixel_masks.items():
        for layer in layers:
            layer_masks[(name, layer)] = downsample_mask(pm, layer, grid_of(layer))
    return MaskSet(dict(masks.pixel_masks), layer_masks, dict(masks.correspondence), list(masks.flags))


# --- attention-derived refinement ---------------------------------------------


def semantic_map(self_attn, cross_attn_token_col, R: int = 4, layer_set: Sequence | None = None,
                 subject_name: str = "") -> SemanticMap:
    """Mean over layers of ``sum_{r=1..R} A_sa^r @ a_ca``.

    ``self_attn`` / ``cross_attn_token_col`` may be single arrays (one layer)
    or equal-length sequences (one entry per layer).
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    sa_list = [self_attn] if isinstance(self_attn, np.ndarray) else list(self_attn)
    ca_list = [cross_attn_token_col] if isinstance(cross_attn_token_col, np.ndarray) else list(cross_attn_token_col)
    if layer_set is not None and len(layer_set) != len(sa_list):
        raise ShapeMismatch(f"{len(sa_list)} self-attention maps for {len(layer_set)} layers")
    if len(sa_list) != len(ca_list) or not sa_list:
        raise ShapeMismatch("need one cross-attention column per self-attention map")
    total = None
    for A, c in zip(sa_list, ca_list):
        A = np.asarray(A, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64).reshape(-1)
        P = A.shape[0]
        if A.shape != (P, P) or c.shape[0] != P:
            raise ShapeMismatch(f"self-attention {A.shape} vs cross column {c.shape}")
        if np.max(np.abs(A.sum(axis=1) - 1.0)) > 1e-4:
            warnings.warn("self-attention rows do not sum to 1", NonStochasticWarning, stacklevel=2)
        acc = np.zeros(P)
        v = c
        for _ in range(R):
            v = A @ v
            acc += v
        total = acc if total is None else total + acc
    return SemanticMap(total / len(sa_list), subject_name)


def otsu_binarize(values, bins: int = 256) -> tuple[float, np.ndarray]:
    """Otsu threshold over a ``bins``-bin histogram of the value range.

    Returns ``(threshold, binary)`` with ``binary[i] = values[i] > threshold``;
    the threshold is the largest value of the lower class. All-equal input
    is degenerate: everything is foreground and the threshold is the min.
    """
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size < 2:
        raise ValueError("Otsu needs at least two values")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        warnings.warn("all values equal; Otsu threshold undefined", DegenerateOtsuWarning, stacklevel=2)
        return lo, np.ones(x.shape, dtype=bool)
    idx = np.minimum(((x - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sums = np.bincount(idx, weights=x, minlength=bins)
    n, total = counts.sum(), sums.sum()
    c0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    c1 = n - c0
    valid = (c0 > 0) & (c1 > 0)
    mu0 = np.divide(s0, c0, out=np.zeros_like(s0), where=c0 > 0)
    mu1 = np.divide(total - s0, c1, out=np.zeros_like(s0), where=c1 > 0)
    between = np.where(valid, c0 * c1 * (mu0 - mu1) ** 2, -1.0)
    k = int(np.argmax(between))
    binary = idx > k
    threshold = float(x[~binary].max())
    return threshold, binary


def correspondence_matrix(m_tgt, m_ref) -> CorrespondenceMatrix:
    """Outer product of the Otsu-binarised flattened target and reference maps."""
    tgt = m_tgt.values if isinstance(m_tgt, SemanticMap) else np.asarray(m_tgt)
    ref = m_ref.values if isinstance(m_ref, SemanticMap) else np.asarray(m_ref)
    bt = _binarize_quiet(np.asarray(tgt, dtype=np.float64).reshape(-1))
    br = _binarize_quiet(np.asarray(ref, dtype=np.float64).reshape(-1))
    return CorrespondenceMatrix(
        np.outer(bt, br).astype(np.uint8),
        getattr(m_tgt, "subject_name", ""),
        getattr(m_ref, "subject_name", ""),
    )


def _binarize_quiet(v: np.ndarray) -> np.ndarray:
    if v.size < 2:
        return (v > 0).astype(np.uint8)
    if np.all(v == 0):
        return np.zeros(v.shape, dtype=np.uint8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateOtsuWarning)
        return otsu_binarize(v)[1].astype(np.uint8)


def drift_fraction(mask, mass) -> float:
    """Share of (non-negative) attention mass lying outside ``mask``."""
    m = np.asarray(mask, dtype=bool).reshape(-1)
    a = np.clip(np.asarray(mass, dtype=np.float64).reshape(-1), 0, None)
    if m.shape != a.shape:
        raise ShapeMismatch(f"mask {m.shape} vs mass {a.shape}")
    total = a.sum()
    if total <= 0:
        return 0.0
    return float(a[~m].sum() / total)


def should_refine(masks: Mapping[str, np.ndarray], masses: Mapping[str, np.ndarray], threshold: float = 0.35) -> bool:
    """True iff some subject's attention mass outside its mask exceeds ``threshold``."""
    return any(drift_fraction(masks[name], masses[name]) > threshold for name in masses if name in masks)


def save_mask_png(mask: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path, format="PNG")
    return path


def load_mask_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127

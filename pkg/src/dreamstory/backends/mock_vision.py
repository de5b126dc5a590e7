"""Deterministic stand-ins for the segmenter, detector and scorers.

Each mock serves configured fixtures first and otherwise falls back to a
layout derived from a hash of the image bytes, so repeated calls on the same
image always agree.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Mapping, Sequence

import numpy as np

from .base import Box, Detection, Segment, check_image

FixtureTable = Mapping[str, Sequence[tuple[Box, float]]]


def image_digest(image: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(image.shape).encode())
    h.update(np.ascontiguousarray(image).tobytes())
    return h.hexdigest()


def box_mask(box: Box, height: int, width: int) -> np.ndarray:
    x0, y0, x1, y1 = box
    m = np.zeros((height, width), dtype=bool)
    m[max(y0, 0):min(y1, height), max(x0, 0):min(x1, width)] = True
    return m


def clip_box(box: Box, height: int, width: int) -> Box:
    x0, y0, x1, y1 = box
    x0, x1 = sorted((min(max(x0, 0), width), min(max(x1, 0), width)))
    y0, y1 = sorted((min(max(y0, 0), height), min(max(y1, 0), height)))
    return (x0, y0, x1, y1)


def hashed_layout(image: np.ndarray, phrase: str, n: int, salt: str = "") -> list[tuple[Box, float]]:
    H, W = image.shape[:2]
    seed = int(hashlib.sha256(f"{salt}|{image_digest(image)}|{phrase}".encode()).hexdigest()[:16], 16)
    rng = np.random.default_rng(seed)
    out = []
    score = 0.95
    for _ in range(n):
        bw = int(W * rng.uniform(0.25, 0.5))
        bh = int(H * rng.uniform(0.3, 0.6))
        x0 = int(rng.integers(0, max(W - bw, 1)))
        y0 = int(rng.integers(0, max(H - bh, 1)))
        score = float(round(score * rng.uniform(0.6, 0.95), 4))
        out.append(((x0, y0, x0 + max(bw, 1), y0 + max(bh, 1)), score))
    return out


class _FixtureSource:
    def __init__(self, fixtures: FixtureTable | None, by_image: Mapping[str, FixtureTable] | None,
                 fallback: str, max_instances: int, salt: str):
        self.fixtures = dict(fixtures or {})
        self.by_image = {k: dict(v) for k, v in (by_image or {}).items()}
        if fallback not in ("hash", "none"):
            raise ValueError(f"unknown fallback {fallback!r}")
        self.fallback = fallback
        self.max_instances = max_instances
        self.salt = salt

    def lookup(self, image: np.ndarray, phrase: str) -> list[tuple[Box, float]]:
        if self.by_image:
            table = self.by_image.get(image_digest(image))
            if table is not None and phrase in table:
                return list(table[phrase])
        if phrase in self.fixtures:
            return list(self.fixtures[phrase])
        if self.fallback == "hash":
            return hashed_layout(image, phrase, self.max_instances, self.salt)
        return []


class MockSegmenter:
    """Rectangle masks positioned by fixture table or image hash."""

    def __init__(self, fixtures: FixtureTable | None = None, by_image: Mapping[str, FixtureTable] | None = None,
                 fallback: str = "hash", max_instances: int = 3):
        self._src = _FixtureSource(fixtures, by_image, fallback, max_instances, "seg")

    def segment(self, image: np.ndarray, phrases: Sequence[str]) -> list[Segment]:
        image = check_image(image)
        H, W = image.shape[:2]
        out = []
        for phrase in phrases:
            for box, score in self._src.lookup(image, phrase):
                box = clip_box(tuple(int(b) for b in box), H, W)
                out.append(Segment(phrase, float(score), box, box_mask(box, H, W)))
        out.sort(key=lambda s: -s.score)
        return out


class MockDetector:
    def __init__(self, fixtures: FixtureTable | None = None, by_image: Mapping[str, FixtureTable] | None = None,
                 fallback: str = "hash", max_instances: int = 3):
        self._src = _FixtureSource(fixtures, by_image, fallback, max_instances, "seg")

    def detect(self, image: np.ndarray, category: str) -> list[Detection]:
        image = check_image(image)
        H, W = image.shape[:2]
        dets = [Detection(clip_box(tuple(int(b) for b in box), H, W), float(score))
                for box, score in self._src.lookup(image, category)]
        return sorted(dets, key=lambda d: -d.score)


def _thumb(image: np.ndarray, size: int = 16) -> np.ndarray:
    H, W = image.shape[:2]
    ys = (np.arange(size) * H) // size
    xs = (np.arange(size) * W) // size
    return image[ys][:, xs].astype(np.float64)


class MockSimilarity:
    """Symmetric image similarity in [0, 1]; identical images score exactly 1.

    Pass ``fn`` to override with a fixture-driven function.
    """

    def __init__(self, fn: Callable[[np.ndarray, np.ndarray], float] | None = None, temperature: float = 32.0):
        self.fn = fn
        self.temperature = temperature

    def similarity(self, image_a: np.ndarray, image_b: np.ndarray) -> float:
        check_image(image_a)
        check_image(image_b)
        if self.fn is not None:
            return float(self.fn(image_a, image_b))
        if image_a.shape == image_b.shape and np.array_equal(image_a, image_b):
            return 1.0
        diff = np.abs(_thumb(image_a) - _thumb(image_b)).mean()
        return float(np.exp(-diff / self.temperature))


def _unit_hash(*parts: str) -> float:
    h = hashlib.sha256("|".join(parts).encode()).hexdigest()
    return int(h[:12], 16) / float(16 ** 12)


class MockClipScorer:
    def __init__(self, constant: float | None = None, table: Mapping[tuple[str, str], float] | None = None,
                 low: float = 0.30, high: float = 0.40):
        self.constant = constant
        self.table = dict(table or {})
        self.low, self.high = low, high

    def score(self, image: np.ndarray, text: str) -> float:
        image = check_image(image)
        key = (image_digest(image), text)
        if key in self.table:
            return float(self.table[key])
        if self.constant is not None:
            return float(self.constant)
        return self.low + (self.high - self.low) * _unit_hash("clip", *key)


class MockAestheticScorer:
    def __init__(self, constant: float | None = None, table: Mapping[str, float] | None = None,
                 low: float = 5.5, high: float = 7.0):
        self.constant = constant
        self.table = dict(table or {})
        self.low, self.high = low, high

    def score(self, image: np.ndarray) -> float:
        image = check_image(image)
        key = image_digest(image)
        if key in self.table:
            return float(self.table[key])
        if self.constant is not None:
            return float(self.constant)
        return self.low + (self.high - self.low) * _unit_hash("aes", key)

"""Name-based construction of backend stacks and LLM clients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from ..errors import ConfigError
from .base import (
    AestheticScorer,
    DenoiserBackend,
    Detector,
    ImageTextScorer,
    LLMClient,
    PerceptualSimilarity,
    Segmenter,
)
from .fixture_llm import FixtureDirectorLLM
from .llm import OpenAIChatLLM, make_replay_llm
from .mock_denoiser import make_mock_denoiser
from .mock_vision import (
    MockAestheticScorer,
    MockClipScorer,
    MockDetector,
    MockSegmenter,
    MockSimilarity,
)


@dataclass
class Backends:
    denoiser: DenoiserBackend
    segmenter: Segmenter
    detector: Detector
    similarity: PerceptualSimilarity
    clip: ImageTextScorer
    aesthetic: AestheticScorer


def _mock_stack(seed: int = 0, **_) -> Backends:
    return Backends(
        denoiser=make_mock_denoiser(seed),
        segmenter=MockSegmenter(),
        detector=MockDetector(),
        similarity=MockSimilarity(),
        clip=MockClipScorer(),
        aesthetic=MockAestheticScorer(),
    )


_BACKENDS: dict[str, Callable[..., Backends]] = {"mock": _mock_stack}
_LLMS: dict[str, Callable[[str], LLMClient]] = {
    "replay": make_replay_llm,
    "fixture": FixtureDirectorLLM.from_file,
    "openai": lambda model: OpenAIChatLLM(model or "gpt-4o"),
}


def register_backend(name: str, factory: Callable[..., Backends]) -> None:
    """Make ``--backend name`` available; ``factory(seed=...)`` returns a Backends bundle."""
    _BACKENDS[name] = factory


def register_llm(kind: str, factory: Callable[[str], LLMClient]) -> None:
    _LLMS[kind] = factory


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def make_backends(name: str = "mock", seed: int = 0, **kwargs) -> Backends:
    try:
        factory = _BACKENDS[name]
    except KeyError:
        raise ConfigError(f"unknown backend {name!r}; available: {available_backends()}") from None
    return factory(seed=seed, **kwargs)


def make_llm(spec: str) -> LLMClient:
    """Build a client from ``kind:argument`` (``replay:t.json``, ``fixture:w.json``, ``openai:gpt-4o``)."""
    kind, _, arg = spec.partition(":")
    try:
        factory = _LLMS[kind]
    except KeyError:
        raise ConfigError(f"unknown LLM kind {kind!r}; available: {sorted(_LLMS)}") from None
    return factory(arg)

from .base import (
    AttentionCall,
    AttnKind,
    BlockKind,
    Detection,
    LayerId,
    Segment,
    TokenEmbeddings,
)
from .fixture_llm import FixtureDirectorLLM
from .llm import (
    CallableLLM,
    OpenAIChatLLM,
    RateLimitedLLM,
    RecordingLLM,
    ReplayLLM,
    make_replay_llm,
    message_hash,
)
from .mock_denoiser import MockDenoiser, MockSpec, make_mock_denoiser
from .mock_vision import (
    MockAestheticScorer,
    MockClipScorer,
    MockDetector,
    MockSegmenter,
    MockSimilarity,
)
from .registry import Backends, make_llm, make_backends, register_backend

__all__ = [
    "AttentionCall", "AttnKind", "BlockKind", "Detection", "LayerId", "Segment", "TokenEmbeddings",
    "FixtureDirectorLLM", "CallableLLM", "OpenAIChatLLM", "RateLimitedLLM", "RecordingLLM", "ReplayLLM",
    "make_replay_llm", "message_hash", "MockDenoiser", "MockSpec", "make_mock_denoiser",
    "MockAestheticScorer", "MockClipScorer", "MockDetector", "MockSegmenter", "MockSimilarity",
    "Backends", "make_llm", "make_backends", "register_backend",
]

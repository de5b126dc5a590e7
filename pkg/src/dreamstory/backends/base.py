"""Interfaces for every external model the pipeline talks to.

Real adapters and the bundled mocks implement these protocols structurally;
nothing needs to inherit from them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

Message = tuple[str, str]
Box = tuple[int, int, int, int]  # x0, y0, x1, y1; x1/y1 exclusive


class BlockKind(str, enum.Enum):
    encoder = "encoder"
    middle = "middle"
    decoder = "decoder"


class AttnKind(str, enum.Enum):
    self = "self"
    cross = "cross"


@dataclass(frozen=True, order=True)
class LayerId:
    block_kind: BlockKind
    layer_index: int
    attn_kind: AttnKind

    @property
    def key(self) -> str:
        return f"{self.block_kind.value}.{self.attn_kind.value}.{self.layer_index}"

    @classmethod
    def parse(cls, key: str) -> "LayerId":
        block, attn, idx = key.split(".")
        return cls(BlockKind(block), int(idx), AttnKind(attn))

    def __str__(self) -> str:
        return self.key


@dataclass(frozen=True)
class TokenEmbeddings:
    values: np.ndarray  # [n_tokens, embed_dim]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"token embeddings need shape [n>=1, d], got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("token embeddings contain non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def token_count(self) -> int:
        return self.values.shape[0]


@dataclass
class AttentionCall:
    """Everything a processor sees for one attention layer invocation.

    ``q``, ``k`` and ``v`` hold one matrix per stream of the joint batch
    (references first, target last). Processors return one output matrix per
    stream, before the layer's output projection.
    """

    layer: LayerId
    timestep: int
    n_steps: int
    pass_tag: str  # "cond" | "uncond"
    grid: tuple[int, int]
    q: list[np.ndarray]
    k: list[np.ndarray]
    v: list[np.ndarray]
    scale: float
    extras: dict = field(default_factory=dict)

    @property
    def n_streams(self) -> int:
        return len(self.q)


AttentionProcessor = Callable[[AttentionCall], list]
ProcessorRegistry = Mapping[LayerId, AttentionProcessor]


@runtime_checkable
class LLMClient(Protocol):
    model_id: str

    def complete(self, messages: Sequence[Message]) -> str: ...


@runtime_checkable
class DenoiserBackend(Protocol):
    name: str

    def encode_text(self, prompt: str) -> TokenEmbeddings: ...

    def token_indices(self, prompt: str, phrase: str) -> list[int]: ...

    def init_latents(self, seed: int, height: int, width: int) -> np.ndarray: ...

    def run_steps(
        self,
        latents: np.ndarray,
        conditions: Sequence[TokenEmbeddings],
        steps: int,
        guidance_scale: float,
        processor_registry: ProcessorRegistry | None = None,
    ) -> np.ndarray: ...

    def decode(self, latents: np.ndarray, height: int, width: int) -> np.ndarray: ...

    def layer_catalog(self) -> list[LayerId]: ...

    def layer_grid(self, layer: LayerId) -> tuple[int, int]: ...


@dataclass(frozen=True)
class Segment:
    phrase: str
    score: float
    box: Box
    mask: np.ndarray  # bool [H, W]


@runtime_checkable
class Segmenter(Protocol):
    def segment(self, image: np.ndarray, phrases: Sequence[str]) -> list[Segment]: ...


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float


@runtime_checkable
class Detector(Protocol):
    def detect(self, image: np.ndarray, category: str) -> list[Detection]: ...


@runtime_checkable
class PerceptualSimilarity(Protocol):
    def similarity(self, image_a: np.ndarray, image_b: np.ndarray) -> float: ...


@runtime_checkable
class ImageTextScorer(Protocol):
    def score(self, image: np.ndarray, text: str) -> float: ...


@runtime_checkable
class AestheticScorer(Protocol):
    def score(self, image: np.ndarray) -> float: ...


def check_image(image) -> np.ndarray:
    """Return ``image`` as an RGB uint8 array or raise InputError."""
    from ..errors import InputError

    if not isinstance(image, np.ndarray):
        raise InputError(f"expected an image array, got {type(image).__name__}")
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected uint8 [H, W, 3] image, got {image.dtype} {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise InputError("empty image")
    return image

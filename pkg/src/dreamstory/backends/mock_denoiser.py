"""A tiny deterministic latent denoiser for desk-scale runs.

The network is a toy U-Net-shaped stack of self/cross attention layers over a
small latent grid. It is not a generative model; it exists so that attention
processors are driven exactly the way a real backbone would drive them
(per-layer Q/K/V, joint batches, classifier-free guidance passes, an
iterative timestep loop).

All weights come from ``numpy.random.default_rng(seed)`` (PCG64).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..attention import attention_weights
from ..errors import InvalidSpec, ShapeMismatch
from .base import (
    AttentionCall,
    AttnKind,
    BlockKind,
    LayerId,
    ProcessorRegistry,
    TokenEmbeddings,
)

_WORD = re.compile(r"[a-z0-9]+")


def _default_catalog() -> list[tuple[BlockKind, AttnKind]]:
    return [
        (BlockKind.encoder, AttnKind.self),
        (BlockKind.encoder, AttnKind.cross),
        (BlockKind.middle, AttnKind.self),
        (BlockKind.middle, AttnKind.cross),
        (BlockKind.decoder, AttnKind.self),
        (BlockKind.decoder, AttnKind.cross),
        (BlockKind.decoder, AttnKind.self),
        (BlockKind.decoder, AttnKind.cross),
    ]


@dataclass
class MockSpec:
    latent_size: tuple[int, int] = (8, 8)
    channels: int = 4
    token_dim: int = 16
    max_tokens: int = 32
    catalog: list[tuple[BlockKind, AttnKind]] = field(default_factory=_default_catalog)
    weight_scale: float = 0.5


def _word_seed(model_seed: int, word: str) -> int:
    h = hashlib.sha256(f"{model_seed}:{word}".encode()).digest()
    return int.from_bytes(h[:8], "big")


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / (sd + 1e-5)


class MockDenoiser:
    name = "mock"

    def __init__(self, seed: int = 0, spec: MockSpec | None = None):
        spec = spec or MockSpec()
        if not spec.catalog:
            raise InvalidSpec("mock catalog has no attention layers")
        n_dec_self = sum(1 for b, a in spec.catalog if b is BlockKind.decoder and a is AttnKind.self)
        n_cross = sum(1 for _, a in spec.catalog if a is AttnKind.cross)
        if n_dec_self < 2 or n_cross < 2:
            raise InvalidSpec("mock catalog needs >=2 decoder self-attention and >=2 cross-attention layers")
        h, w = spec.latent_size
        if h % 2 or w % 2:
            raise InvalidSpec("latent size must be even so the middle block can pool 2x2")
        self.seed = seed
        self.spec = spec
        rng = np.random.default_rng(seed)
        d, C = spec.token_dim, spec.channels
        s = spec.weight_scale / np.sqrt(d)
        self._w_in = rng.standard_normal((C, d)) / np.sqrt(C)
        self._w_out = rng.standard_normal((d, C)) * s
        self._pos = rng.standard_normal((spec.max_tokens + 1, d)) * 0.1
        self._bos = rng.standard_normal(d)
        self._time = rng.standard_normal((2, d)) * 0.1

        self._layers: list[LayerId] = []
        self._weights: dict[LayerId, tuple[np.ndarray, ...]] = {}
        counters: dict[tuple, int] = {}
        for block, attn in spec.catalog:
            idx = counters.get((block, attn), 0)
            counters[(block, attn)] = idx + 1
            layer = LayerId(block, idx, attn)
            self._layers.append(layer)
            self._weights[layer] = tuple(rng.standard_normal((d, d)) * s for _ in range(4))

    # --- text ------------------------------------------------------------

    def _words(self, prompt: str) -> list[str]:
        return _WORD.findall(prompt.lower())[: self.spec.max_tokens]

    def encode_text(self, prompt: str) -> TokenEmbeddings:
        rows = [self._bos]
        for word in self._words(prompt):
            rows.append(np.random.default_rng(_word_seed(self.seed, word)).standard_normal(self.spec.token_dim))
        vals = np.stack(rows) + self._pos[: len(rows)]
        return TokenEmbeddings(vals)

    def token_indices(self, prompt: str, phrase: str) -> list[int]:
        words = self._words(prompt)
        wanted = set(_WORD.findall(phrase.lower()))
        return [i + 1 for i, w in enumerate(words) if w in wanted]

    # --- latents ---------------------------------------------------------

    def latent_factor(self, height: int, width: int) -> tuple[int, int]:
        h, w = self.spec.latent_size
        if height % h or width % w:
            raise ShapeMismatch(f"{width}x{height} is not divisible by the {w}x{h} latent grid")
        return height // h, width // w

    def init_latents(self, seed: int, height: int, width: int) -> np.ndarray:
        self.latent_factor(height, width)
        h, w = self.spec.latent_size
        return np.random.default_rng(seed).standard_normal((self.spec.channels, h, w))

    def decode(self, latents: np.ndarray, height: int, width: int) -> np.ndarray:
        fy, fx = self.latent_factor(height, width)
        rgb = 1.0 / (1.0 + np.exp(-latents[:3]))
        img = np.round(rgb * 255.0).astype(np.uint8).transpose(1, 2, 0)
        return np.repeat(np.repeat(img, fy, axis=0), fx, axis=1)

    # --- layers ----------------------------------------------------------

    def layer_catalog(self) -> list[LayerId]:
        return list(self._layers)

    def layer_grid(self, layer: LayerId) -> tuple[int, int]:
        h, w = self.spec.latent_size
        if layer.block_kind is BlockKind.middle:
            return h // 2, w // 2
        return h, w

    def _attend(self, layer, hidden, texts, t, n_steps, pass_tag, registry):
        Wq, Wk, Wv, Wo = self._weights[layer]
        normed = [_layer_norm(x) for x in hidden]
        q = [x @ Wq for x in normed]
        if layer.attn_kind is AttnKind.self:
            k = [x @ Wk for x in normed]
            v = [x @ Wv for x in normed]
        else:
            k = [tx @ Wk for tx in texts]
            v = [tx @ Wv for tx in texts]
        scale = 1.0 / np.sqrt(self.spec.token_dim)
        proc = registry.get(layer) if registry else None
        if proc is None:
            outs = [attention_weights(qi, ki, scale) @ vi for qi, ki, vi in zip(q, k, v)]
        else:
            call = AttentionCall(
                layer=layer, timestep=t, n_steps=n_steps, pass_tag=pass_tag,
                grid=self.layer_grid(layer), q=q, k=k, v=v, scale=scale,
            )
            outs = proc(call)
            if len(outs) != len(hidden):
                raise ShapeMismatch(f"processor at {layer} returned {len(outs)} outputs for {len(hidden)} streams")
        return [x + o @ Wo for x, o in zip(hidden, outs)]

    def _predict(self, latents, texts, t, n_steps, pass_tag, registry):
        C = self.spec.channels
        h, w = self.spec.latent_size
        t_emb = self._time[0] * np.cos(np.pi * t / max(n_steps, 1)) + self._time[1] * np.sin(np.pi * t / max(n_steps, 1))
        hidden = [x.reshape(C, -1).T @ self._w_in + t_emb for x in latents]
        skip = None
        for layer in self._layers:
            if layer.block_kind is BlockKind.middle and skip is None:
                skip = hidden
                hidden = [_pool2(x, h, w) for x in hidden]
            if layer.block_kind is BlockKind.decoder and skip is not None and hidden[0].shape[0] != h * w:
                hidden = [_unpool2(x, h // 2, w // 2) + s for x, s in zip(hidden, skip)]
            hidden = self._attend(layer, hidden, texts, t, n_steps, pass_tag, registry)
        if hidden[0].shape[0] != h * w:
            hidden = [_unpool2(x, h // 2, w // 2) + s for x, s in zip(hidden, skip)]
        return [(x @ self._w_out).T.reshape(C, h, w) for x in hidden]

    def run_steps(
        self,
        latents: np.ndarray,
        conditions: Sequence[TokenEmbeddings],
        steps: int,
        guidance_scale: float,
        processor_registry: ProcessorRegistry | None = None,
    ) -> np.ndarray:
        """Denoise a joint batch ``[B, C, h, w]`` with one condition per stream."""
        x = np.array(latents, dtype=np.float64, copy=True)
        if x.ndim == 3:
            x = x[None]
        if len(conditions) != x.shape[0]:
            raise ShapeMismatch(f"{x.shape[0]} latent streams but {len(conditions)} conditions")
        if steps < 1:
            raise ValueError("steps must be >= 1")
        uncond = self.encode_text("").values
        cond_texts = [c.values for c in conditions]
        unc_texts = [uncond] * len(conditions)
        eta = 1.0 / steps
        for t in range(steps):
            streams = list(x)
            eps_u = self._predict(streams, unc_texts, t, steps, "uncond", processor_registry)
            eps_c = self._predict(streams, cond_texts, t, steps, "cond", processor_registry)
            for b in range(x.shape[0]):
                guided = eps_u[b] + guidance_scale * (eps_c[b] - eps_u[b])
                x[b] = x[b] - eta * np.tanh(guided)
        return x


def _pool2(x: np.ndarray, h: int, w: int) -> np.ndarray:
    d = x.shape[1]
    return x.reshape(h // 2, 2, w // 2, 2, d).mean(axis=(1, 3)).reshape(-1, d)


def _unpool2(x: np.ndarray, h: int, w: int) -> np.ndarray:
    d = x.shape[1]
    g = x.reshape(h, w, d)
    return np.repeat(np.repeat(g, 2, axis=0), 2, axis=1).reshape(-1, d)


def make_mock_denoiser(seed: int = 0, spec: MockSpec | None = None) -> MockDenoiser:
    return MockDenoiser(seed, spec)

"""Attention processors that apply MMSA / MMCA inside a backend's layers.

A :class:`RenderContext` holds everything one scene render needs (masks,
token positions, the attention maps cached from the previous timestep for
mask refinement). Contexts are never shared between renders.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import (
    FusionWeights,
    ReferenceStream,
    attention_weights,
    derive_seed,
    mmca_fuse,
    mmca_single,
    mmsa,
)
from .backends.base import AttentionCall, AttnKind, BlockKind, LayerId
from .config import RenderConfig
from .masks import correspondence_matrix, drift_fraction, semantic_map

REFINEMENT_TRIGGERED = "RefinementTriggered"


def select_layers(catalog: Sequence[LayerId], kind: AttnKind, which: str) -> list[LayerId]:
    return [l for l in catalog if l.attn_kind is kind and (which == "all" or l.block_kind is BlockKind.decoder)]


@dataclass
class RenderContext:
    """Per-scene state for the MSD processors.

    ``ref_masks[i][layer]`` and ``target_masks[i][layer]`` are flattened {0,1}
    token masks of subject ``i`` in reference stream ``i`` and in the target.
    ``target_tokens[i]`` / ``ref_tokens[i]`` are text-token positions used to
    read the subject's cross-attention column during refinement.
    """

    subjects: list[str]
    target_masks: list[dict[LayerId, np.ndarray]]
    ref_masks: list[dict[LayerId, np.ndarray]]
    config: RenderConfig
    catalog: list[LayerId]
    seed: int = 0
    target_tokens: list[list[int]] = field(default_factory=list)
    ref_tokens: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        cfg = self.config
        self.mmsa_layers = set(select_layers(self.catalog, AttnKind.self, cfg.mmsa_layers)) if cfg.mmsa_enabled else set()
        self.mmca_layers = set(select_layers(self.catalog, AttnKind.cross, cfg.mmca_layers)) if cfg.mmca_enabled else set()
        dec_self = [l for l in self.catalog if l.block_kind is BlockKind.decoder and l.attn_kind is AttnKind.self]
        dec_cross = [l for l in self.catalog if l.block_kind is BlockKind.decoder and l.attn_kind is AttnKind.cross]
        self.refine_pairs = list(zip(dec_self, dec_cross))
        self.refine_enabled = cfg.mask_refine != "off" and bool(self.subjects) and cfg.mmsa_enabled and bool(self.refine_pairs)
        self.fusion = FusionWeights(cfg.lam, union_mode=cfg.union_mode)
        self.flags: list[str] = []
        self.correspondence: dict[tuple[int, LayerId], np.ndarray] = {}
        self.refined_at: int | None = None
        self.calls: dict[str, set[str]] = {}
        self._cache: dict[int, dict] = {}
        self._prepared_step = -1
        self._lock = threading.Lock()

    @property
    def n_refs(self) -> int:
        return len(self.subjects)

    def registry(self) -> dict:
        layers = set(self.mmsa_layers) | set(self.mmca_layers)
        if self.refine_enabled:
            for s, c in self.refine_pairs:
                layers.update((s, c))
        return {layer: MSDProcessor(self, layer) for layer in sorted(layers)}

    def activation(self) -> dict[str, list[str]]:
        out = {}
        for layer in sorted(set(self.mmsa_layers) | set(self.mmca_layers)):
            kinds = []
            if layer in self.mmsa_layers:
                kinds.append("mmsa")
            if layer in self.mmca_layers:
                kinds.append("mmca")
            out[layer.key] = kinds
        return out

    # --- masks ----------------------------------------------------------

    def mmsa_mask(self, i: int, layer: LayerId) -> np.ndarray:
        refined = self.correspondence.get((i, layer))
        if refined is not None:
            return refined
        return np.outer(self.target_masks[i][layer], self.ref_masks[i][layer]).astype(np.uint8)

    # --- refinement -----------------------------------------------------

    def _store(self, t: int, key, value):
        with self._lock:
            self._cache.setdefault(t, {})[key] = value

    def _column(self, probs: np.ndarray, tokens: list[int]) -> np.ndarray | None:
        tokens = [k for k in tokens if k < probs.shape[1]]
        if not tokens:
            return None
        return probs[:, tokens].mean(axis=1)

    def prepare_step(self, t: int) -> None:
        if not self.refine_enabled or t == 0 or self._prepared_step == t:
            return
        self._prepared_step = t
        prev = self._cache.pop(t - 1, None)
        self._cache = {k: v for k, v in self._cache.items() if k >= t}
        if not prev:
            return
        tgt = self.n_refs
        if self.config.mask_refine == "auto" and self.refined_at is None:
            drifted = False
            for i in range(self.n_refs):
                for s_layer, c_layer in self.refine_pairs:
                    probs = prev.get((tgt, c_layer))
                    col = None if probs is None else self._column(probs, self.target_tokens[i])
                    if col is not None and drift_fraction(self.target_masks[i][c_layer], col) > self.config.drift_threshold:
                        drifted = True
            if not drifted:
                return
        if self.refined_at is None:
            self.refined_at = t
            self.flags.append(f"{REFINEMENT_TRIGGERED}@{t}")
        for i in range(self.n_refs):
            maps = {}
            for stream, tokens in ((tgt, self.target_tokens[i]), (i, self.ref_tokens[i])):
                sa, ca = [], []
                for s_layer, c_layer in self.refine_pairs:
                    A = prev.get((stream, s_layer))
                    probs = prev.get((stream, c_layer))
                    col = None if probs is None else self._column(probs, tokens)
                    if A is None or col is None or A.shape[0] != col.shape[0]:
                        continue
                    sa.append(A)
                    ca.append(col)
                if sa:
                    maps[stream] = semantic_map(sa, ca, self.config.refine_powers)
            if tgt in maps and i in maps:
                M = correspondence_matrix(maps[tgt], maps[i]).values
                for s_layer, _ in self.refine_pairs:
                    if s_layer in self.mmsa_layers and M.shape == (len(self.target_masks[i][s_layer]), len(self.ref_masks[i][s_layer])):
                        self.correspondence[(i, s_layer)] = M

    def record_cache(self, call: AttentionCall, weights: list[np.ndarray]) -> None:
        if not self.refine_enabled or call.pass_tag != "cond":
            return
        if not any(call.layer in pair for pair in self.refine_pairs):
            return
        for stream, w in enumerate(weights):
            self._store(call.timestep, (stream, call.layer), w)

    def note(self, layer: LayerId, what: str) -> None:
        with self._lock:
            self.calls.setdefault(layer.key, set()).add(what)


class MSDProcessor:
    """Vanilla attention for reference streams; MMSA / MMCA for the target (last stream)."""

    def __init__(self, ctx: RenderContext, layer: LayerId):
        self.ctx = ctx
        self.layer = layer

    def __call__(self, call: AttentionCall) -> list[np.ndarray]:
        ctx = self.ctx
        ctx.prepare_step(call.timestep)
        weights = [attention_weights(q, k, call.scale) for q, k in zip(call.q, call.k)]
        outs = [w @ v for w, v in zip(weights, call.v)]
        ctx.record_cache(call, weights)
        n = call.n_streams
        if n != ctx.n_refs + 1 or ctx.n_refs == 0:
            return outs
        tgt = n - 1
        if call.layer.attn_kind is AttnKind.self and call.layer in ctx.mmsa_layers:
            refs = [
                ReferenceStream(ctx.subjects[i], call.k[i], call.v[i], ctx.mmsa_mask(i, call.layer), call.timestep)
                for i in range(ctx.n_refs)
            ]
            seed = derive_seed(ctx.seed, call.timestep, call.layer.key)
            outs[tgt] = mmsa(
                call.q[tgt], call.k[tgt], call.v[tgt], refs,
                dropout_rate=ctx.config.dropout, rng_seed=seed, scale=call.scale, timestep=call.timestep,
            )
            ctx.note(call.layer, "mmsa")
        elif call.layer.attn_kind is AttnKind.cross and call.layer in ctx.mmca_layers:
            masks = [ctx.target_masks[i][call.layer] for i in range(ctx.n_refs)]
            per_subject = [
                mmca_single(call.q[tgt], call.k[i], call.v[i], masks[i], call.scale) for i in range(ctx.n_refs)
            ]
            outs[tgt] = mmca_fuse(per_subject, masks, outs[tgt], ctx.fusion)
            ctx.note(call.layer, "mmca")
        return outs

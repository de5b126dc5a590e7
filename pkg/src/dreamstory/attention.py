"""Masked mutual attention kernels.

All functions operate on plain 2-D numpy arrays for a single stream:
queries are rows, keys/values are rows, and masks are {0, 1} matrices
aligned with the logits they gate.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch, TimestepMisalignment

MASK_NEG = 1e9
DEFAULT_EPS = 1e-8


@dataclass
class AttentionInputs:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    scale: float | None = None

    def __post_init__(self):
        self.Q, self.K, self.V = (np.asarray(a, dtype=np.float64) for a in (self.Q, self.K, self.V))
        if self.Q.ndim != 2 or self.K.ndim != 2 or self.V.ndim != 2:
            raise ShapeMismatch("Q, K, V must be 2-D")
        if self.Q.shape[1] != self.K.shape[1]:
            raise ShapeMismatch(f"query dim {self.Q.shape[1]} != key dim {self.K.shape[1]}")
        if self.K.shape[0] != self.V.shape[0]:
            raise ShapeMismatch(f"{self.K.shape[0]} keys but {self.V.shape[0]} values")
        if self.scale is None:
            self.scale = 1.0 / np.sqrt(self.Q.shape[1])


@dataclass
class ReferenceStream:
    """One subject's reference keys/values for a single layer and timestep.

    ``mask`` is the [P_tgt x P_ref] correspondence block gating which target
    tokens may read which reference tokens.
    """

    subject_name: str
    K: np.ndarray
    V: np.ndarray
    mask: np.ndarray
    timestep: int | None = None


@dataclass
class FusionWeights:
    lam: float = 0.9
    eps: float = DEFAULT_EPS
    union_mode: str = "union"  # or "intersection"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.eps <= 0:
            raise ValueError("epsilon must be positive")
        if self.union_mode not in ("union", "intersection"):
            raise ValueError(f"unknown union mode {self.union_mode!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax restricted to entries where ``mask`` is 1.

    Masked entries get weight exactly 0; rows with nothing unmasked come back
    as all-zero rows instead of NaN.
    """
    logits = np.asarray(logits, dtype=np.float64)
    keep = np.asarray(mask) != 0
    if logits.shape != keep.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs mask {keep.shape}")
    biased = logits - MASK_NEG * (~keep)
    row_max = np.where(keep, biased, -np.inf).max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(keep, np.exp(np.where(keep, biased - row_max, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)


def vanilla_attention(inputs: AttentionInputs) -> np.ndarray:
    weights = softmax(inputs.Q @ inputs.K.T * inputs.scale)
    return weights @ inputs.V


def attention_weights(Q: np.ndarray, K: np.ndarray, scale: float | None = None) -> np.ndarray:
    if scale is None:
        scale = 1.0 / np.sqrt(Q.shape[1])
    return softmax(Q @ K.T * scale)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


def token_dropout(mask: np.ndarray, rate: float, rng_seed: int, n_protected: int = 0) -> np.ndarray:
    """Zero each 1-entry of the reference columns with probability ``rate``.

    The last ``n_protected`` columns (the target's own block) are never touched.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    mask = np.asarray(mask)
    if rate == 0.0:
        return mask.copy()
    out = mask.copy()
    n_ref = mask.shape[-1] - n_protected
    rng = np.random.default_rng(rng_seed)
    drop = rng.random(mask.shape[:-1] + (n_ref,)) < rate
    ref = out[..., :n_ref]
    ref[drop] = 0
    return out


def mmsa(
    Q_tgt: np.ndarray,
    K_tgt: np.ndarray,
    V_tgt: np.ndarray,
    refs: Sequence[ReferenceStream],
    dropout_rate: float = 0.0,
    rng_seed: int = 0,
    scale: float | None = None,
    timestep: int | None = None,
    return_weights: bool = False,
):
    """Masked mutual self-attention for the target stream.

    Target queries attend to ``[K_1 .. K_N, K_tgt]``; reference block ``i`` is
    gated by ``refs[i].mask`` (after dropout), the target block is all ones.
    """
    inputs = AttentionInputs(Q_tgt, K_tgt, V_tgt, scale)
    P = inputs.Q.shape[0]
    d = inputs.Q.shape[1]
    Ks, Vs, Ms = [], [], []
    for ref in refs:
        if timestep is not None and ref.timestep is not None and ref.timestep != timestep:
            raise TimestepMisalignment(
                f"reference {ref.subject_name!r} at timestep {ref.timestep}, target at {timestep}"
            )
        K = np.asarray(ref.K, dtype=np.float64)
        V = np.asarray(ref.V, dtype=np.float64)
        M = np.asarray(ref.mask)
        if K.ndim != 2 or K.shape[1] != d or V.shape[0] != K.shape[0]:
            raise ShapeMismatch(f"reference {ref.subject_name!r} K/V shapes {K.shape}/{V.shape}")
        if M.shape != (P, K.shape[0]):
            raise ShapeMismatch(f"reference {ref.subject_name!r} mask {M.shape}, expected {(P, K.shape[0])}")
        Ks.append(K)
        Vs.append(V)
        Ms.append(M)
    K_plus = np.concatenate(Ks + [inputs.K], axis=0)
    V_plus = np.concatenate(Vs + [inputs.V], axis=0)
    n_tgt = inputs.K.shape[0]
    M_plus = np.concatenate(Ms + [np.ones((P, n_tgt), dtype=np.uint8)], axis=1).astype(np.uint8)
    if refs and dropout_rate > 0:
        M_plus = token_dropout(M_plus, dropout_rate, rng_seed, n_protected=n_tgt)
    A = masked_softmax(inputs.Q @ K_plus.T * inputs.scale, M_plus)
    out = A @ V_plus
    if return_weights:
        return out, A, M_plus
    return out


def mmca_single(
    Q_tgt: np.ndarray,
    text_K: np.ndarray,
    text_V: np.ndarray,
    m_tgt: np.ndarray,
    scale: float | None = None,
) -> np.ndarray:
    """Cross-attention of the subject region against one subject's text tokens."""
    inputs = AttentionInputs(Q_tgt, text_K, text_V, scale)
    m = np.asarray(m_tgt).reshape(-1)
    if m.shape[0] != inputs.Q.shape[0]:
        raise ShapeMismatch(f"mask has {m.shape[0]} tokens, queries have {inputs.Q.shape[0]}")
    gate = np.repeat((m != 0)[:, None], inputs.K.shape[0], axis=1)
    A = masked_softmax(inputs.Q @ inputs.K.T * inputs.scale, gate)
    return A @ inputs.V


def union_and_sum(masks: Sequence[np.ndarray], union_mode: str = "union") -> tuple[np.ndarray, np.ndarray]:
    stack = np.stack([np.asarray(m, dtype=np.float64).reshape(-1) for m in masks])
    m_s = stack.sum(axis=0)
    m_u = stack.max(axis=0) if union_mode == "union" else stack.min(axis=0)
    return m_u, m_s


def mmca_fuse(
    O_list: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    O_vanilla: np.ndarray,
    weights: FusionWeights | None = None,
) -> np.ndarray:
    """Mask-weighted fusion of per-subject outputs with the vanilla output.

    ``O = lam * m_u / (m_s + eps) * sum(O_i) + O_vanilla * (1 - m_u) * (1 - lam)``
    """
    weights = weights or FusionWeights()
    O_vanilla = np.asarray(O_vanilla, dtype=np.float64)
    if len(O_list) != len(masks):
        raise ShapeMismatch(f"{len(O_list)} outputs but {len(masks)} masks")
    if not O_list:
        return O_vanilla * (1.0 - weights.lam)
    for O in O_list:
        if np.shape(O) != O_vanilla.shape:
            raise ShapeMismatch(f"output {np.shape(O)} vs vanilla {O_vanilla.shape}")
    for m in masks:
        if np.size(m) != O_vanilla.shape[0]:
            raise ShapeMismatch(f"mask of {np.size(m)} tokens vs {O_vanilla.shape[0]} rows")
    m_u, m_s = union_and_sum(masks, weights.union_mode)
    summed = np.sum(np.stack([np.asarray(O, dtype=np.float64) for O in O_list]), axis=0)
    coef = weights.lam * m_u / (m_s + weights.eps)
    return coef[:, None] * summed + O_vanilla * ((1.0 - m_u) * (1.0 - weights.lam))[:, None]

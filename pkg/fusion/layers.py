"""Two-stage modal fusion, the shared-trunk experts and sparsification."""

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from numeric import tensor as nt
from numeric.errors import InvalidArgumentError
from numeric.tensor import Tensor, as_tensor

Params = dict  # name -> Tensor


def init_weight(rng: np.random.Generator, shape: tuple, name: str, scale: Optional[float] = None) -> Tensor:
    if scale is None:
        scale = math.sqrt(2.0 / (shape[0] + (shape[1] if len(shape) > 1 else 1)))
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, name=name)


def init_zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


# =============================================================================
# Domain Types
# =============================================================================

@dataclass(frozen=True, eq=False)
class JointEmbedding:
    vectors: Tensor  # (n, width) per-region fused vectors
    text_summary: Tensor  # (width,)
    dims: int

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.dims:
            raise InvalidArgumentError(f"region vectors {self.vectors.shape} for width {self.dims}")
        if not np.isfinite(self.vectors.data).all():
            raise InvalidArgumentError("joint embedding holds non-finite values")

    @property
    def region_count(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True, eq=False)
class FusedRepresentation(JointEmbedding):
    """Stage-2 output; still a JointEmbedding so stage 2 can be reapplied."""
    pooled: Optional[Tensor] = None  # (width,) causal-weighted region pool
    mixed: Optional[Tensor] = None  # (width,) decoder input
    weights: Optional[np.ndarray] = None  # normalized causal weights used


@dataclass(frozen=True, eq=False)
class ExpertOutput:
    trunk: Tensor
    causal_logits: Tensor
    statistical_logits: Tensor
    gate: Tensor
    mixed_logits: Tensor


# =============================================================================
# Parameters
# =============================================================================

def init_fusion_params(rng: np.random.Generator, region_dim: int, width: int) -> Params:
    return {
        "fusion.w_region": init_weight(rng, (region_dim, width), "fusion.w_region"),
        "fusion.w_text": init_weight(rng, (width, width), "fusion.w_text"),
        "fusion.w_pool": init_weight(rng, (width, width), "fusion.w_pool"),
        "fusion.w_summary": init_weight(rng, (width, width), "fusion.w_summary"),
        "fusion.b_mix": init_zeros((width,), "fusion.b_mix"),
        "fusion.w_query": init_weight(rng, (width, width), "fusion.w_query"),
        "fusion.w_key": init_weight(rng, (width, width), "fusion.w_key"),
    }


def init_expert_params(rng: np.random.Generator, width: int, hidden: int, vocab_size: int) -> Params:
    return {
        "expert.w_trunk": init_weight(rng, (width, hidden), "expert.w_trunk"),
        "expert.b_trunk": init_zeros((hidden,), "expert.b_trunk"),
        "expert.w_causal": init_weight(rng, (hidden, vocab_size), "expert.w_causal"),
        "expert.b_causal": init_zeros((vocab_size,), "expert.b_causal"),
        "expert.w_statistical": init_weight(rng, (hidden, vocab_size), "expert.w_statistical"),
        "expert.b_statistical": init_zeros((vocab_size,), "expert.b_statistical"),
        "expert.w_gate": init_weight(rng, (hidden,), "expert.w_gate", scale=0.1),
        "expert.b_gate": init_zeros((), "expert.b_gate"),
    }


# =============================================================================
# Stage 1 and stage 2
# =============================================================================

def text_summary(text_emb, c_mask, token_gains: Optional[np.ndarray] = None) -> Tensor:
    """Weighted mean of token embeddings; trigger tokens count twice."""
    text_emb = as_tensor(text_emb)
    weights = 1.0 + np.asarray(c_mask, dtype=np.float64)
    if token_gains is not None:
        weights = weights * np.asarray(token_gains, dtype=np.float64)
    if weights.shape != (text_emb.shape[0],):
        raise InvalidArgumentError(f"{weights.shape} token weights for {text_emb.shape[0]} tokens")
    return Tensor(weights / weights.sum()) @ text_emb


def fuse_stage1(text_emb, prior, region_features, params: Params, c_mask,
                token_gains: Optional[np.ndarray] = None, prior_gain: float = 1.0) -> JointEmbedding:
    """Prior-scaled region projections plus a text-conditioned projection."""
    prior, region_features = as_tensor(prior), as_tensor(region_features)
    if region_features.ndim != 2 or prior.shape != (region_features.shape[0],):
        raise InvalidArgumentError(
            f"prior over {prior.shape} regions vs features {region_features.shape}")
    summary = text_summary(text_emb, c_mask, token_gains)
    projected = region_features @ params["fusion.w_region"]
    vectors = nt.scale_rows(projected, prior * prior_gain) + summary @ params["fusion.w_text"]
    return JointEmbedding(vectors=vectors, text_summary=summary, dims=vectors.shape[1])


def text_causal_weights(joint: JointEmbedding) -> Tensor:
    """Cross-causal region weights: softmax of scaled text/region dot products."""
    return nt.softmax((joint.vectors @ joint.text_summary) / math.sqrt(joint.dims))


def attention_weights(joint: JointEmbedding, text_emb, params: Params) -> Tensor:
    """Conventional attention weights from learned projections of a plain text mean."""
    query = nt.mean(as_tensor(text_emb), axis=0) @ params["fusion.w_query"]
    keys = joint.vectors @ params["fusion.w_key"]
    return nt.softmax((keys @ query) / math.sqrt(joint.dims))


def fuse_stage2(joint: JointEmbedding, causal_weights, params: Params) -> FusedRepresentation:
    weights = as_tensor(causal_weights)
    n = joint.region_count
    if weights.shape != (n,):
        raise InvalidArgumentError(f"{weights.shape} causal weights for {n} regions")
    if (weights.data < 0).any():
        raise InvalidArgumentError("causal weights must be nonnegative")
    if weights.data.sum() <= 0:
        raise InvalidArgumentError("causal weights sum to zero")
    weights = weights / nt.sum(weights)
    vectors = nt.scale_rows(joint.vectors, weights * float(n))
    pooled = weights @ joint.vectors
    mixed = nt.tanh(pooled @ params["fusion.w_pool"]
                    + joint.text_summary @ params["fusion.w_summary"] + params["fusion.b_mix"])
    return FusedRepresentation(vectors=vectors, text_summary=joint.text_summary, dims=joint.dims,
                               pooled=pooled, mixed=mixed, weights=weights.data)


# =============================================================================
# Experts and sparsification
# =============================================================================

def expert_forward(hidden, params: Params, force_gate: Optional[float] = None) -> ExpertOutput:
    """Shared trunk feeding a causal and a statistical head, mixed by a gate.

    hidden is (width,) or (steps, width).
    """
    hidden = as_tensor(hidden)
    trunk = nt.relu(hidden @ params["expert.w_trunk"] + params["expert.b_trunk"])
    causal = trunk @ params["expert.w_causal"] + params["expert.b_causal"]
    statistical = trunk @ params["expert.w_statistical"] + params["expert.b_statistical"]
    if force_gate is None:
        gate = nt.sigmoid(trunk @ params["expert.w_gate"] + params["expert.b_gate"])
    else:
        gate = Tensor(np.full(trunk.shape[:-1], float(force_gate)))
    if hidden.ndim == 1:
        mixed = gate * causal + (1.0 - gate) * statistical
    else:
        mixed = nt.scale_rows(causal, gate) + nt.scale_rows(statistical, 1.0 - gate)
    return ExpertOutput(trunk=trunk, causal_logits=causal, statistical_logits=statistical,
                        gate=gate, mixed_logits=mixed)


def sparse_support(weights: np.ndarray, top_k: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if not 1 <= top_k <= len(weights):
        raise InvalidArgumentError(f"top_k={top_k} must lie in [1, {len(weights)}]")
    keep = np.zeros(len(weights), dtype=bool)
    keep[np.argsort(-weights, kind="stable")[:top_k]] = True
    return keep


def sparsify(weights: Union[np.ndarray, Tensor], top_k: int):
    """Keep the top_k entries (ties to the lower index) and renormalize."""
    if isinstance(weights, Tensor):
        kept = weights * Tensor(sparse_support(weights.data, top_k).astype(np.float64))
        return kept / nt.sum(kept)
    weights = np.asarray(weights, dtype=np.float64)
    kept = np.where(sparse_support(weights, top_k), weights, 0.0)
    return kept / kept.sum()

"""Fusion and decoding - two-stage fusion, experts, decoder and interventions."""

from .checkpoint import FORMAT_VERSION, load_checkpoint, read_manifest, save_checkpoint
from .decoder import BOS, EOS, AnswerDecoder, DecoderConfig, InterventionState, decode_answer
from .intervention import (
    InterventionReport,
    InterventionSpec,
    causal_intervention,
    explain,
    intervention_heatmap,
    strengthen_dependencies,
)
from .layers import (
    ExpertOutput,
    FusedRepresentation,
    JointEmbedding,
    attention_weights,
    expert_forward,
    fuse_stage1,
    fuse_stage2,
    init_expert_params,
    init_fusion_params,
    init_weight,
    init_zeros,
    sparsify,
    text_causal_weights,
    text_summary,
)

__all__ = [
    "BOS",
    "EOS",
    "FORMAT_VERSION",
    "AnswerDecoder",
    "DecoderConfig",
    "ExpertOutput",
    "FusedRepresentation",
    "InterventionReport",
    "InterventionSpec",
    "InterventionState",
    "JointEmbedding",
    "attention_weights",
    "causal_intervention",
    "decode_answer",
    "expert_forward",
    "explain",
    "fuse_stage1",
    "fuse_stage2",
    "init_expert_params",
    "init_fusion_params",
    "init_weight",
    "init_zeros",
    "intervention_heatmap",
    "load_checkpoint",
    "read_manifest",
    "save_checkpoint",
    "sparsify",
    "strengthen_dependencies",
    "text_causal_weights",
    "text_summary",
]

"""Causal text encoding - intent tags, trigger masks, roles and the pretext task."""

from .encoding import (
    ROLE_CODES,
    CausalText,
    RoleEmbedding,
    assign_roles,
    causal_cls_loss,
    compose_position_encoding,
    compose_position_encodings,
    detect_triggers,
    dropout_preserving_triggers,
    encode_text,
    mask_triggers_pretext,
    segment_role_oracle,
    sinusoidal_positions,
)
from .lexicon import (
    MASK_ID,
    ROLES,
    SPECIAL_TOKENS,
    TriggerLexicon,
    Vocabulary,
    causal_corpus,
    detokenize,
    tokenize,
    wrap_causal_intent,
)

__all__ = [
    "MASK_ID",
    "ROLES",
    "ROLE_CODES",
    "SPECIAL_TOKENS",
    "CausalText",
    "RoleEmbedding",
    "TriggerLexicon",
    "Vocabulary",
    "assign_roles",
    "causal_cls_loss",
    "causal_corpus",
    "compose_position_encoding",
    "compose_position_encodings",
    "detect_triggers",
    "detokenize",
    "dropout_preserving_triggers",
    "encode_text",
    "mask_triggers_pretext",
    "segment_role_oracle",
    "sinusoidal_positions",
    "tokenize",
    "wrap_causal_intent",
]

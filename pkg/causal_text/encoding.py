"""Trigger masks, causal roles, role-aware position encodings and the pretext task."""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from numeric import tensor as nt
from numeric.errors import InvalidArgumentError
from numeric.tensor import Tensor, as_tensor

from .lexicon import MASK_ID, ROLES, TriggerLexicon, Vocabulary, is_special, is_word, tokenize, wrap_causal_intent

logger = logging.getLogger("gestalt.causal_text")

ROLE_CODES = {name: code for code, name in enumerate(ROLES)}


# =============================================================================
# Domain Types
# =============================================================================

@dataclass(frozen=True, eq=False)
class CausalText:
    tokens: tuple
    ids: np.ndarray
    c_mask: np.ndarray
    roles: tuple
    embeddings: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.tokens)
        if not (len(self.ids) == len(self.c_mask) == len(self.roles) == n):
            raise InvalidArgumentError("per-token fields must have equal length")
        if n < 2 or self.tokens[0] != "[CAUSE]" or self.tokens[-1] != "[EFFECT]":
            raise InvalidArgumentError("causal text must be wrapped in [CAUSE] ... [EFFECT]")
        if self.embeddings is not None and len(self.embeddings) != n:
            raise InvalidArgumentError("one embedding per token required")
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))
        object.__setattr__(self, "c_mask", np.asarray(self.c_mask, dtype=np.int64))

    def __len__(self):
        return len(self.tokens)

    @property
    def role_codes(self) -> np.ndarray:
        return np.array([ROLE_CODES[r] for r in self.roles], dtype=np.int64)

    @property
    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.ids == MASK_ID)


@dataclass(frozen=True, eq=False)
class RoleEmbedding:
    """Learned cause/effect vectors; the irrelevant role is the zero vector."""
    e_cause: Tensor
    e_effect: Tensor

    def __post_init__(self):
        object.__setattr__(self, "e_cause", as_tensor(self.e_cause))
        object.__setattr__(self, "e_effect", as_tensor(self.e_effect))
        if self.e_cause.ndim != 1 or self.e_cause.shape != self.e_effect.shape:
            raise InvalidArgumentError(f"role vectors {self.e_cause.shape} / {self.e_effect.shape}")

    @classmethod
    def init(cls, dim: int, seed: int = 0) -> "RoleEmbedding":
        rng = np.random.default_rng(seed)
        return cls(Tensor(rng.standard_normal(dim), requires_grad=True, name="e_cause"),
                   Tensor(rng.standard_normal(dim), requires_grad=True, name="e_effect"))

    @property
    def dim(self) -> int:
        return self.e_cause.shape[0]

    def table(self) -> Tensor:
        """(3, dim) rows in role-code order: zeros, e_cause, e_effect."""
        return nt.concat([Tensor(np.zeros((1, self.dim))),
                          nt.reshape(self.e_cause, (1, self.dim)),
                          nt.reshape(self.e_effect, (1, self.dim))], axis=0)

    def vector(self, role: str) -> np.ndarray:
        if role == "cause":
            return self.e_cause.data
        if role == "effect":
            return self.e_effect.data
        return np.zeros(self.dim)


# =============================================================================
# Detection and roles
# =============================================================================

def detect_triggers(tokens: Sequence[str], lexicon: TriggerLexicon) -> np.ndarray:
    return np.array([1 if lexicon.is_trigger(t) else 0 for t in tokens], dtype=np.int64)


def assign_roles(tokens: Sequence[str], lexicon: TriggerLexicon) -> tuple:
    """Dictionary role first; otherwise words between two triggers are cause-side
    and words after the final trigger effect-side."""
    triggers = np.flatnonzero(detect_triggers(tokens, lexicon))
    roles = []
    for i, token in enumerate(tokens):
        known = lexicon.role_of(token)
        if known is not None:
            roles.append(known)
        elif not is_word(token) or lexicon.is_trigger(token) or len(triggers) == 0:
            roles.append("irrelevant")
        elif i > triggers[-1]:
            roles.append("effect")
        elif triggers[0] < i:
            roles.append("cause")
        else:
            roles.append("irrelevant")
    return tuple(roles)


def segment_role_oracle(tokens: Sequence[str], lexicon: TriggerLexicon) -> tuple:
    """Left-to-right recount of the segment rule, kept separate from assign_roles."""
    words = [t.lower() for t in tokens]
    total = sum(1 for t in tokens if not is_special(t) and t.lower() in lexicon.triggers)
    seen, roles = 0, []
    for token, word in zip(tokens, words):
        trigger = not is_special(token) and word in lexicon.triggers
        if not is_special(token) and word in lexicon.role_dict:
            roles.append(lexicon.role_dict[word])
        elif is_special(token) or trigger or not word[:1].isalnum() or seen == 0:
            roles.append("irrelevant")
        else:
            roles.append("effect" if seen == total else "cause")
        seen += trigger
    return tuple(roles)


def encode_text(question: str, lexicon: TriggerLexicon, vocab: Vocabulary,
                max_tokens: Optional[int] = None) -> CausalText:
    """Wrap, tokenize with the lexicon protected, then detect triggers and assign roles.

    max_tokens bounds the wrapped sequence, tags included.
    """
    tokens = tuple(tokenize(wrap_causal_intent(question), lexicon))
    if max_tokens is not None and len(tokens) > max_tokens:
        raise InvalidArgumentError(f"question has {len(tokens)} tokens with tags, budget is {max_tokens}")
    return CausalText(tokens=tokens, ids=vocab.encode(tokens), c_mask=detect_triggers(tokens, lexicon),
                      roles=assign_roles(tokens, lexicon))


# =============================================================================
# Position encodings
# =============================================================================

def sinusoidal_positions(count: int, dim: int) -> np.ndarray:
    positions = np.arange(count, dtype=np.float64)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (np.arange(dim) // 2)) / dim)
    angles = positions * rates
    return np.where(np.arange(dim) % 2 == 0, np.sin(angles), np.cos(angles))


def compose_position_encoding(position: int, role: str, roles: RoleEmbedding,
                              base: Union[str, np.ndarray] = "sinusoidal") -> np.ndarray:
    if role not in ROLE_CODES:
        raise InvalidArgumentError(f"unknown role {role!r}")
    if isinstance(base, str):
        if base != "sinusoidal":
            raise InvalidArgumentError(f"unknown positional scheme {base!r}")
        base = sinusoidal_positions(position + 1, roles.dim)[position]
    base = np.asarray(base, dtype=np.float64)
    if base.shape != (roles.dim,):
        raise InvalidArgumentError(f"position vector {base.shape} vs role dim {roles.dim}")
    return base + roles.vector(role)


def compose_position_encodings(text: CausalText, roles: RoleEmbedding) -> Tensor:
    """(n, dim) sinusoidal positions plus role vectors, differentiable in the roles."""
    positions = Tensor(sinusoidal_positions(len(text), roles.dim))
    return positions + nt.take(roles.table(), text.role_codes)


# =============================================================================
# Pretext task and dropout
# =============================================================================

def mask_triggers_pretext(text: CausalText, p: float, seed: int) -> tuple[CausalText, np.ndarray]:
    """Replace each trigger by [MASK] with probability p.

    Returns the masked text and the original role codes at its masked
    positions. Masked positions carry the irrelevant role so the role vectors
    do not leak the labels; c_mask is kept.
    """
    if not 0.0 <= p <= 1.0:
        raise InvalidArgumentError(f"mask probability must lie in [0, 1], got {p}")
    draws = np.random.default_rng(seed).random(len(text))
    chosen = (text.c_mask == 1) & (draws < p)
    if not chosen.any():
        return text, np.zeros(0, dtype=np.int64)
    tokens = tuple("[MASK]" if c else t for t, c in zip(text.tokens, chosen))
    roles = tuple("irrelevant" if c else r for r, c in zip(text.roles, chosen))
    labels = text.role_codes[chosen]
    masked = replace(text, tokens=tokens, ids=np.where(chosen, MASK_ID, text.ids), roles=roles,
                     embeddings=None)
    return masked, labels


def causal_cls_loss(logits, labels) -> Tensor:
    """Mean cross-entropy over masked positions; zero positions give 0."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return Tensor(0.0)
    if logits.shape != (len(labels), len(ROLES)):
        raise InvalidArgumentError(f"logits {logits.shape} for {len(labels)} labels")
    return nt.cross_entropy(logits, labels)


def dropout_preserving_triggers(embeddings, c_mask, p: float, seed: int) -> Tensor:
    """Inverted dropout on non-trigger rows; trigger rows pass through unscaled."""
    if not 0.0 <= p < 1.0:
        raise InvalidArgumentError(f"dropout probability must lie in [0, 1), got {p}")
    embeddings = as_tensor(embeddings)
    c_mask = np.asarray(c_mask, dtype=bool)
    if embeddings.ndim != 2 or c_mask.shape != (embeddings.shape[0],):
        raise InvalidArgumentError(f"embeddings {embeddings.shape} vs c_mask {c_mask.shape}")
    if p == 0.0:
        return embeddings
    keep = np.random.default_rng(seed).random(embeddings.shape) >= p
    scale = keep / (1.0 - p)
    scale[c_mask] = 1.0
    return embeddings * Tensor(scale)

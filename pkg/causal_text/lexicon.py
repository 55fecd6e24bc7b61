"""Trigger lexicon, tokenizer, vocabulary and the templated causal corpus."""

import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from numeric.errors import InvalidArgumentError, NotFoundError

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[MASK]", "[CAUSE]", "[EFFECT]")
PAD_ID, UNK_ID, MASK_ID, CAUSE_ID, EFFECT_ID = range(len(SPECIAL_TOKENS))

ROLES = ("irrelevant", "cause", "effect")

DEFAULT_TRIGGERS = frozenset({"because", "cause", "causes", "so", "therefore", "since", "leads", "why"})

DEFAULT_ROLE_DICT = {
    "because": "cause", "since": "cause", "cause": "cause", "causes": "cause", "why": "cause",
    "so": "effect", "therefore": "effect", "leads": "effect",
    "fire": "cause", "source": "cause", "heat": "cause", "heating": "cause",
    "boiling": "effect", "steam": "effect", "steaming": "effect", "hidden": "effect", "broken": "effect",
}

_TOKEN_RE = re.compile(r"\[[A-Z]+\]|\w+(?:'\w+)?|[^\w\s]")
_SPECIAL_RE = re.compile(r"\[[A-Z]+\]")
_NO_SPACE_BEFORE = frozenset(".,?!;:)")


def is_special(token: str) -> bool:
    return bool(_SPECIAL_RE.fullmatch(token))


def is_word(token: str) -> bool:
    return not is_special(token) and token[:1].isalnum()


# =============================================================================
# Lexicon
# =============================================================================

@dataclass(frozen=True, eq=False)
class TriggerLexicon:
    """Trigger words plus a word -> role dictionary; lookups ignore case."""
    triggers: frozenset
    role_dict: dict = field(default_factory=dict)

    def __post_init__(self):
        triggers = frozenset(t.lower() for t in self.triggers)
        if not triggers:
            raise InvalidArgumentError("trigger lexicon is empty")
        role_dict = {w.lower(): r for w, r in self.role_dict.items()}
        bad = {r for r in role_dict.values() if r not in ROLES}
        if bad:
            raise InvalidArgumentError(f"unknown roles in dictionary: {sorted(bad)}")
        object.__setattr__(self, "triggers", triggers)
        object.__setattr__(self, "role_dict", role_dict)

    @classmethod
    def default(cls) -> "TriggerLexicon":
        return cls(triggers=DEFAULT_TRIGGERS, role_dict=dict(DEFAULT_ROLE_DICT))

    @classmethod
    def load(cls, path) -> "TriggerLexicon":
        """One trigger per line; `word<TAB>role` lines feed the role dictionary."""
        path = Path(path)
        if not path.exists():
            raise NotFoundError(f"lexicon file {path} not found")
        triggers, role_dict = set(), {}
        for n, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "\t" in line:
                word, role = (part.strip() for part in line.split("\t", 1))
                if role not in ROLES:
                    raise InvalidArgumentError(f"{path}:{n}: unknown role {role!r}")
                role_dict[word] = role
            else:
                triggers.add(line)
        return cls(triggers=frozenset(triggers), role_dict=role_dict)

    def is_trigger(self, token: str) -> bool:
        return not is_special(token) and token.lower() in self.triggers

    def role_of(self, token: str):
        return None if is_special(token) else self.role_dict.get(token.lower())

    @property
    def protected(self) -> frozenset:
        """Entries the tokenizer must keep whole."""
        return self.triggers | frozenset(self.role_dict)


# =============================================================================
# Tokenizer
# =============================================================================

@lru_cache(maxsize=32)
def _protected_re(entries: frozenset) -> re.Pattern:
    # longest first so "self-heating" wins over "self"
    words = sorted((e for e in entries if e), key=lambda e: (-len(e), e))
    alternatives = "|".join(rf"(?<!\w){re.escape(w)}(?!\w)" for w in words)
    return re.compile(rf"\[[A-Z]+\]|{alternatives}|" + _TOKEN_RE.pattern, re.IGNORECASE)


def tokenize(text: str, lexicon: Optional[TriggerLexicon] = None) -> list[str]:
    """Split on whitespace and punctuation.

    Special tags and, when a lexicon is given, its triggers and dictionary
    entries are matched first (longest first, ignoring case) and stay whole
    even when they contain punctuation or spaces.
    """
    if lexicon is None:
        return _TOKEN_RE.findall(text)
    return _protected_re(lexicon.protected).findall(text)


def detokenize(tokens: Sequence[str]) -> str:
    out = ""
    for token in tokens:
        if out and token not in _NO_SPACE_BEFORE:
            out += " "
        out += token
    return out


def wrap_causal_intent(question: str) -> str:
    return f"[CAUSE] {question} [EFFECT]"


# =============================================================================
# Vocabulary
# =============================================================================

class Vocabulary:
    """Lower-cased word ids; the special tokens always take ids 0..4."""

    def __init__(self, words: Iterable[str] = ()):
        self.tokens = list(SPECIAL_TOKENS)
        for word in sorted({w.lower() for w in words if not is_special(w)}):
            self.tokens.append(word)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str], lexicon: Optional[TriggerLexicon] = None) -> "Vocabulary":
        return cls(tok for text in texts for tok in tokenize(text, lexicon))

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise InvalidArgumentError("vocabulary must start with the special tokens")
        vocab = cls()
        vocab.tokens = list(tokens)
        vocab.index = {tok: i for i, tok in enumerate(vocab.tokens)}
        return vocab

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        key = token if is_special(token) else token.lower()
        return self.index.get(key, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.id_of(t) for t in tokens], dtype=np.int64)


# =============================================================================
# Causal corpus
# =============================================================================

_CAUSE_PHRASES = ("the fire source", "heat from the stove", "the heating coil", "a strong wind",
                  "the red square", "the falling rain", "a loose wire")
_EFFECT_PHRASES = ("the water is boiling", "the kettle is steaming", "the circle is hidden",
                   "the glass is broken", "the lights flicker", "the road is wet")
_TEMPLATES = ("Because {c}, so {e}.", "{E} because {c}.", "Since {c}, therefore {e}.",
              "{C} causes the change, so {e}.", "Why {e}? Because {c}.", "{C} leads to this, so {e}.")


def causal_corpus(n: int, seed: int = 0) -> list[str]:
    """n templated causal sentences, deterministic under seed."""
    rng = np.random.default_rng(seed)
    sentences = []
    for _ in range(n):
        template = _TEMPLATES[rng.integers(len(_TEMPLATES))]
        c = _CAUSE_PHRASES[rng.integers(len(_CAUSE_PHRASES))]
        e = _EFFECT_PHRASES[rng.integers(len(_EFFECT_PHRASES))]
        sentences.append(template.format(c=c, e=e, C=c[0].upper() + c[1:], E=e[0].upper() + e[1:]))
    return sentences

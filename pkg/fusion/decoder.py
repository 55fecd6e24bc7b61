"""Residual answer decoder with intervention layers in its last blocks."""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from numeric import tensor as nt
from numeric.errors import ConfigError, InvalidArgumentError, UninitializedError
from numeric.tensor import Tensor, as_tensor

from .layers import (ExpertOutput, FusedRepresentation, Params, expert_forward, init_expert_params,
                     init_weight, init_zeros)

logger = logging.getLogger("gestalt.fusion")

BOS, EOS = "<bos>", "<eos>"


@dataclass(frozen=True)
class DecoderConfig:
    width: int = 128
    blocks: int = 4
    intervention_blocks: tuple = (3, 4)
    max_answer_len: int = 4

    def __post_init__(self):
        if self.width < 1 or self.blocks < 1 or self.max_answer_len < 1:
            raise ConfigError("decoder width, blocks and max_answer_len must be positive")
        last_two = {self.blocks - 1, self.blocks}
        if not set(self.intervention_blocks) <= last_two:
            raise ConfigError(f"intervention layers may only sit in blocks {sorted(last_two)}, "
                              f"got {list(self.intervention_blocks)}")


@dataclass
class InterventionState:
    """Strengthened causal dependencies: text-token gains, stage-2 region gains
    and the decoder's intervention-layer channel gains."""
    token_gain: dict = field(default_factory=dict)  # question vocab id -> gain
    channel_gain: Optional[np.ndarray] = None  # (len(intervention_blocks), width)
    region_gain: dict = field(default_factory=dict)  # (scene key, region id) -> gain on its causal weight

    @classmethod
    def fresh(cls, config: DecoderConfig) -> "InterventionState":
        return cls(channel_gain=np.ones((len(config.intervention_blocks), config.width)))

    def token_gains(self, ids: Sequence[int]) -> np.ndarray:
        return np.array([self.token_gain.get(int(i), 1.0) for i in ids], dtype=np.float64)

    def region_gains(self, scene, count: int) -> np.ndarray:
        return np.array([self.region_gain.get((scene, r), 1.0) for r in range(count)], dtype=np.float64)


class AnswerDecoder:
    """Greedy decoder over a small answer vocabulary.

    Each step sees the fused vector, the previous answer token and its step
    position; blocks listed in intervention_blocks multiply their output by
    per-channel gains when interventions are enabled.
    """

    def __init__(self, vocab: Sequence[str], config: DecoderConfig = DecoderConfig(),
                 params: Optional[Params] = None):
        self.vocab = list(vocab)
        if not self.vocab:
            raise InvalidArgumentError("answer vocabulary is empty")
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.config = config
        self.params = params
        self.interventions_enabled = True

    @property
    def eos_id(self) -> Optional[int]:
        return self.index.get(EOS)

    @property
    def bos_row(self) -> int:
        return len(self.vocab)  # extra embedding row for the start symbol

    @staticmethod
    def init_params(rng: np.random.Generator, vocab_size: int, fused_width: int,
                    config: DecoderConfig, expert_hidden: int = 64) -> Params:
        w = config.width
        params = {
            "decoder.w_in": init_weight(rng, (fused_width, w), "decoder.w_in"),
            "decoder.answer_embed": init_weight(rng, (vocab_size + 1, w), "decoder.answer_embed", scale=0.1),
            "decoder.step_embed": init_weight(rng, (config.max_answer_len, w), "decoder.step_embed", scale=0.1),
        }
        for b in range(1, config.blocks + 1):
            params[f"decoder.block{b}.w"] = init_weight(rng, (w, w), f"decoder.block{b}.w", scale=0.5 / np.sqrt(w))
            params[f"decoder.block{b}.b"] = init_zeros((w,), f"decoder.block{b}.b")
        params.update(init_expert_params(rng, w, expert_hidden, vocab_size))
        return params

    def _require_params(self) -> Params:
        if self.params is None:
            raise UninitializedError("decoder parameters are not initialized or loaded")
        return self.params

    def hidden(self, mixed: Tensor, prev_rows: Sequence[int], state: Optional[InterventionState] = None,
               trace: Optional[list] = None) -> Tensor:
        """(steps, width) top-block activations for the given previous-token rows."""
        params = self._require_params()
        steps = len(prev_rows)
        if steps > self.config.max_answer_len:
            raise InvalidArgumentError(f"{steps} steps exceed max_answer_len {self.config.max_answer_len}")
        h = (nt.take(params["decoder.answer_embed"], np.asarray(prev_rows))
             + nt.take(params["decoder.step_embed"], np.arange(steps)))
        h = h + as_tensor(mixed) @ params["decoder.w_in"]
        for b in range(1, self.config.blocks + 1):
            h = h + nt.tanh(h @ params[f"decoder.block{b}.w"] + params[f"decoder.block{b}.b"])
            if b in self.config.intervention_blocks:
                if trace is not None:
                    trace.append(h.data)
                if self.interventions_enabled and state is not None:
                    slot = self.config.intervention_blocks.index(b)
                    h = h * Tensor(state.channel_gain[slot])
        return h

    def logits(self, fused: FusedRepresentation, prev_rows: Sequence[int],
               state: Optional[InterventionState] = None, trace: Optional[list] = None,
               force_gate: Optional[float] = None) -> ExpertOutput:
        h = self.hidden(fused.mixed, prev_rows, state, trace)
        return expert_forward(h, self._require_params(), force_gate=force_gate)

    def teacher_rows(self, answer_ids: Sequence[int]) -> list:
        return [self.bos_row] + [int(i) for i in answer_ids[:-1]]

    def token_probabilities(self, fused: FusedRepresentation, answer_ids: Sequence[int],
                            state: Optional[InterventionState] = None, trace: Optional[list] = None
                            ) -> np.ndarray:
        """Teacher-forced probability of each answer token."""
        if not answer_ids:
            return np.zeros(0)
        out = self.logits(fused, self.teacher_rows(answer_ids), state, trace)
        probs = np.exp(nt.log_softmax(out.mixed_logits).data)
        return probs[np.arange(len(answer_ids)), np.asarray(answer_ids)]

    def loss(self, fused: FusedRepresentation, answer_ids: Sequence[int],
             state: Optional[InterventionState] = None) -> Tensor:
        out = self.logits(fused, self.teacher_rows(answer_ids), state)
        return nt.cross_entropy(out.mixed_logits, answer_ids)


def decode_answer(fused: FusedRepresentation, decoder: AnswerDecoder, max_len: Optional[int] = None,
                  state: Optional[InterventionState] = None) -> list:
    """Greedy decoding; stops at <eos> (not included) or after max_len tokens.

    A vocabulary without <eos> stops as soon as the argmax repeats the previous
    token, so a one-word vocabulary answers with that word once.
    """
    decoder._require_params()
    max_len = decoder.config.max_answer_len if max_len is None else min(max_len, decoder.config.max_answer_len)
    rows = [decoder.bos_row]
    emitted = []
    for _ in range(max_len):
        out = decoder.logits(fused, rows, state)
        token = int(np.argmax(out.mixed_logits.data[-1]))
        if token == decoder.eos_id:
            break
        if decoder.eos_id is None and emitted and token == emitted[-1]:
            break
        emitted.append(token)
        rows.append(token)
    return emitted

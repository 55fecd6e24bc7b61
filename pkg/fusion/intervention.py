"""Counterfactual interventions, heat maps and dependency strengthening."""

import logging
from dataclasses import dataclass
from typing import Literal, Optional, Protocol

import numpy as np

from numeric.errors import InvalidArgumentError, NotFoundError
from regions.graph import RegionGraph

from .decoder import AnswerDecoder, InterventionState, decode_answer
from .layers import FusedRepresentation

logger = logging.getLogger("gestalt.fusion")

InterventionKind = Literal["none", "mask_text_token", "delete_region"]


# =============================================================================
# Domain Types
# =============================================================================

@dataclass(frozen=True)
class InterventionSpec:
    kind: InterventionKind = "none"
    target: Optional[int] = None

    def __post_init__(self):
        if self.kind == "none":
            if self.target is not None:
                raise InvalidArgumentError("intervention 'none' takes no target")
        elif self.kind in ("mask_text_token", "delete_region"):
            if not isinstance(self.target, (int, np.integer)) or self.target < 0:
                raise InvalidArgumentError(f"{self.kind} needs a nonnegative integer target")
        else:
            raise InvalidArgumentError(f"unknown intervention kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "InterventionSpec":
        """Parse `none`, `delete_region:<id>` or `mask_text_token:<index>`."""
        kind, _, target = text.strip().partition(":")
        if kind == "none":
            return cls()
        try:
            return cls(kind=kind, target=int(target))
        except ValueError as e:
            raise InvalidArgumentError(f"bad intervention spec {text!r}") from e


@dataclass(frozen=True, eq=False)
class InterventionReport:
    spec: InterventionSpec
    answer_ids: tuple
    answer_tokens: tuple
    baseline_probs: np.ndarray
    intervened_probs: np.ndarray
    deltas: np.ndarray
    flagged: tuple  # answer-token positions with |delta| > threshold
    region_deltas: np.ndarray  # spatially attributed shift per region
    channel_shift: np.ndarray  # mean |activation change| per channel at the intervention layers
    grid_shape: tuple  # (height, width) of the graph the report was made on
    text_edit: Optional[dict] = None
    scene: Optional[int] = None  # key of the scene the regions belong to

    def __post_init__(self):
        if not (self.baseline_probs.shape == self.intervened_probs.shape == self.deltas.shape):
            raise InvalidArgumentError("probability arrays must share one shape")

    @property
    def total_shift(self) -> float:
        return float(self.deltas.sum())

    def to_dict(self) -> dict:
        return {
            "spec": {"kind": self.spec.kind, "target": self.spec.target},
            "answer_tokens": list(self.answer_tokens),
            "baseline_probs": self.baseline_probs.tolist(),
            "intervened_probs": self.intervened_probs.tolist(),
            "deltas": self.deltas.tolist(),
            "flagged": [self.answer_tokens[i] for i in self.flagged],
            "region_deltas": self.region_deltas.tolist(),
            "total_shift": self.total_shift,
            "text_edit": self.text_edit,
        }


class Intervenable(Protocol):
    decoder: AnswerDecoder

    def fuse(self, inputs, spec: InterventionSpec, state: Optional[InterventionState] = None
             ) -> FusedRepresentation: ...


# =============================================================================
# Intervention
# =============================================================================

def _check_target(inputs, spec: InterventionSpec):
    if spec.kind == "delete_region":
        inputs.graph.region(spec.target)
    elif spec.kind == "mask_text_token" and spec.target >= len(inputs.text):
        raise NotFoundError(f"token index {spec.target} outside a {len(inputs.text)}-token question")


def causal_intervention(model: Intervenable, inputs, spec: InterventionSpec, delta: float = 0.05,
                        state: Optional[InterventionState] = None) -> InterventionReport:
    """Re-score the baseline answer under a counterfactual edit.

    Baseline and intervened passes run sequentially over the same parameters;
    the answer tokens are teacher-forced in both so the deltas line up.
    """
    _check_target(inputs, spec)
    decoder = model.decoder
    baseline = model.fuse(inputs, InterventionSpec(), state)
    answer = decode_answer(baseline, decoder, state=state)
    if decoder.eos_id is not None and len(answer) < decoder.config.max_answer_len:
        answer.append(decoder.eos_id)

    base_trace, edit_trace = [], []
    base_probs = decoder.token_probabilities(baseline, answer, state, base_trace)
    intervened = model.fuse(inputs, spec, state)
    edit_probs = decoder.token_probabilities(intervened, answer, state, edit_trace)
    deltas = edit_probs - base_probs
    total = float(deltas.sum())

    n = len(inputs.graph)
    region_deltas = np.zeros(n)
    text_edit = None
    if spec.kind == "delete_region":
        region_deltas[spec.target] = total
    elif spec.kind == "mask_text_token":
        region_deltas = total * np.asarray(baseline.weights, dtype=np.float64)
        text_edit = {"position": spec.target, "token": inputs.text.tokens[spec.target],
                     "token_id": int(inputs.text.ids[spec.target]), "replacement": "[MASK]"}
    if base_trace:
        shift = np.mean([np.abs(e - b).mean(axis=0) for b, e in zip(base_trace, edit_trace)], axis=0)
    else:
        shift = np.zeros(decoder.config.width)

    flagged = tuple(int(i) for i in np.flatnonzero(np.abs(deltas) > delta))
    logger.debug(f"intervention {spec.kind}:{spec.target} total shift {total:+.4f}, {len(flagged)} flagged")
    return InterventionReport(
        spec=spec, answer_ids=tuple(answer), answer_tokens=tuple(decoder.vocab[i] for i in answer),
        baseline_probs=base_probs, intervened_probs=edit_probs, deltas=deltas, flagged=flagged,
        region_deltas=region_deltas, channel_shift=shift,
        grid_shape=(inputs.graph.height, inputs.graph.width), text_edit=text_edit,
        scene=getattr(inputs, "scene_key", None))


def intervention_heatmap(report: InterventionReport, graph: RegionGraph) -> np.ndarray:
    """Each region's pixels carry its attributed delta."""
    if len(report.region_deltas) != len(graph) or report.grid_shape != (graph.height, graph.width):
        raise InvalidArgumentError("report was produced on a different region graph")
    return report.region_deltas[graph.labels]


# =============================================================================
# Strengthening and explanation
# =============================================================================

def strengthen_dependencies(state: InterventionState, report: InterventionReport, factor: float = 1.1,
                            cap: float = 4.0, top_k: int = 8) -> list:
    """Scale flagged dependencies by factor, never beyond cap; returns what changed.

    The regions carrying the largest attributed shift get their stage-2 causal
    weight scaled for this scene; a masked token also gets its text gain scaled.
    """
    if not report.flagged or report.spec.kind == "none":
        return []
    changed = []
    if report.spec.kind == "mask_text_token":
        token_id = report.text_edit["token_id"]
        state.token_gain[token_id] = min(state.token_gain.get(token_id, 1.0) * factor, cap)
        changed.append(("token", token_id))
    magnitude = np.abs(report.region_deltas)
    for region in np.argsort(-magnitude, kind="stable")[:top_k]:
        if magnitude[region] == 0:
            break
        key = (report.scene, int(region))
        state.region_gain[key] = min(state.region_gain.get(key, 1.0) * factor, cap)
        changed.append(("region", int(region)))
    return changed


def explain(report: InterventionReport, entity_names: Optional[dict] = None) -> str:
    """Template causal-chain sentence for a report."""
    answer = " ".join(t for t in report.answer_tokens if not t.startswith("<"))
    shift = report.total_shift
    if report.spec.kind == "none" or not report.flagged:
        return f"The answer '{answer}' did not change noticeably under the intervention."
    if report.spec.kind == "delete_region":
        names = entity_names or {}
        subject = names.get(report.spec.target, f"region {report.spec.target}")
        return (f"The answer is '{answer}' because of the {subject}: removing it shifts the "
                f"answer probability by {shift:+.2f}.")
    word = report.text_edit["token"]
    return (f"The answer is '{answer}' because the question says '{word}': masking it shifts the "
            f"answer probability by {shift:+.2f}.")

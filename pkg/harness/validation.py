"""Acceptance checks run by `main.py validate`.

Each case computes a few metrics and compares them against expected ranges,
the same shape as a rubric validation table.
"""

import logging
import statistics
import time

import numpy as np
from scipy import ndimage
from skimage.draw import circle_perimeter
from skimage.morphology import skeletonize

from causal_text import (
    CausalText,
    RoleEmbedding,
    TriggerLexicon,
    Vocabulary,
    assign_roles,
    causal_corpus,
    compose_position_encodings,
    detect_triggers,
    dropout_preserving_triggers,
    encode_text,
    segment_role_oracle,
    tokenize,
    wrap_causal_intent,
)
from fusion import (
    AnswerDecoder,
    DecoderConfig,
    FusedRepresentation,
    InterventionSpec,
    InterventionState,
    causal_intervention,
    expert_forward,
    fuse_stage1,
    fuse_stage2,
    init_expert_params,
    init_fusion_params,
    text_causal_weights,
)
from numeric import tensor as nt
from numeric.tensor import Tensor, grad_check
from tower import closure_loss, combine_layers, complete_contour, soft_closure_loss

from .config import BenchConfig
from .model import VQAModel, lexicon_for, prepare_inputs
from .scenes import SceneSpec, generate_sample, question_vocabulary

logger = logging.getLogger("gestalt.harness")

GRAD_TOLERANCE = 1e-4
GRAD_EPS = 1e-5
GRAD_FLOOR = 1e-8
MODEL_EPS = 1e-6  # relu kinks in the conv extractor sit closer than GRAD_EPS
MODEL_DIRECTIONS = 2


# =============================================================================
# Gradient suite
# =============================================================================

def _gate_check(rng) -> float:
    maps = Tensor(rng.random((4, 7)))
    disabled = ("closure",) if rng.random() < 0.5 else ()
    r = rng.normal(size=7)
    return grad_check(lambda x: nt.sum(combine_layers(maps, x, disabled) * Tensor(r)),
                      Tensor(rng.normal(size=4)), GRAD_EPS, GRAD_FLOOR)


def _closure_check(rng) -> float:
    mask = rng.random(36) < 0.5
    return grad_check(lambda x: soft_closure_loss(x, mask), Tensor(rng.uniform(0.05, 0.95, 36)),
                      GRAD_EPS, GRAD_FLOOR)


def _role_check(rng, text: CausalText) -> float:
    e_effect = Tensor(rng.normal(size=6))
    r = rng.normal(size=(len(text), 6))
    return grad_check(lambda x: nt.sum(compose_position_encodings(text, RoleEmbedding(x, e_effect)) * Tensor(r)),
                      Tensor(rng.normal(size=6)), GRAD_EPS, GRAD_FLOOR)


def _fusion_check(rng) -> float:
    params = init_fusion_params(rng, 4, 6)
    text_emb, feats = rng.normal(size=(5, 6)), rng.normal(size=(7, 4))
    prior, c_mask = rng.dirichlet(np.ones(7)), np.array([0, 1, 0, 0, 1])
    r = rng.normal(size=6)

    def f(x):
        joint = fuse_stage1(text_emb, prior, feats, {**params, "fusion.w_region": x}, c_mask, prior_gain=7.0)
        fused = fuse_stage2(joint, text_causal_weights(joint), params)
        return nt.sum(fused.mixed * Tensor(r))

    return grad_check(f, params["fusion.w_region"], GRAD_EPS, GRAD_FLOOR)


def _expert_check(rng) -> float:
    params = init_expert_params(rng, 8, 8, 5)
    hidden = rng.normal(size=(3, 8))
    r = rng.normal(size=(3, 5))
    return grad_check(lambda x: nt.sum(expert_forward(hidden, {**params, "expert.w_trunk": x}).mixed_logits
                                       * Tensor(r)),
                      params["expert.w_trunk"], GRAD_EPS, GRAD_FLOOR)


def _decoder_check(rng) -> float:
    config = DecoderConfig(width=8, blocks=2, intervention_blocks=(1, 2), max_answer_len=3)
    params = AnswerDecoder.init_params(rng, 4, 6, config, expert_hidden=8)
    decoder = AnswerDecoder(["<eos>", "a", "b", "c"], config)
    state = InterventionState(channel_gain=rng.uniform(0.8, 1.5, size=(2, 8)))
    fused = FusedRepresentation(vectors=Tensor(rng.normal(size=(3, 6))), text_summary=Tensor(rng.normal(size=6)),
                                dims=6, mixed=Tensor(rng.normal(size=6)))

    def f(x):
        decoder.params = {**params, "decoder.block2.w": x}
        return decoder.loss(fused, [1, 2, 0], state)

    return grad_check(f, params["decoder.block2.w"], GRAD_EPS, GRAD_FLOOR)


def parameter_check(model: VQAModel, inputs, name: str, rng) -> float:
    """Directional check of the full training loss along a random unit step in one parameter."""
    original = model.params[name]
    direction = rng.normal(size=original.shape)
    direction /= np.linalg.norm(direction)

    def f(t):
        model.params[name] = Tensor(original.data) + t * Tensor(direction)
        try:
            return model.loss(inputs, step_seed=0)[0]
        finally:
            model.params[name] = original

    return grad_check(f, Tensor(0.0), MODEL_EPS, GRAD_FLOOR)


def model_gradients(config: BenchConfig, directions: int = MODEL_DIRECTIONS) -> dict:
    """Worst relative error per named parameter of a freshly initialized model."""
    model, inputs = _fresh_scene(config)
    worst = {}
    for name in sorted(model.params):
        rng = np.random.default_rng([config.train.seed, len(worst)])
        worst[name] = max(parameter_check(model, inputs, name, rng) for _ in range(directions))
    return worst


def gradient_suite(config: BenchConfig, seeds: int = 10) -> dict:
    text = encode_text("why is the red circle hidden?", TriggerLexicon.default(), question_vocabulary())
    checks = {"gate": _gate_check, "closure_loss": _closure_check, "fusion": _fusion_check,
              "experts": _expert_check, "decoder": _decoder_check,
              "role_embeddings": lambda rng: _role_check(rng, text)}
    started = time.perf_counter()
    worst = {name: 0.0 for name in checks}
    for seed in range(seeds):
        for name, check in checks.items():
            worst[name] = max(worst[name], check(np.random.default_rng([seed, len(name)])))
    metrics = {f"{name}_rel_err": err for name, err in worst.items()}
    per_param = model_gradients(config)
    name, err = max(per_param.items(), key=lambda kv: kv[1])
    logger.info(f"model gradients: {len(per_param)} parameters, worst {name} at {err:.2e}")
    metrics["model_rel_err"] = err
    metrics["model_parameters"] = len(per_param)
    metrics["seconds"] = time.perf_counter() - started
    return metrics


# =============================================================================
# Closure and IoU
# =============================================================================

def broken_circle(center: tuple, radius: int, gap_start: float, gap_degrees: float, size: int = 64) -> np.ndarray:
    """Thin circle outline with an arc of gap_degrees removed."""
    edges = np.zeros((size, size), dtype=bool)
    rr, cc = circle_perimeter(center[1], center[0], radius, shape=edges.shape)
    angles = np.degrees(np.arctan2(rr - center[1], cc - center[0])) % 360.0
    keep = ((angles - gap_start) % 360.0) >= gap_degrees
    edges[rr[keep], cc[keep]] = True
    return skeletonize(edges)


def closure_oracle(config: BenchConfig, cases: int = 20, size: int = 64) -> dict:
    """Complete broken circles with the configured bridge_gap_max and score them against the discs.

    Radii stay in 6..10 px so a 20 degree gap leaves at most 5 px between the chain ends.
    """
    rng = np.random.default_rng(7)
    ious, closed = [], 0
    for _ in range(cases):
        radius = int(rng.integers(6, 11))
        center = (int(rng.integers(radius + 2, size - radius - 2)), int(rng.integers(radius + 2, size - radius - 2)))
        edges = broken_circle(center, radius, float(rng.uniform(0, 360)), float(rng.uniform(5.0, 20.0)), size)
        contours = complete_contour(edges, bridge_gap_max=config.tower.bridge_gap_max)
        filled = contours.filled_mask()
        closed += int(any(contours.closed_flags))
        truth = ndimage.binary_fill_holes(broken_circle(center, radius, 0.0, 0.0, size))
        ious.append((filled & truth).sum() / (filled | truth).sum())
    return {"min_iou": float(min(ious)), "closed_fraction": closed / cases}


def iou_identities(config: BenchConfig) -> dict:
    m = np.zeros((8, 8), dtype=bool)
    m[2:6, 2:6] = True
    other = np.zeros((8, 8), dtype=bool)
    other[0:2, 6:8] = True
    square = np.zeros((4, 4), dtype=bool)
    square[0:2, 0:2] = True
    shifted = np.roll(square, 1, axis=1).astype(np.float64)
    theta = config.tower.prior_threshold
    return {"self_loss": closure_loss(m.astype(float), m, theta),
            "disjoint_loss": closure_loss(other.astype(float), m, theta),
            "shift_error": abs(closure_loss(shifted, square, theta) - (1 - 1 / 3))}


# =============================================================================
# Causal text
# =============================================================================

def causal_text_exactness(config: BenchConfig, sentences: int = 200, draws: int = 10_000) -> dict:
    lexicon = lexicon_for(config)
    corpus = causal_corpus(sentences, seed=config.train.seed)
    vocab = Vocabulary.build(corpus, lexicon)
    trigger_hits = role_hits = 0
    for sentence in corpus:
        tokens = tokenize(wrap_causal_intent(sentence), lexicon)
        expected_mask = np.array([int(lexicon.is_trigger(t)) for t in tokens])
        trigger_hits += int(np.array_equal(detect_triggers(tokens, lexicon), expected_mask))
        role_hits += int(assign_roles(tokens, lexicon) == segment_role_oracle(tokens, lexicon))

    text = encode_text(corpus[0], lexicon, vocab)
    emb = np.random.default_rng(0).normal(size=(len(text), 16))
    rows = text.c_mask.astype(bool)
    identical = sum(
        np.array_equal(dropout_preserving_triggers(emb, text.c_mask, config.text.dropout_p or 0.1, seed).data[rows],
                       emb[rows])
        for seed in range(draws))
    return {"trigger_accuracy": trigger_hits / sentences, "role_accuracy": role_hits / sentences,
            "preserved_fraction": identical / draws}


# =============================================================================
# Interventions
# =============================================================================

def _fresh_scene(config: BenchConfig):
    sample = generate_sample(config.train.seed, SceneSpec.from_config(config.data))
    model = VQAModel(config)
    inputs = prepare_inputs(sample, config, lexicon_for(config), model.question_vocab, model.answer_index)
    return model, inputs


def intervention_null(config: BenchConfig) -> dict:
    model, inputs = _fresh_scene(config)
    report = causal_intervention(model, inputs, InterventionSpec(), state=model.state)
    return {"max_abs_delta": float(np.abs(report.deltas).max(initial=0.0)),
            "max_region_delta": float(np.abs(report.region_deltas).max(initial=0.0))}


def intervention_overhead(model: VQAModel, inputs, trials: int = 200) -> float:
    """Median forward time with intervention layers enabled over disabled, interleaved."""
    rows = model.decoder.teacher_rows(list(inputs.answer_ids))
    timings = {True: [], False: []}
    for trial in range(2 * trials):
        enabled = trial % 2 == 0
        model.decoder.interventions_enabled = enabled
        started = time.perf_counter()
        fused, _ = model.forward(inputs, state=model.state)
        model.decoder.logits(fused, rows, model.state)
        timings[enabled].append(time.perf_counter() - started)
    model.decoder.interventions_enabled = True
    return statistics.median(timings[True]) / statistics.median(timings[False])


def overhead_budget(config: BenchConfig) -> dict:
    model, inputs = _fresh_scene(config)
    return {"median_ratio": intervention_overhead(model, inputs)}


# =============================================================================
# Runner
# =============================================================================

VALIDATION_CASES = [
    {
        "name": "gradient_suite",
        "description": "Finite-difference checks of every trainable module and every named model parameter",
        "run": gradient_suite,
        "expected_ranges": {
            "gate_rel_err": (0.0, GRAD_TOLERANCE),
            "closure_loss_rel_err": (0.0, GRAD_TOLERANCE),
            "fusion_rel_err": (0.0, GRAD_TOLERANCE),
            "experts_rel_err": (0.0, GRAD_TOLERANCE),
            "decoder_rel_err": (0.0, GRAD_TOLERANCE),
            "role_embeddings_rel_err": (0.0, GRAD_TOLERANCE),
            "model_rel_err": (0.0, GRAD_TOLERANCE),
            "model_parameters": (1, float("inf")),
            "seconds": (0.0, 60.0),
        },
    },
    {
        "name": "closure_oracle",
        "description": "Broken circles with gaps up to 20 degrees close under the configured bridge_gap_max",
        "run": closure_oracle,
        "expected_ranges": {"min_iou": (0.95, 1.0), "closed_fraction": (1.0, 1.0)},
    },
    {
        "name": "iou_identities",
        "description": "Closure loss on identical, disjoint and one-pixel-shifted masks",
        "run": iou_identities,
        "expected_ranges": {"self_loss": (0.0, 0.0), "disjoint_loss": (1.0, 1.0), "shift_error": (0.0, 0.0)},
    },
    {
        "name": "causal_text_exactness",
        "description": "Triggers and roles match the lexicon oracles; trigger rows survive dropout",
        "run": causal_text_exactness,
        "expected_ranges": {"trigger_accuracy": (1.0, 1.0), "role_accuracy": (1.0, 1.0),
                            "preserved_fraction": (1.0, 1.0)},
    },
    {
        "name": "intervention_null",
        "description": "A 'none' intervention leaves every probability untouched",
        "run": intervention_null,
        "expected_ranges": {"max_abs_delta": (0.0, 0.0), "max_region_delta": (0.0, 0.0)},
    },
    {
        "name": "overhead_budget",
        "description": "Intervention layers cost at most 5% of a forward pass",
        "run": overhead_budget,
        "expected_ranges": {"median_ratio": (0.0, 1.05)},
    },
]


def run_validation(config: BenchConfig, cases=None) -> dict:
    """Run the cases; returns {"passed", "failed", "cases"} with per-metric verdicts."""
    results = {"passed": 0, "failed": 0, "cases": []}
    for case in cases or VALIDATION_CASES:
        metrics = case["run"](config)
        checked, case_passed = {}, True
        for metric, (low, high) in case["expected_ranges"].items():
            actual = metrics[metric]
            ok = low <= actual <= high
            checked[metric] = {"actual": actual, "expected_range": (low, high), "passed": ok}
            case_passed &= ok
        results["passed" if case_passed else "failed"] += 1
        results["cases"].append({"name": case["name"], "description": case["description"],
                                 "passed": case_passed, "metrics": checked})
        logger.info(f"validation {case['name']}: {'passed' if case_passed else 'FAILED'}")
    return results

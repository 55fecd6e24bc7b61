"""Harness - synthetic scenes, model assembly, training, evaluation and ablation."""

from .config import FAMILIES, VARIANTS, BenchConfig, config_hash, load_config
from .model import SceneInputs, VQAModel, layer_breakdown, lexicon_for, prepare_inputs
from .scenes import (
    QAPair,
    Sample,
    SceneSpec,
    SyntheticScene,
    answer_question,
    answer_vocabulary,
    build_dataset,
    check_oracle,
    generate_question,
    generate_sample,
    generate_scene,
    geometry_relations,
    mirror_scene,
    question_vocabulary,
    split_seeds,
)
from .training import (
    AblationReport,
    PreparedData,
    TrainResult,
    ablate,
    evaluate,
    majority_baseline,
    prepare_data,
    sign_test,
    train,
)
from .validation import VALIDATION_CASES, run_validation

__all__ = [
    "FAMILIES",
    "VALIDATION_CASES",
    "VARIANTS",
    "AblationReport",
    "BenchConfig",
    "PreparedData",
    "QAPair",
    "Sample",
    "SceneInputs",
    "SceneSpec",
    "SyntheticScene",
    "TrainResult",
    "VQAModel",
    "ablate",
    "answer_question",
    "answer_vocabulary",
    "build_dataset",
    "check_oracle",
    "config_hash",
    "evaluate",
    "generate_question",
    "generate_sample",
    "generate_scene",
    "geometry_relations",
    "layer_breakdown",
    "lexicon_for",
    "load_config",
    "majority_baseline",
    "mirror_scene",
    "prepare_data",
    "prepare_inputs",
    "question_vocabulary",
    "run_validation",
    "sign_test",
    "split_seeds",
    "train",
]

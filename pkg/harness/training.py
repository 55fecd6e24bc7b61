"""Training loop, evaluation tables and the paired variant ablation."""

import csv
import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import binomtest

from fusion import InterventionSpec, causal_intervention, strengthen_dependencies
from numeric import Adam, Tape, backward
from numeric.errors import InvalidArgumentError, NotFoundError, TrainingDivergedError

from .config import FAMILIES, VARIANTS, BenchConfig
from .model import SceneInputs, VQAModel, lexicon_for, prepare_inputs
from .scenes import SceneSpec, answer_vocabulary, build_dataset, question_vocabulary, split_seeds

logger = logging.getLogger("gestalt.harness")

REFERENCE = "gestalt_tower"
SIGN_ALPHA = 0.05
# variant -> (families, significance level or None for a sign-only check)
SIGN_CHECKS = {
    "dot_product_attention": (("containment", "occlusion", "path"), SIGN_ALPHA),
    "attention_weights_vs_causal_weights": (("causal_why",), None),
}


# =============================================================================
# Data
# =============================================================================

@dataclass(eq=False)
class PreparedData:
    train: list
    eval: list
    seed: int


def _write_csv(path: Path, fieldnames: list, rows: list):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def prepare_data(config: BenchConfig, seed: Optional[int] = None, include_train: bool = True) -> PreparedData:
    """Generate and segment the train/eval splits for one seed."""
    seed = config.train.seed if seed is None else seed
    data = config.data
    spec = SceneSpec.from_config(data)
    train_seeds, eval_seeds = split_seeds(seed, data.n_train, data.n_eval)
    n_train = data.n_train if include_train else 0
    samples = build_dataset(spec, list(train_seeds)[:n_train] + list(eval_seeds), data.workers)
    index = {t: i for i, t in enumerate(answer_vocabulary())}
    prepare = partial(prepare_inputs, config=config, lexicon=lexicon_for(config),
                      question_vocab=question_vocabulary(), answer_index=index)
    if data.workers > 1:
        with ProcessPoolExecutor(max_workers=data.workers) as pool:
            inputs = list(pool.map(prepare, samples, chunksize=16))
    else:
        inputs = [prepare(s) for s in samples]
    logger.info(f"prepared {len(inputs)} scenes for seed {seed}")
    return PreparedData(train=inputs[:n_train], eval=inputs[n_train:], seed=seed)


def majority_baseline(train: Sequence, evaluation: Sequence) -> float:
    """Accuracy of always answering the most frequent training answer."""
    counts = defaultdict(int)
    for item in train:
        counts[item.qa.answer] += 1
    if not counts or not evaluation:
        return 0.0
    answer = min(counts, key=lambda a: (-counts[a], a))
    return float(np.mean([item.qa.answer == answer for item in evaluation]))


# =============================================================================
# Training
# =============================================================================

@dataclass(eq=False)
class TrainResult:
    model: VQAModel
    metrics: list
    checkpoint: Path
    majority: float
    strengthened: list = field(default_factory=list)


def _dump_diagnostic(out_dir: Path, epoch: int, step: int, parts: dict, model: VQAModel) -> Path:
    path = out_dir / "diagnostic.json"
    bad = sorted(name for name, t in model.params.items() if not np.isfinite(t.data).all())
    norms = {name: float(np.linalg.norm(t.data)) for name, t in sorted(model.params.items())
             if np.isfinite(t.data).all()}
    path.write_text(json.dumps({"epoch": epoch, "step": step, "loss_components": parts,
                                "non_finite_params": bad, "param_norms": norms}, indent=2, default=str))
    return path


def _strengthen(model: VQAModel, inputs: SceneInputs, step: int) -> list:
    """One counterfactual check on a training scene and the bounded gain update it implies."""
    f = model.config.fusion
    if step % 2:
        spec = InterventionSpec("delete_region", int(inputs.query))
    else:
        spec = InterventionSpec("mask_text_token", int(np.argmax(inputs.text.c_mask)) if inputs.text.c_mask.any()
                                else len(inputs.text) // 2)
    report = causal_intervention(model, inputs, spec, delta=f.delta, state=model.state)
    return strengthen_dependencies(model.state, report, factor=f.strengthen_factor, cap=f.strengthen_cap,
                                   top_k=f.strengthen_top_k)


def train(config: BenchConfig, out_dir: Union[str, Path], data: Optional[PreparedData] = None) -> TrainResult:
    """Minimize task + closure + causal-role losses; writes metrics.csv and checkpoint.npz."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = config.train
    data = data if data is not None else prepare_data(config)
    model = VQAModel(config)
    optimizer = Adam(model.params, lr=t.learning_rate)
    rng = np.random.default_rng(t.seed)
    weights = model.loss_weights()
    columns = ["epoch", "loss"] + [f"loss_{k}" for k in ("task", "closure", "causal")
                                   if weights[k] > 0 and not (k == "closure" and t.variant == "no_closure")]
    if "loss_closure" in columns:
        columns.insert(columns.index("loss_closure") + 1, "closure_hard")
    columns += ["eval_accuracy"]
    rows, strengthened, step = [], [], 0

    for epoch in range(1, t.epochs + 1):
        order = rng.permutation(len(data.train))
        sums, batches = defaultdict(float), 0
        for start in range(0, len(order), t.batch_size):
            batch = [data.train[i] for i in order[start:start + t.batch_size]]
            with Tape() as tape:
                total, parts_sum = None, defaultdict(float)
                for j, inputs in enumerate(batch):
                    loss, parts = model.loss(inputs, step_seed=t.seed * 1_000_003 + step * t.batch_size + j)
                    total = loss if total is None else total + loss
                    for k, v in parts.items():
                        parts_sum[k] += v / len(batch)
                batch_loss = total / float(len(batch))
            if not math.isfinite(batch_loss.item()):
                dump = _dump_diagnostic(out_dir, epoch, step, dict(parts_sum), model)
                raise TrainingDivergedError(f"loss became {batch_loss.item()} at epoch {epoch} step {step}", dump)
            optimizer.step(backward(tape, batch_loss))
            if not all(np.isfinite(p.data).all() for p in model.params.values()):
                dump = _dump_diagnostic(out_dir, epoch, step, dict(parts_sum), model)
                raise TrainingDivergedError(f"parameters became non-finite at epoch {epoch} step {step}", dump)
            step += 1
            batches += 1
            for k, v in parts_sum.items():
                sums[k] += v
            if t.intervention_every and step % t.intervention_every == 0:
                strengthened.extend(_strengthen(model, batch[0], step))

        row = {"epoch": epoch, "loss": f"{sums['total'] / batches:.6f}"}
        for k in ("task", "closure", "causal"):
            if f"loss_{k}" in columns:
                row[f"loss_{k}"] = f"{sums[k] / batches:.6f}"
        if "closure_hard" in columns:
            row["closure_hard"] = f"{sums['closure_hard'] / batches:.6f}"
        row["eval_accuracy"] = f"{evaluate(model, data.eval)['overall']:.6f}"
        rows.append(row)
        logger.info(f"epoch {epoch}/{t.epochs} loss {row['loss']} eval accuracy {row['eval_accuracy']}")

    _write_csv(out_dir / "metrics.csv", columns, rows)
    checkpoint = model.save(out_dir / "checkpoint.npz")
    return TrainResult(model=model, metrics=rows, checkpoint=checkpoint,
                       majority=majority_baseline(data.train, data.eval), strengthened=strengthened)


# =============================================================================
# Evaluation
# =============================================================================

def _family_counts(model, dataset: Sequence) -> dict:
    counts = defaultdict(lambda: [0, 0])
    for item in dataset:
        family = item.qa.family
        counts[family][0] += int(model.predict(item) == item.qa.answer)
        counts[family][1] += 1
    return counts


def _accuracy_table(counts: dict) -> dict:
    table = {f: counts[f][0] / counts[f][1] for f in FAMILIES if f in counts and counts[f][1]}
    total = sum(c[1] for c in counts.values())
    table["overall"] = sum(c[0] for c in counts.values()) / total if total else 0.0
    return table


def evaluate(model, dataset: Sequence, config: Optional[BenchConfig] = None,
             out_dir: Optional[Union[str, Path]] = None) -> dict:
    """Exact-match accuracy per family plus overall.

    model is a checkpoint path (loaded against config) or anything with
    predict(item); items only need .qa.
    """
    if isinstance(model, (str, Path)):
        if config is None:
            raise InvalidArgumentError("evaluating a checkpoint path needs the config it was trained with")
        model = VQAModel.load(model, config)
    counts = _family_counts(model, dataset)
    table = _accuracy_table(counts)
    if out_dir is not None:
        rows = [{"family": f, "correct": counts[f][0], "total": counts[f][1], "accuracy": f"{table[f]:.6f}"}
                for f in FAMILIES if f in table]
        rows.append({"family": "overall", "correct": sum(c[0] for c in counts.values()),
                     "total": sum(c[1] for c in counts.values()), "accuracy": f"{table['overall']:.6f}"})
        _write_csv(Path(out_dir) / "accuracy.csv", ["family", "correct", "total", "accuracy"], rows)
    return table


# =============================================================================
# Ablation
# =============================================================================

@dataclass(eq=False)
class AblationReport:
    variants: tuple
    seeds: tuple
    counts: dict  # (variant, seed) -> {family: [correct, total]}
    budgets: dict  # variant -> {"prior": int, "total": int}
    sign_tests: dict = field(default_factory=dict)

    def accuracy(self, variant: str, seed: int, families: Optional[Sequence[str]] = None) -> float:
        counts = self.counts[(variant, seed)]
        chosen = [f for f in (families or counts) if f in counts]
        total = sum(counts[f][1] for f in chosen)
        return sum(counts[f][0] for f in chosen) / total if total else 0.0

    def families(self) -> list:
        present = {f for c in self.counts.values() for f in c}
        return [f for f in FAMILIES if f in present]

    def deltas(self, variant: str, reference: str = REFERENCE) -> dict:
        """Mean over seeds of accuracy(reference) - accuracy(variant), per family and overall."""
        out = {}
        for family in self.families() + ["overall"]:
            fams = None if family == "overall" else [family]
            out[family] = float(np.mean([self.accuracy(reference, s, fams) - self.accuracy(variant, s, fams)
                                         for s in self.seeds]))
        return out

    def table_rows(self) -> list:
        rows = []
        for variant in self.variants:
            for seed in self.seeds:
                for family in self.families() + ["overall"]:
                    fams = None if family == "overall" else [family]
                    rows.append({"variant": variant, "seed": seed, "family": family,
                                 "accuracy": f"{self.accuracy(variant, seed, fams):.6f}"})
        return rows


def sign_test(report: AblationReport, variant: str, families: Sequence[str], reference: str = REFERENCE,
              alpha: Optional[float] = None) -> dict:
    """One-sided paired sign test that reference beats variant across seeds on families.

    passed needs a positive mean delta and, when alpha is given, p < alpha.
    """
    deltas = [report.accuracy(reference, s, families) - report.accuracy(variant, s, families)
              for s in report.seeds]
    wins = sum(d > 0 for d in deltas)
    nonzero = sum(d != 0 for d in deltas)
    p = binomtest(wins, nonzero, 0.5, alternative="greater").pvalue if nonzero else 1.0
    return {"reference": reference, "variant": variant, "families": list(families), "deltas": deltas,
            "mean_delta": float(np.mean(deltas)), "wins": wins, "p_value": float(p),
            "passed": bool(np.mean(deltas) > 0 and (alpha is None or p < alpha))}


def ablate(config: BenchConfig, variants: Sequence[str] = VARIANTS, seeds: Sequence[int] = (0, 1, 2, 3, 4),
           out_dir: Union[str, Path] = "ablation", train_missing: bool = True) -> AblationReport:
    """Train (or load) every variant at every seed on identical data and compare them."""
    variants = tuple(dict.fromkeys(variants))
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise InvalidArgumentError(f"unknown variants {sorted(unknown)}")
    if REFERENCE not in variants:
        variants = (REFERENCE,) + variants
    out_dir = Path(out_dir)
    counts, budgets = {}, {}
    for seed in seeds:
        data = None
        for variant in variants:
            cfg = config.with_train(variant=variant, seed=seed)
            run_dir = out_dir / f"{variant}_seed{seed}"
            checkpoint = run_dir / "checkpoint.npz"
            if checkpoint.exists():
                model = VQAModel.load(checkpoint, cfg)
            elif train_missing:
                data = data if data is not None else prepare_data(cfg, seed)
                model = train(cfg, run_dir, data).model
            else:
                raise NotFoundError(f"no checkpoint for variant {variant} seed {seed} at {checkpoint}")
            data = data if data is not None else prepare_data(cfg, seed)
            counts[(variant, seed)] = dict(_family_counts(model, data.eval))
            budgets[variant] = {"prior": model.prior_parameter_count(),
                                "total": int(sum(p.data.size for p in model.params.values()))}
            logger.info(f"ablation {variant} seed {seed}: overall "
                        f"{_accuracy_table(counts[(variant, seed)])['overall']:.3f}")

    report = AblationReport(variants=variants, seeds=tuple(seeds), counts=counts, budgets=budgets)
    for variant, (families, alpha) in SIGN_CHECKS.items():
        if variant in variants:
            report.sign_tests[variant] = sign_test(report, variant, families, alpha=alpha)

    _write_csv(out_dir / "ablation.csv", ["variant", "seed", "family", "accuracy"], report.table_rows())
    delta_rows = [{"variant": v, "family": f, "delta": f"{d:.6f}"}
                  for v in variants for f, d in report.deltas(v).items()]
    _write_csv(out_dir / "deltas.csv", ["variant", "family", "delta"], delta_rows)
    (out_dir / "ablation.json").write_text(json.dumps(
        {"variants": list(variants), "seeds": list(seeds), "budgets": budgets, "sign_tests": report.sign_tests},
        indent=2))
    return report

"""CLI entry point for the gestalt bench."""

import csv
import json
import logging
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import dotenv
import numpy as np
import typer

from causal_text import TriggerLexicon, encode_text
from fusion import InterventionSpec, causal_intervention, explain, intervention_heatmap, read_manifest
from harness import (
    VARIANTS,
    VQAModel,
    ablate,
    evaluate,
    generate_sample,
    generate_scene,
    lexicon_for,
    load_config,
    prepare_data,
    prepare_inputs,
    question_vocabulary,
    run_validation,
    train,
)
from harness.scenes import SceneSpec
from numeric.errors import (
    ConfigError,
    GenerationFailure,
    InvalidArgumentError,
    NotFoundError,
    OracleMismatchError,
    TrainingDivergedError,
)
from regions import Image, read_pnm, segment_slic, write_graph, write_pgm, write_pnm
from tower import LAYERS, ProximityParams, TowerParams, gestalt_forward, rasterize_prior

dotenv.load_dotenv()

logger = logging.getLogger("gestalt.cli")

app = typer.Typer(help="Gestalt bench - gestalt-tower spatial VQA on synthetic scenes")


def _setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(Path(tempfile.gettempdir()) / "gestalt_bench.log"),
            logging.StreamHandler(sys.stderr),
        ],
        force=True,
    )


@contextmanager
def _exit_codes():
    """Map bench errors onto the documented exit codes."""
    try:
        yield
    except (ConfigError, InvalidArgumentError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        raise typer.Exit(code=2)
    except (GenerationFailure, OracleMismatchError, NotFoundError, TrainingDivergedError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        if isinstance(e, TrainingDivergedError) and e.dump_path:
            logger.error(f"diagnostic dump written to {e.dump_path}")
        raise typer.Exit(code=3)


@app.callback()
def main(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", help="TOML file merged over the defaults"),
    seed: Optional[int] = typer.Option(None, "--seed", envvar="GESTALT_SEED", help="Overrides [train].seed"),
    out_dir: Path = typer.Option(Path("runs"), "--out-dir", envvar="GESTALT_OUT_DIR", help="Artifact directory"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
):
    """Global options shared by every subcommand."""
    _setup_logging(verbose)
    with _exit_codes():
        bench = load_config(config)
        if seed is not None:
            bench = bench.with_train(seed=seed)
    ctx.obj = {"config": bench, "out_dir": out_dir}


def _image(ctx: typer.Context, image: Optional[Path], scene_seed: Optional[int]) -> Image:
    if image is not None:
        return read_pnm(image)
    if scene_seed is None:
        raise InvalidArgumentError("pass an image path or --scene-seed")
    scene = generate_scene(scene_seed, SceneSpec.from_config(ctx.obj["config"].data))
    out = ctx.obj["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    write_pnm(out / f"scene_{scene_seed}.ppm", scene.canvas)
    return scene.canvas


# =============================================================================
# Commands
# =============================================================================

@app.command()
def segment(
    ctx: typer.Context,
    image: Optional[Path] = typer.Argument(None, help="Binary PGM/PPM image"),
    scene_seed: Optional[int] = typer.Option(None, help="Render a synthetic scene instead of reading an image"),
    k: Optional[int] = typer.Option(None, help="Target superpixel count"),
    compactness: Optional[float] = typer.Option(None),
    iters: Optional[int] = typer.Option(None),
):
    """Superpixel-segment an image into a region graph (labels.pgm + graph.txt)."""
    with _exit_codes():
        seg = ctx.obj["config"].segmentation
        graph = segment_slic(_image(ctx, image, scene_seed), k=k or seg.k,
                             compactness=seg.compactness if compactness is None else compactness,
                             iters=iters or seg.iters, min_region=seg.min_region)
        out = ctx.obj["out_dir"]
        out.mkdir(parents=True, exist_ok=True)
        write_pgm(out / "labels.pgm", graph.labels, labels=len(graph) <= 256)
        write_graph(out / "graph.txt", graph)
        print(f"{len(graph)} regions, {len(graph.edges)} edges -> {out}")


def _parse_floats(text: str, count: Optional[int] = None) -> np.ndarray:
    try:
        values = np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError as e:
        raise InvalidArgumentError(f"cannot parse numbers from {text!r}") from e
    if count is not None and len(values) != count:
        raise InvalidArgumentError(f"expected {count} values, got {len(values)}")
    return values


@app.command()
def gestalt(
    ctx: typer.Context,
    image: Optional[Path] = typer.Argument(None, help="Binary PGM/PPM image"),
    query: int = typer.Option(0, help="Query region id"),
    feature_file: Optional[Path] = typer.Option(None, help="Whitespace-separated query feature vector"),
    guidance_file: Optional[Path] = typer.Option(None, help="Per-region text-guidance scores"),
    scene_seed: Optional[int] = typer.Option(None, help="Render a synthetic scene instead of reading an image"),
    tau: Optional[float] = typer.Option(None),
    hops: Optional[float] = typer.Option(None),
    k_clusters: Optional[int] = typer.Option(None),
    bridge_gap: Optional[float] = typer.Option(None),
    decay: Optional[float] = typer.Option(None),
    gate: Optional[str] = typer.Option(None, help="Four gate logits, e.g. '0,0,0,0' (inf allowed)"),
):
    """Compute the four gestalt layers and their gated prior for one query region."""
    with _exit_codes():
        config = ctx.obj["config"]
        t, seg = config.tower, config.segmentation
        graph = segment_slic(_image(ctx, image, scene_seed), k=seg.k, compactness=seg.compactness,
                             iters=seg.iters, min_region=seg.min_region)
        params = TowerParams(
            proximity=ProximityParams(tau=t.tau if tau is None else tau, metric=t.metric,
                                      hops=t.hops if hops is None else hops),
            decay=t.decay if decay is None else decay,
            bridge_gap_max=t.bridge_gap_max if bridge_gap is None else bridge_gap,
            edge_threshold=t.edge_threshold, entity_threshold=t.entity_threshold,
            k_clusters=t.k_clusters if k_clusters is None else k_clusters)
        feature = (_parse_floats(feature_file.read_text()) if feature_file is not None
                   else graph.features()[graph.region(query).id])
        guidance = (_parse_floats(guidance_file.read_text(), len(graph)) if guidance_file is not None else None)
        logits = _parse_floats(gate, 4) if gate is not None else np.asarray(t.gate_init)
        prior = gestalt_forward(graph, query, feature, guidance, logits, params)

        out = ctx.obj["out_dir"]
        out.mkdir(parents=True, exist_ok=True)
        write_pgm(out / "prior.pgm", rasterize_prior(prior.weights, graph))
        with (out / "prior.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["region_id", *LAYERS, "combined"])
            for r in range(len(graph)):
                writer.writerow([r, *(f"{v:.6f}" for v in prior.layer_contrib[r]), f"{prior.weights[r]:.6f}"])
        print("gate: " + ", ".join(f"{n}={g:.3f}" for n, g in zip(LAYERS, prior.gate)))
        print(f"top region {int(np.argmax(prior.weights))} -> {out / 'prior.csv'}")


@app.command("encode-text")
def encode_text_command(
    ctx: typer.Context,
    question: str = typer.Argument(..., help="Question text"),
    lexicon: Optional[Path] = typer.Option(None, help="Trigger lexicon file"),
):
    """Print the token / id / trigger / role table of a question as CSV."""
    with _exit_codes():
        lex = TriggerLexicon.load(lexicon) if lexicon else lexicon_for(ctx.obj["config"])
        text = encode_text(question, lex, question_vocabulary(), max_tokens=ctx.obj["config"].text.max_tokens)
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["position", "token", "id", "trigger", "role"])
        for i, token in enumerate(text.tokens):
            writer.writerow([i, token, int(text.ids[i]), int(text.c_mask[i]), text.roles[i]])


@app.command("train")
def train_command(
    ctx: typer.Context,
    variant: Optional[str] = typer.Option(None, help=f"One of {', '.join(VARIANTS)}"),
    epochs: Optional[int] = typer.Option(None),
):
    """Train one variant; writes metrics.csv and checkpoint.npz under --out-dir."""
    with _exit_codes():
        config = ctx.obj["config"]
        changes = {k: v for k, v in {"variant": variant, "epochs": epochs}.items() if v is not None}
        if changes:
            config = config.with_train(**changes)
        result = train(config, ctx.obj["out_dir"])
        for row in result.metrics:
            print(", ".join(f"{k}={v}" for k, v in row.items()))
        print(f"majority-class baseline: {result.majority:.3f}")
        print(f"checkpoint: {result.checkpoint}")


@app.command("eval")
def eval_command(
    ctx: typer.Context,
    checkpoint: Path = typer.Argument(..., help="checkpoint.npz written by train"),
):
    """Per-family exact-match accuracy of a checkpoint on the held-out split."""
    with _exit_codes():
        config = ctx.obj["config"]
        config = config.with_train(variant=read_manifest(checkpoint).get("variant", config.train.variant))
        data = prepare_data(config, include_train=False)
        table = evaluate(checkpoint, data.eval, config=config, out_dir=ctx.obj["out_dir"])
        for family, accuracy in table.items():
            print(f"{family:>12}: {accuracy:.3f}")


@app.command("ablate")
def ablate_command(
    ctx: typer.Context,
    variants: str = typer.Option(",".join(VARIANTS), help="Comma-separated variants"),
    seeds: int = typer.Option(5, help="Number of paired seeds (0..n-1)"),
    no_train: bool = typer.Option(False, "--no-train", help="Fail instead of training missing variants"),
):
    """Paired comparison of variants at identical seeds and budgets."""
    with _exit_codes():
        chosen = [v.strip() for v in variants.split(",") if v.strip()]
        report = ablate(ctx.obj["config"], chosen, tuple(range(seeds)), ctx.obj["out_dir"],
                        train_missing=not no_train)
        families = report.families() + ["overall"]
        print(f"{'variant':<38}" + "".join(f"{f:>12}" for f in families))
        for variant in report.variants:
            means = [np.mean([report.accuracy(variant, s, None if f == "overall" else [f]) for s in report.seeds])
                     for f in families]
            print(f"{variant:<38}" + "".join(f"{m:>12.3f}" for m in means))
        for variant, budget in report.budgets.items():
            print(f"budget {variant}: prior {budget['prior']} / total {budget['total']} parameters")
        for variant, test in report.sign_tests.items():
            print(f"sign test {test['reference']} vs {variant} on {'+'.join(test['families'])}: "
                  f"mean delta {test['mean_delta']:+.3f}, wins {test['wins']}/{len(test['deltas'])}, "
                  f"p={test['p_value']:.4f}, {'PASS' if test['passed'] else 'FAIL'}")


@app.command()
def intervene(
    ctx: typer.Context,
    checkpoint: Path = typer.Argument(..., help="checkpoint.npz written by train"),
    spec: str = typer.Option("none", help="none | delete_region:<id> | mask_text_token:<index>"),
    scene_seed: int = typer.Option(0, help="Seed of the synthetic scene to inspect"),
):
    """Counterfactual intervention on one scene; writes report.json and heatmap.pgm."""
    with _exit_codes():
        config = ctx.obj["config"]
        config = config.with_train(variant=read_manifest(checkpoint).get("variant", config.train.variant))
        model = VQAModel.load(checkpoint, config)
        sample = generate_sample(scene_seed, SceneSpec.from_config(config.data))
        inputs = prepare_inputs(sample, config, lexicon_for(config), model.question_vocab, model.answer_index)
        report = causal_intervention(model, inputs, InterventionSpec.parse(spec), delta=config.fusion.delta,
                                     state=model.state)
        out = ctx.obj["out_dir"]
        out.mkdir(parents=True, exist_ok=True)
        payload = {"question": sample.qa.question, "answer": sample.qa.answer, **report.to_dict()}
        (out / "report.json").write_text(json.dumps(payload, indent=2))
        write_pgm(out / "heatmap.pgm", intervention_heatmap(report, inputs.graph))
        print(explain(report, dict(enumerate(inputs.region_names))))


@app.command()
def validate(ctx: typer.Context):
    """Run the acceptance checks with expected ranges."""
    with _exit_codes():
        results = run_validation(ctx.obj["config"])
    for case in results["cases"]:
        print(f"\n{'=' * 60}")
        print(f"Validating: {case['name']}")
        print(f"Description: {case['description']}")
        for metric, check in case["metrics"].items():
            status = "✅" if check["passed"] else "❌"
            low, high = check["expected_range"]
            print(f"  {status} {metric}: {check['actual']:.6g} (expected {low:g}-{high:g})")
        print(f"  Result: {'PASSED ✅' if case['passed'] else 'FAILED ❌'}")
    print(f"\n{'=' * 60}")
    print(f"Validation Summary: {results['passed']}/{len(results['cases'])} passed")
    if results["failed"] > 0:
        print(f"\nValidation FAILED: {results['failed']} case(s) did not pass")
        raise typer.Exit(code=1)
    print(f"\nValidation PASSED: All {results['passed']} case(s) within expected ranges")


if __name__ == "__main__":
    app()

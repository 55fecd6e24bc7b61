import csv
import json
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from causal_text import encode_text
from fusion import InterventionSpec, causal_intervention, strengthen_dependencies
from harness import (
    FAMILIES,
    AblationReport,
    QAPair,
    SceneSpec,
    VQAModel,
    ablate,
    answer_question,
    answer_vocabulary,
    build_dataset,
    check_oracle,
    config_hash,
    evaluate,
    generate_question,
    generate_sample,
    generate_scene,
    layer_breakdown,
    lexicon_for,
    load_config,
    majority_baseline,
    mirror_scene,
    prepare_inputs,
    question_vocabulary,
    sign_test,
    split_seeds,
    train,
)
from harness.config import BenchConfig, TowerConfig
from harness.model import ground_query
from harness.training import SIGN_CHECKS
from harness.validation import (
    causal_text_exactness,
    closure_oracle,
    gradient_suite,
    intervention_null,
    iou_identities,
    run_validation,
)
from numeric import (
    ConfigError,
    GenerationFailure,
    InvalidArgumentError,
    NotFoundError,
    OracleMismatchError,
    Tensor,
    TrainingDivergedError,
)
from numeric import tensor as nt
from tower import closure_loss, rasterize_prior, trace_continuity_path


# -----------------------------------------------------------------------------
# configuration
# -----------------------------------------------------------------------------

def test_defaults_file_matches_dataclasses():
    assert load_config() == BenchConfig()


def test_overrides_merge(tmp_path):
    path = tmp_path / "bench.toml"
    path.write_text("[train]\nepochs = 2\n\n[tower]\ntau = 4\n")
    config = load_config(path)
    assert config.train.epochs == 2
    assert config.train.batch_size == BenchConfig().train.batch_size
    assert config.tower.tau == 4.0


@pytest.mark.parametrize("body", [
    "[training]\nepochs = 2\n",
    "[train]\nepoch = 2\n",
    "[train]\nepochs = \"two\"\n",
    "[tower]\ndecay = 1.5\n",
    "[data]\nfamilies = [\"counting\"]\n",
    "[fusion]\nintervention_blocks = [1, 4]\n",
    "[train\n",
])
def test_bad_configs_are_rejected(tmp_path, body):
    path = tmp_path / "bench.toml"
    path.write_text(body)
    with pytest.raises(ConfigError):
        config = load_config(path)
        VQAModel(config)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


def test_config_hash_tracks_shaping_fields():
    base = BenchConfig()
    assert config_hash(base) == config_hash(base.with_train(epochs=9, seed=3))
    assert config_hash(base) != config_hash(base.with_train(variant="no_closure"))
    assert config_hash(base) != config_hash(replace(base, tower=TowerConfig(tau=3.0)))


# -----------------------------------------------------------------------------
# scenes
# -----------------------------------------------------------------------------

def test_scene_generation_is_deterministic():
    a, b = generate_scene(11), generate_scene(11)
    assert a.family == b.family
    assert a.relations == b.relations
    np.testing.assert_array_equal(a.canvas.data, b.canvas.data)


@pytest.mark.parametrize("family", FAMILIES)
def test_every_family_passes_the_oracle(family):
    spec = SceneSpec(families=(family,))
    for seed in range(3):
        scene = generate_scene(seed, spec)
        assert scene.family == family
        qa = generate_question(scene, family, seed)
        check_oracle(scene, qa)
        vocab = set(answer_vocabulary())
        assert all(token in vocab for token in qa.answer_tokens)


def test_oracle_mismatch_is_reported():
    sample = generate_sample(5, SceneSpec(families=("relation",)))
    wrong = replace(sample.qa, answer="nothing here")
    with pytest.raises(OracleMismatchError):
        check_oracle(sample.scene, wrong)
    with pytest.raises(NotFoundError):
        answer_question(sample.scene, "relation", "left_of", 99)


def test_mirror_swaps_left_and_right():
    scene = generate_scene(3, SceneSpec(families=("relation",)))
    swap = {"left_of": "right_of", "right_of": "left_of"}
    expected = sorted((swap.get(r, r), i, j) for r, i, j in scene.relations)
    assert list(mirror_scene(scene).relations) == expected


def test_occlusion_fraction_is_honoured():
    scene = generate_scene(2, SceneSpec(families=("occlusion",), occlusion_fraction=0.3))
    hidden = [float(1 - o.visible_mask.sum() / o.full_mask.sum()) for o in scene.objects
              if (o.visible_mask != o.full_mask).any()]
    assert len(hidden) == 1
    assert hidden[0] == pytest.approx(0.3)


def test_generation_failures_and_bad_specs():
    with pytest.raises(GenerationFailure):
        generate_scene(0, SceneSpec(max_objects=2), family="path")
    with pytest.raises(InvalidArgumentError):
        generate_scene(0, family="counting")
    with pytest.raises(InvalidArgumentError):
        SceneSpec(canvas=16)


def test_dataset_order_and_splits():
    spec = SceneSpec()
    samples = build_dataset(spec, [7, 3, 5])
    assert [s.seed for s in samples] == [7, 3, 5]
    train_seeds, eval_seeds = split_seeds(2, 10, 4)
    assert len(train_seeds) == 10 and len(eval_seeds) == 4
    assert not set(train_seeds) & set(eval_seeds)


def test_oversize_object_is_a_generation_failure():
    spec = SceneSpec(canvas=32, outer_size=40, families=("containment",))
    with pytest.raises(GenerationFailure):
        generate_scene(0, spec, family="containment")


def test_dataset_rejects_a_corrupted_answer(monkeypatch):
    import harness.scenes

    original = harness.scenes.generate_question

    def corrupted(scene, family, seed):
        return replace(original(scene, family, seed), answer="nothing here")

    monkeypatch.setattr(harness.scenes, "generate_question", corrupted)
    with pytest.raises(OracleMismatchError):
        build_dataset(SceneSpec(families=("locate",)), [1, 2])


# -----------------------------------------------------------------------------
# model
# -----------------------------------------------------------------------------

def test_ground_query_uses_named_color(quadrant_graph):
    assert ground_query(quadrant_graph, "where is the blue circle?") == 3
    assert ground_query(quadrant_graph, "what is left of the green square?") == 1
    assert ground_query(quadrant_graph, "where is the red square?") == 0
    assert ground_query(quadrant_graph, "what comes next?") == 0


def test_prepared_inputs(tiny_data, tiny_config):
    inputs = tiny_data.eval[0]
    n = len(inputs.graph)
    assert len(tiny_data.train) == 4 and len(tiny_data.eval) == 3
    assert inputs.answer_ids[-1] == answer_vocabulary().index("<eos>")
    assert len(inputs.answer_ids) == len(inputs.qa.answer_tokens) + 1
    assert inputs.entity.shape == (n,) and len(inputs.region_names) == n
    assert 0 <= inputs.query < n
    assert inputs.proximity.sum() == pytest.approx(1.0)
    assert inputs.closure.sum() == pytest.approx(1.0)
    assert inputs.cluster is None


def test_forward_produces_distributions(tiny_data, tiny_config):
    model = VQAModel(tiny_config)
    inputs = tiny_data.eval[0]
    fused, prior = model.forward(inputs)
    assert prior.numpy().sum() == pytest.approx(1.0)
    assert fused.weights.sum() == pytest.approx(1.0)
    assert np.count_nonzero(fused.weights) <= tiny_config.fusion.sparsify_k
    assert all(t in model.answer_vocab for t in model.predict(inputs).split())


def test_loss_decomposes(tiny_data, tiny_config):
    model = VQAModel(tiny_config)
    _, parts = model.loss(tiny_data.train[0], step_seed=1)
    w = model.loss_weights()
    assert parts["total"] == pytest.approx(parts["task"] + w["closure"] * parts["closure"]
                                           + w["causal"] * parts["causal"])
    assert 0.0 <= parts["closure"] <= 1.0


def test_no_closure_variant_drops_layer_and_loss(tiny_data, tiny_config):
    model = VQAModel(tiny_config.with_train(variant="no_closure"))
    assert model.tower.disabled == ("closure",)
    _, parts = model.loss(tiny_data.train[0], step_seed=1)
    assert "closure" not in parts
    assert layer_breakdown(model, tiny_data.train[0]).shape == (len(tiny_data.train[0].graph), 4)


def test_attention_baseline_budget(tiny_config, tiny_data):
    tower = VQAModel(tiny_config)
    attention = VQAModel(tiny_config.with_train(variant="dot_product_attention"))
    width = tiny_config.fusion.width
    assert tower.prior_parameter_count() == 4 + 4 * width
    assert abs(attention.prior_parameter_count() - tower.prior_parameter_count()) <= width + attention.region_dim
    assert layer_breakdown(attention, tiny_data.eval[0]) is None
    _, prior = attention.forward(tiny_data.eval[0])
    assert prior.numpy().sum() == pytest.approx(1.0)


def test_cluster_restricted_similarity(tiny_config):
    from harness import prepare_data

    config = replace(tiny_config, tower=replace(tiny_config.tower, k_clusters=3),
                     data=replace(tiny_config.data, n_train=1, n_eval=1))
    inputs = prepare_data(config).eval[0]
    assert inputs.cluster is not None and inputs.cluster[inputs.query]
    model = VQAModel(config)
    similarity = model.similarity(inputs, model.region_features(inputs)).numpy()
    assert similarity.sum() == pytest.approx(1.0)
    assert (similarity[~inputs.cluster] == 0).all()


def test_checkpoint_round_trip(tmp_path, tiny_config, tiny_data):
    model = VQAModel(tiny_config, seed=4)
    model.state.token_gain[7] = 1.21
    path = model.save(tmp_path / "checkpoint.npz")
    loaded = VQAModel.load(path, tiny_config)
    inputs = tiny_data.eval[1]
    assert loaded.predict(inputs) == model.predict(inputs)
    np.testing.assert_allclose(loaded.answer_probabilities(inputs), model.answer_probabilities(inputs))
    assert loaded.state.token_gain == {7: 1.21}
    with pytest.raises(ConfigError):
        VQAModel.load(path, tiny_config.with_train(variant="no_continuity"))


def test_null_intervention_on_model(tiny_config, tiny_data):
    model = VQAModel(tiny_config)
    inputs = tiny_data.eval[0]
    report = causal_intervention(model, inputs, InterventionSpec(), state=model.state)
    np.testing.assert_array_equal(report.deltas, 0.0)
    deleted = causal_intervention(model, inputs, InterventionSpec("delete_region", inputs.query),
                                  state=model.state)
    assert deleted.region_deltas[inputs.query] == pytest.approx(deleted.total_shift)


def test_hard_closure_uses_configured_threshold(tiny_config, tiny_data):
    config = replace(tiny_config, tower=replace(tiny_config.tower, prior_threshold=0.9))
    model = VQAModel(config)
    inputs = tiny_data.train[0]
    _, prior = model.forward(inputs)
    expected = closure_loss(rasterize_prior(prior.numpy(), inputs.graph), inputs.anchor_mask, theta=0.9)
    assert model.hard_closure(prior, inputs) == pytest.approx(expected)
    _, parts = model.loss(inputs, step_seed=1)
    assert 0.0 <= parts["closure_hard"] <= 1.0


def test_question_longer_than_token_budget(tiny_config, tiny_data):
    config = replace(tiny_config, text=replace(tiny_config.text, max_tokens=3))
    index = {t: i for i, t in enumerate(answer_vocabulary())}
    with pytest.raises(InvalidArgumentError):
        prepare_inputs(tiny_data.eval[0].sample, config, lexicon_for(config), question_vocabulary(), index)


def test_continuity_follows_the_question(tiny_config, tiny_data):
    model = VQAModel(tiny_config)
    inputs = tiny_data.eval[0]
    feats = model.region_features(inputs)
    lexicon, vocab = lexicon_for(tiny_config), question_vocabulary()
    where = nt.mean(model.encode_text(encode_text("where is the red square?", lexicon, vocab)), axis=0)
    why = nt.mean(model.encode_text(encode_text("why is the blue circle hidden?", lexicon, vocab)), axis=0)
    assert not np.allclose(model.direction_scores(feats, where), model.direction_scores(feats, why))

    summary = nt.mean(model.encode_text(inputs.text), axis=0)
    expected = trace_continuity_path(inputs.graph, inputs.query, model.direction_scores(feats, summary),
                                     model.tower.decay, entity=inputs.entity)
    np.testing.assert_allclose(layer_breakdown(model, inputs)[:, 3], expected)


def test_strengthened_region_gains_weight(tiny_config, tiny_data):
    model = VQAModel(tiny_config)
    inputs, other = tiny_data.eval[0], tiny_data.eval[1]
    before = model.fuse(inputs, InterventionSpec(), model.state).weights
    untouched = model.fuse(other, InterventionSpec(), model.state).weights
    target = int(np.argmax(before))
    report = causal_intervention(model, inputs, InterventionSpec("delete_region", target), state=model.state)
    region_deltas = np.zeros(len(inputs.graph))
    region_deltas[target] = -0.5
    report = replace(report, flagged=(0,), region_deltas=region_deltas)
    assert strengthen_dependencies(model.state, report, factor=1.5, cap=2.0) == [("region", target)]
    after = model.fuse(inputs, InterventionSpec(), model.state).weights
    assert after[target] > before[target]
    np.testing.assert_allclose(model.fuse(other, InterventionSpec(), model.state).weights, untouched)


def test_region_gains_survive_checkpoints(tmp_path, tiny_config, tiny_data):
    model = VQAModel(tiny_config, seed=2)
    model.state.region_gain[(tiny_data.eval[0].scene_key, 1)] = 1.5
    loaded = VQAModel.load(model.save(tmp_path / "checkpoint.npz"), tiny_config)
    assert loaded.state.region_gain == model.state.region_gain


# -----------------------------------------------------------------------------
# training and evaluation
# -----------------------------------------------------------------------------

def test_train_writes_metrics_and_checkpoint(tmp_path, tiny_config, tiny_data):
    result = train(tiny_config.with_train(intervention_every=1), tmp_path, tiny_data)
    with (tmp_path / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "loss", "loss_task", "loss_closure", "closure_hard", "loss_causal",
                            "eval_accuracy"]
    assert len(rows) == tiny_config.train.epochs
    assert np.isfinite(float(rows[0]["loss"]))
    assert result.checkpoint.exists()
    assert 0.0 <= result.majority <= 1.0
    table = evaluate(result.checkpoint, tiny_data.eval, config=tiny_config, out_dir=tmp_path)
    assert 0.0 <= table["overall"] <= 1.0
    assert (tmp_path / "accuracy.csv").exists()


def test_training_is_reproducible(tmp_path, tiny_config, tiny_data):
    train(tiny_config, tmp_path / "a", tiny_data)
    train(tiny_config, tmp_path / "b", tiny_data)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


@pytest.mark.slow
def test_training_fits_a_small_split(tmp_path, tiny_config):
    from harness import prepare_data

    config = replace(tiny_config, data=replace(tiny_config.data, n_train=6, n_eval=1, families=("locate",)),
                     train=replace(tiny_config.train, epochs=40, batch_size=3, learning_rate=0.01))
    data = prepare_data(config)
    result = train(config, tmp_path, data)
    losses = [float(row["loss"]) for row in result.metrics]
    assert losses[-1] < losses[0]
    accuracy = evaluate(result.model, data.train)["overall"]
    assert accuracy >= majority_baseline(data.train, data.train)


def test_divergence_raises_with_dump(tmp_path, tiny_config, tiny_data, monkeypatch):
    def exploding(self, inputs, step_seed):
        return Tensor(float("nan")), {"task": float("nan"), "total": float("nan")}

    monkeypatch.setattr(VQAModel, "loss", exploding)
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_config, tmp_path, tiny_data)
    assert info.value.dump_path.exists()
    assert json.loads(info.value.dump_path.read_text())["epoch"] == 1


def _items(*pairs):
    return [SimpleNamespace(qa=QAPair(question="q", answer=answer, family=family)) for family, answer in pairs]


def test_evaluate_with_stub_models(tmp_path):
    items = _items(("locate", "top left"), ("locate", "top right"), ("path", "red circle"))
    oracle = SimpleNamespace(predict=lambda item: item.qa.answer)
    assert evaluate(oracle, items) == {"locate": 1.0, "path": 1.0, "overall": 1.0}
    constant = SimpleNamespace(predict=lambda item: "top left")
    table = evaluate(constant, items, out_dir=tmp_path)
    assert table["locate"] == 0.5 and table["path"] == 0.0
    assert table["overall"] == pytest.approx(1 / 3)
    lines = (tmp_path / "accuracy.csv").read_text().splitlines()
    assert lines[0] == "family,correct,total,accuracy"
    assert lines[-1] == "overall,1,3,0.333333"
    with pytest.raises(InvalidArgumentError):
        evaluate(tmp_path / "checkpoint.npz", items)


def test_majority_baseline():
    train_items = _items(("locate", "a"), ("locate", "b"), ("locate", "b"))
    assert majority_baseline(train_items, _items(("locate", "b"), ("locate", "a"))) == 0.5
    assert majority_baseline([], train_items) == 0.0


def _report(reference_correct, variant_correct):
    counts = {}
    for seed, (r, v) in enumerate(zip(reference_correct, variant_correct)):
        counts[("gestalt_tower", seed)] = {"path": [r, 10], "locate": [5, 10]}
        counts[("dot_product_attention", seed)] = {"path": [v, 10], "locate": [5, 10]}
    seeds = tuple(range(len(reference_correct)))
    return AblationReport(variants=("gestalt_tower", "dot_product_attention"), seeds=seeds, counts=counts,
                          budgets={})


def test_sign_test_and_deltas():
    report = _report([8, 7, 9, 6, 8], [5, 5, 6, 4, 7])
    test = sign_test(report, "dot_product_attention", ["path"])
    assert test["wins"] == 5
    assert test["p_value"] == pytest.approx(0.5 ** 5)
    deltas = report.deltas("dot_product_attention")
    assert deltas["path"] == pytest.approx(0.22)
    assert deltas["locate"] == 0.0
    assert report.families() == ["locate", "path"]
    assert len(report.table_rows()) == 2 * 5 * 3


def test_sign_test_with_ties_only():
    test = sign_test(_report([5, 5], [5, 5]), "dot_product_attention", ["path"])
    assert test["wins"] == 0 and test["p_value"] == 1.0


def test_sign_verdicts():
    assert SIGN_CHECKS["dot_product_attention"][1] == 0.05
    assert SIGN_CHECKS["attention_weights_vs_causal_weights"][1] is None
    clear = _report([8, 7, 9, 6, 8], [5, 5, 6, 4, 7])
    assert sign_test(clear, "dot_product_attention", ["path"], alpha=0.05)["passed"]
    # four wins of five: positive on average, not significant
    mixed = _report([8, 7, 9, 6, 4], [5, 5, 6, 4, 7])
    test = sign_test(mixed, "dot_product_attention", ["path"], alpha=0.05)
    assert test["mean_delta"] > 0 and test["p_value"] == pytest.approx(6 / 32)
    assert not test["passed"]
    assert sign_test(mixed, "dot_product_attention", ["path"])["passed"]
    worse = _report([5, 5, 5], [8, 8, 8])
    assert not sign_test(worse, "dot_product_attention", ["path"])["passed"]


def test_ablate_argument_checks(tmp_path, tiny_config):
    with pytest.raises(InvalidArgumentError):
        ablate(tiny_config, ["bigger_model"], seeds=(0,), out_dir=tmp_path)
    with pytest.raises(NotFoundError):
        ablate(tiny_config, ["no_closure"], seeds=(0,), out_dir=tmp_path, train_missing=False)


@pytest.mark.slow
def test_ablation_writes_tables(tmp_path, tiny_config):
    report = ablate(tiny_config, ["dot_product_attention", "attention_weights_vs_causal_weights"], seeds=(0, 1),
                    out_dir=tmp_path)
    assert report.variants[0] == "gestalt_tower"
    assert set(report.sign_tests) == {"dot_product_attention", "attention_weights_vs_causal_weights"}
    summary = json.loads((tmp_path / "ablation.json").read_text())
    assert all(isinstance(t["passed"], bool) for t in summary["sign_tests"].values())
    assert summary["budgets"]["gestalt_tower"]["prior"] == 4 + 4 * tiny_config.fusion.width
    assert (tmp_path / "deltas.csv").exists()
    assert (tmp_path / "gestalt_tower_seed1" / "checkpoint.npz").exists()
    # second run reuses the checkpoints
    again = ablate(tiny_config, ["dot_product_attention"], seeds=(0, 1), out_dir=tmp_path, train_missing=False)
    assert again.counts[("gestalt_tower", 0)] == report.counts[("gestalt_tower", 0)]


# -----------------------------------------------------------------------------
# validation cases
# -----------------------------------------------------------------------------

def test_iou_identities():
    assert iou_identities(BenchConfig()) == {"self_loss": 0.0, "disjoint_loss": 1.0, "shift_error": 0.0}


def test_causal_text_exactness():
    metrics = causal_text_exactness(BenchConfig(), sentences=20, draws=50)
    assert metrics == {"trigger_accuracy": 1.0, "role_accuracy": 1.0, "preserved_fraction": 1.0}


def test_closure_oracle_completes_broken_circles():
    metrics = closure_oracle(BenchConfig(), cases=5)
    assert metrics["closed_fraction"] == 1.0
    assert metrics["min_iou"] >= 0.95


def test_closure_oracle_honours_bridge_gap():
    tight = replace(BenchConfig(), tower=TowerConfig(bridge_gap_max=1.0))
    assert closure_oracle(tight, cases=20)["closed_fraction"] < 1.0


def test_gradient_suite_small():
    metrics = gradient_suite(BenchConfig(), seeds=2)
    for name, value in metrics.items():
        if name.endswith("_rel_err"):
            assert value < 1e-4, name
    assert metrics["model_parameters"] == len(VQAModel(BenchConfig()).params)


def test_intervention_null_case(tiny_config):
    assert intervention_null(tiny_config) == {"max_abs_delta": 0.0, "max_region_delta": 0.0}


def test_run_validation_counts_cases():
    cases = [
        {"name": "ok", "description": "inside", "run": lambda c: {"x": 0.5}, "expected_ranges": {"x": (0.0, 1.0)}},
        {"name": "bad", "description": "outside", "run": lambda c: {"x": 2.0}, "expected_ranges": {"x": (0.0, 1.0)}},
    ]
    results = run_validation(BenchConfig(), cases)
    assert (results["passed"], results["failed"]) == (1, 1)
    assert results["cases"][1]["metrics"]["x"] == {"actual": 2.0, "expected_range": (0.0, 1.0), "passed": False}

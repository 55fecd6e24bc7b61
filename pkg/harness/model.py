"""Scene preparation and the trainable VQA model that ties the packages together."""

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from causal_text import (
    MASK_ID,
    CausalText,
    RoleEmbedding,
    TriggerLexicon,
    Vocabulary,
    causal_cls_loss,
    compose_position_encodings,
    dropout_preserving_triggers,
    encode_text,
    mask_triggers_pretext,
)
from fusion import (
    AnswerDecoder,
    DecoderConfig,
    FusedRepresentation,
    InterventionSpec,
    InterventionState,
    attention_weights,
    decode_answer,
    fuse_stage1,
    fuse_stage2,
    init_fusion_params,
    init_weight,
    init_zeros,
    load_checkpoint,
    save_checkpoint,
    sparsify,
    text_causal_weights,
)
from numeric import tensor as nt
from numeric.errors import ConfigError, InvalidArgumentError
from numeric.tensor import Tensor
from regions import RegionGraph, segment_slic
from tower import (
    ProximityParams,
    TowerParams,
    attention_prior,
    closure_layer,
    closure_loss,
    cluster_regions,
    combine_layers,
    contours_for,
    proximity_weights,
    rasterize_prior,
    similarity_layer,
    soft_closure_loss,
    soft_prior_map,
    trace_continuity_path,
)

from .config import BenchConfig, config_hash
from .scenes import COLORS, Sample, answer_vocabulary, question_vocabulary

logger = logging.getLogger("gestalt.harness")

HANDCRAFTED_DIM = 6  # rgb means, intensity variance, normalized centroid
KERNEL = 3


# =============================================================================
# Scene preparation
# =============================================================================

@dataclass(frozen=True, eq=False)
class SceneInputs:
    """Everything a forward pass needs that does not depend on parameters."""
    sample: Sample
    graph: RegionGraph
    text: CausalText
    answer_ids: tuple
    query: int
    proximity: np.ndarray
    closure: np.ndarray
    entity: np.ndarray
    anchor_mask: np.ndarray
    region_names: tuple
    cluster: Optional[np.ndarray] = None  # regions sharing the query's feature cluster

    @property
    def qa(self):
        return self.sample.qa

    @property
    def family(self) -> str:
        return self.sample.qa.family

    @property
    def scene_key(self) -> int:
        return self.sample.seed


def lexicon_for(config: BenchConfig) -> TriggerLexicon:
    return TriggerLexicon.load(config.text.lexicon) if config.text.lexicon else TriggerLexicon.default()


def tower_params(config: BenchConfig, disabled: tuple = ()) -> TowerParams:
    t = config.tower
    return TowerParams(proximity=ProximityParams(tau=t.tau, metric=t.metric, hops=t.hops), decay=t.decay,
                       bridge_gap_max=t.bridge_gap_max, edge_threshold=t.edge_threshold,
                       entity_threshold=t.entity_threshold, k_clusters=t.k_clusters, disabled=disabled)


def ground_query(graph: RegionGraph, question: str) -> int:
    """Region whose mean color is nearest the color named in the question."""
    words = question.lower().replace("?", " ").replace(",", " ").split()
    color = next((w for w in words if w in COLORS), None)
    if color is None:
        return 0
    means = graph.features()[:, :3]
    dist = ((means - np.asarray(COLORS[color])) ** 2).sum(axis=1)
    areas = graph.areas()
    return min(range(len(graph)), key=lambda r: (round(float(dist[r]), 9), -int(areas[r]), r))


def prepare_inputs(sample: Sample, config: BenchConfig, lexicon: TriggerLexicon, question_vocab: Vocabulary,
                   answer_index: dict) -> SceneInputs:
    seg = config.segmentation
    scene, qa = sample.scene, sample.qa
    graph = segment_slic(scene.canvas, k=seg.k, compactness=seg.compactness, iters=seg.iters,
                         min_region=seg.min_region)
    params = tower_params(config)
    query = ground_query(graph, qa.question)

    flat = graph.labels.ravel()
    n = len(graph)
    areas = graph.areas()
    owner = np.full(scene.canvas.height * scene.canvas.width, -1)
    for i, obj in enumerate(scene.objects):
        owner[obj.visible_mask.ravel()] = i
    coverage = np.zeros((n, len(scene.objects) + 1))
    np.add.at(coverage, (flat, owner + 1), 1.0)
    majority = coverage.argmax(axis=1) - 1
    entity = coverage[:, 1:].sum(axis=1) >= 0.5 * areas
    names = tuple(scene.objects[m].name if m >= 0 else "background" for m in majority)

    anchor = scene.objects[qa.provenance["anchor"]]
    answer_ids = tuple(answer_index[t] for t in qa.answer_tokens) + (answer_index["<eos>"],)
    text = encode_text(qa.question, lexicon, question_vocab, max_tokens=config.text.max_tokens)
    return SceneInputs(
        sample=sample, graph=graph, text=text,
        answer_ids=answer_ids, query=query, proximity=proximity_weights(graph, query, params.proximity),
        closure=closure_layer(graph, contours_for(graph, params), query), entity=entity,
        anchor_mask=anchor.full_mask, region_names=names, cluster=_query_cluster(graph, query, params))


def _query_cluster(graph: RegionGraph, query: int, params: TowerParams) -> Optional[np.ndarray]:
    if not params.k_clusters:
        return None
    clusters = cluster_regions(graph, min(params.k_clusters, len(graph)), params.cluster_seed)
    return clusters == clusters[query]


def im2col(image) -> np.ndarray:
    """(H*W, C*9) zero-padded 3x3 neighbourhoods."""
    pad = KERNEL // 2
    padded = np.pad(image.data, ((pad, pad), (pad, pad), (0, 0)))
    windows = sliding_window_view(padded, (KERNEL, KERNEL), axis=(0, 1))
    return windows.reshape(image.height * image.width, -1)


def mask_token(text: CausalText, index: int) -> CausalText:
    tokens = tuple("[MASK]" if i == index else t for i, t in enumerate(text.tokens))
    roles = tuple("irrelevant" if i == index else r for i, r in enumerate(text.roles))
    ids, c_mask = text.ids.copy(), text.c_mask.copy()
    ids[index], c_mask[index] = MASK_ID, 0
    return replace(text, tokens=tokens, ids=ids, c_mask=c_mask, roles=roles, embeddings=None)


# =============================================================================
# Model
# =============================================================================

class VQAModel:
    """Feature extractor, gestalt tower (or attention baseline), causal text
    encoder, two-stage fusion, experts and decoder over one parameter dict."""

    def __init__(self, config: BenchConfig, params: Optional[dict] = None, seed: Optional[int] = None,
                 state: Optional[InterventionState] = None):
        self.config = config
        self.variant = config.train.variant
        self.answer_vocab = answer_vocabulary()
        self.answer_index = {t: i for i, t in enumerate(self.answer_vocab)}
        self.question_vocab = question_vocabulary()
        f = config.fusion
        self.decoder_config = DecoderConfig(width=f.decoder_width, blocks=f.blocks,
                                            intervention_blocks=tuple(f.intervention_blocks),
                                            max_answer_len=f.max_answer_len)
        self.decoder = AnswerDecoder(self.answer_vocab, self.decoder_config)
        self.region_dim = HANDCRAFTED_DIM + f.conv_channels
        self.attention_dim = max(1, round((4 + 4 * f.width) / (f.width + self.region_dim)))
        self.params = params if params is not None else self.init_params(config.train.seed if seed is None else seed)
        self.decoder.params = self.params
        self.state = state if state is not None else InterventionState.fresh(self.decoder_config)
        disabled = {"no_closure": ("closure",), "no_continuity": ("continuity",)}.get(self.variant, ())
        self.tower = tower_params(config, disabled)

    def init_params(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        f, d = self.config.fusion, self.config.fusion.width
        params = {
            "features.w_conv": init_weight(rng, (3 * KERNEL * KERNEL, f.conv_channels), "features.w_conv"),
            "features.b_conv": init_zeros((f.conv_channels,), "features.b_conv"),
            "text.embed": init_weight(rng, (len(self.question_vocab), d), "text.embed", scale=0.5),
            "text.w_role": init_weight(rng, (d, 3), "text.w_role"),
            "text.b_role": init_zeros((3,), "text.b_role"),
            "tower.gate": Tensor(np.array(self.config.tower.gate_init, dtype=np.float64),
                                 requires_grad=True, name="tower.gate"),
            "tower.w_gate_text": init_zeros((d, 4), "tower.w_gate_text"),
            "attention.w_query": init_weight(rng, (d, self.attention_dim), "attention.w_query"),
            "attention.w_key": init_weight(rng, (self.region_dim, self.attention_dim), "attention.w_key"),
        }
        roles = RoleEmbedding.init(d, seed=int(rng.integers(2 ** 31)))
        params["text.e_cause"], params["text.e_effect"] = roles.e_cause, roles.e_effect
        params["text.e_cause"].name, params["text.e_effect"].name = "text.e_cause", "text.e_effect"
        params.update(init_fusion_params(rng, self.region_dim, d))
        params.update(AnswerDecoder.init_params(rng, len(self.answer_vocab), d, self.decoder_config,
                                                f.expert_hidden))
        return params

    def prior_parameter_count(self) -> int:
        """Trainable parameters of the prior mechanism alone."""
        if self.variant == "dot_product_attention":
            return self.params["attention.w_query"].data.size + self.params["attention.w_key"].data.size
        return self.params["tower.gate"].data.size + self.params["tower.w_gate_text"].data.size

    # -------------------------------------------------------------------------
    # forward pieces
    # -------------------------------------------------------------------------

    def encode_text(self, text: CausalText, dropout_seed: Optional[int] = None) -> Tensor:
        p = self.params
        roles = RoleEmbedding(p["text.e_cause"], p["text.e_effect"])
        emb = nt.take(p["text.embed"], text.ids) + compose_position_encodings(text, roles)
        if dropout_seed is not None and self.config.text.dropout_p > 0:
            emb = dropout_preserving_triggers(emb, text.c_mask, self.config.text.dropout_p, dropout_seed)
        return emb

    def region_features(self, inputs: SceneInputs, deleted: Optional[int] = None) -> Tensor:
        p, graph = self.params, inputs.graph
        conv = nt.relu(Tensor(im2col(graph.image)) @ p["features.w_conv"] + p["features.b_conv"])
        learned = nt.segment_mean(conv, graph.labels.ravel(), len(graph))
        feats = nt.concat([Tensor(graph.features()), learned], axis=1)
        if deleted is not None:
            keep = np.ones(len(graph))
            keep[deleted] = 0.0
            feats = nt.scale_rows(feats, Tensor(keep))
        return feats

    def similarity(self, inputs: SceneInputs, feats: Tensor) -> Tensor:
        similarity = similarity_layer(feats, nt.take(feats, inputs.query))
        if inputs.cluster is None:
            return similarity
        restricted = similarity * Tensor(inputs.cluster.astype(np.float64))
        # the query is in its own cluster with cosine 1, so the sum is positive
        return restricted / nt.sum(restricted)

    def direction_scores(self, feats: Tensor, summary: Tensor) -> np.ndarray:
        """Text guidance for the continuity walk: each region projected into the
        question space and scored against the pooled question embedding."""
        return ((feats @ self.params["fusion.w_region"]) @ summary).data

    def prior(self, inputs: SceneInputs, feats: Tensor, summary: Tensor) -> Tensor:
        p, n = self.params, len(inputs.graph)
        if self.variant == "dot_product_attention":
            return attention_prior(summary, feats, p["attention.w_query"], p["attention.w_key"])
        similarity = self.similarity(inputs, feats)
        continuity = trace_continuity_path(inputs.graph, inputs.query, self.direction_scores(feats, summary),
                                           self.tower.decay, entity=inputs.entity)
        maps = nt.concat([Tensor(inputs.proximity.reshape(1, n)), nt.reshape(similarity, (1, n)),
                          Tensor(inputs.closure.reshape(1, n)), Tensor(continuity.reshape(1, n))], axis=0)
        gate = p["tower.gate"] + summary @ p["tower.w_gate_text"]
        return combine_layers(maps, gate, self.tower.disabled)

    def forward(self, inputs: SceneInputs, spec: InterventionSpec = InterventionSpec(),
                state: Optional[InterventionState] = None, dropout_seed: Optional[int] = None
                ) -> tuple[FusedRepresentation, Tensor]:
        text = inputs.text
        if spec.kind == "mask_text_token":
            if spec.target >= len(text):
                raise InvalidArgumentError(f"token {spec.target} outside the question")
            text = mask_token(text, spec.target)
        deleted = spec.target if spec.kind == "delete_region" else None
        text_emb = self.encode_text(text, dropout_seed)
        summary = nt.mean(text_emb, axis=0)
        feats = self.region_features(inputs, deleted)
        prior = self.prior(inputs, feats, summary)
        n = len(inputs.graph)
        gains = state.token_gains(text.ids) if state is not None else None
        joint = fuse_stage1(text_emb, prior, feats, self.params, text.c_mask, gains, prior_gain=float(n))
        if self.variant == "attention_weights_vs_causal_weights":
            weights = attention_weights(joint, text_emb, self.params)
        else:
            weights = text_causal_weights(joint)
        if state is not None and state.region_gain:
            weights = weights * Tensor(state.region_gains(inputs.scene_key, n))
        weights = sparsify(weights, min(self.config.fusion.sparsify_k, n))
        return fuse_stage2(joint, weights, self.params), prior

    def fuse(self, inputs: SceneInputs, spec: InterventionSpec, state: Optional[InterventionState] = None
             ) -> FusedRepresentation:
        return self.forward(inputs, spec, state)[0]

    # -------------------------------------------------------------------------
    # public surface
    # -------------------------------------------------------------------------

    def predict(self, inputs: SceneInputs) -> str:
        fused, _ = self.forward(inputs, state=self.state)
        ids = decode_answer(fused, self.decoder, state=self.state)
        return " ".join(self.answer_vocab[i] for i in ids)

    def answer_probabilities(self, inputs: SceneInputs) -> np.ndarray:
        """Teacher-forced probability of each gold answer token."""
        fused, _ = self.forward(inputs, state=self.state)
        return self.decoder.token_probabilities(fused, list(inputs.answer_ids), self.state)

    def role_logits(self, masked: CausalText) -> Tensor:
        emb = self.encode_text(masked)
        context = nt.mean(emb, axis=0)
        hidden = nt.take(emb, masked.masked_positions) + context
        return hidden @ self.params["text.w_role"] + self.params["text.b_role"]

    def loss(self, inputs: SceneInputs, step_seed: int) -> tuple[Tensor, dict]:
        """Total loss and its unweighted components; zero-weight terms are omitted."""
        train = self.config.train
        fused, prior = self.forward(inputs, state=self.state, dropout_seed=step_seed)
        task = self.decoder.loss(fused, list(inputs.answer_ids), self.state)
        total, parts = task, {"task": task.item()}
        if train.lambda_closure > 0 and self.variant != "no_closure":
            closure = soft_closure_loss(soft_prior_map(prior, inputs.graph), inputs.anchor_mask)
            total = total + train.lambda_closure * closure
            parts["closure"] = closure.item()
            parts["closure_hard"] = self.hard_closure(prior, inputs)
        if train.lambda_causal > 0:
            masked, labels = mask_triggers_pretext(inputs.text, self.config.text.mask_p, step_seed)
            causal = causal_cls_loss(self.role_logits(masked), labels) if len(labels) else Tensor(0.0)
            total = total + train.lambda_causal * causal
            parts["causal"] = causal.item()
        parts["total"] = total.item()
        return total, parts

    def hard_closure(self, prior: Tensor, inputs: SceneInputs) -> float:
        """1 - IoU of the prior binarized at tower.prior_threshold times its peak."""
        return closure_loss(rasterize_prior(prior.data, inputs.graph), inputs.anchor_mask,
                            theta=self.config.tower.prior_threshold)

    def loss_weights(self) -> dict:
        train = self.config.train
        return {"task": 1.0, "closure": train.lambda_closure, "causal": train.lambda_causal}

    # -------------------------------------------------------------------------
    # persistence
    # -------------------------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "config_hash": config_hash(self.config),
            "variant": self.variant,
            "seed": self.config.train.seed,
            "dims": {"width": self.config.fusion.width, "decoder_width": self.decoder_config.width,
                     "region_dim": self.region_dim, "attention_dim": self.attention_dim},
            "answer_vocab": self.answer_vocab,
            "question_vocab": self.question_vocab.tokens,
            "token_gain": {str(k): v for k, v in self.state.token_gain.items()},
            "region_gain": [[int(scene), int(region), gain]
                            for (scene, region), gain in sorted(self.state.region_gain.items())],
        }

    def save(self, path):
        tensors = dict(self.params)
        tensors["state.channel_gain"] = Tensor(self.state.channel_gain, name="state.channel_gain")
        return save_checkpoint(path, tensors, self.manifest())

    @classmethod
    def load(cls, path, config: BenchConfig) -> "VQAModel":
        tensors, manifest = load_checkpoint(path, expected_hash=config_hash(config))
        if manifest["answer_vocab"] != answer_vocabulary():
            raise ConfigError("checkpoint answer vocabulary differs from the current one")
        gain = tensors.pop("state.channel_gain").data.copy()
        regions = {(scene, region): g for scene, region, g in manifest.get("region_gain", [])}
        state = InterventionState(token_gain={int(k): v for k, v in manifest["token_gain"].items()},
                                  channel_gain=gain, region_gain=regions)
        return cls(config, params=tensors, state=state)


def layer_breakdown(model: VQAModel, inputs: SceneInputs) -> Optional[np.ndarray]:
    """(n, 4) layer maps the tower combined for one input; None for the attention baseline."""
    if model.variant == "dot_product_attention":
        return None
    feats = model.region_features(inputs)
    summary = nt.mean(model.encode_text(inputs.text), axis=0)
    similarity = model.similarity(inputs, feats).data
    continuity = trace_continuity_path(inputs.graph, inputs.query, model.direction_scores(feats, summary),
                                       model.tower.decay, entity=inputs.entity)
    return np.stack([inputs.proximity, similarity, inputs.closure, continuity], axis=1)

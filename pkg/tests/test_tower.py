import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from numeric import InvalidArgumentError, Tensor, grad_check
from numeric import tensor as nt
from regions import Image, graph_from_labels
from tower import (
    ProximityParams,
    TowerParams,
    attention_prior,
    binarize_prior,
    closure_layer,
    closure_loss,
    cluster_regions,
    combine_layers,
    complete_contour,
    entity_mask,
    gate_coefficients,
    gestalt_forward,
    proximity_weights,
    rasterize_prior,
    similarity_layer,
    similarity_weights,
    soft_closure_loss,
    soft_prior_map,
    trace_continuity_path,
)


def square_outline(gap: int = 2) -> np.ndarray:
    """32x32 edge map of a 16-px square outline with a gap in its top side."""
    edges = np.zeros((32, 32), dtype=bool)
    edges[8, 8:24] = edges[23, 8:24] = True
    edges[8:24, 8] = edges[8:24, 23] = True
    edges[8, 15:15 + gap] = False
    return edges


@pytest.fixture
def square_graph():
    """Outside of the square is region 0, the inside region 1."""
    labels = np.zeros((32, 32), dtype=np.int64)
    labels[9:23, 9:23] = 1
    return graph_from_labels(Image.from_array(np.zeros((32, 32))), labels)


# -----------------------------------------------------------------------------
# gate
# -----------------------------------------------------------------------------

def test_gate_is_convex():
    c = gate_coefficients([0.5, -1.0, 2.0, 0.0])
    assert c.sum() == pytest.approx(1.0)
    assert (c > 0).all()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=4, max_size=4), st.integers(0, 2 ** 16))
def test_gated_prior_is_a_convex_combination(logits, seed):
    maps = np.random.default_rng(seed).dirichlet(np.ones(6), size=4)
    coefficients = gate_coefficients(logits)
    assert (coefficients >= 0).all() and coefficients.sum() == pytest.approx(1.0)
    combined = combine_layers(Tensor(maps), Tensor(np.array(logits))).numpy()
    assert combined.sum() == pytest.approx(1.0)
    assert (combined >= maps.min(axis=0) - 1e-12).all()
    assert (combined <= maps.max(axis=0) + 1e-12).all()


def test_gate_disabled_layers_get_nothing():
    c = gate_coefficients([0.0, 0.0, 0.0, 0.0], disabled=("closure",))
    np.testing.assert_allclose(c, [1 / 3, 1 / 3, 0.0, 1 / 3])


def test_gate_positive_infinity_takes_all():
    c = gate_coefficients([math.inf, 0.0, math.inf, 3.0])
    np.testing.assert_allclose(c, [0.5, 0.0, 0.5, 0.0])


def test_gate_rejects_nan_and_all_disabled():
    with pytest.raises(InvalidArgumentError):
        gate_coefficients([math.nan, 0.0, 0.0, 0.0])
    with pytest.raises(InvalidArgumentError):
        gate_coefficients([0.0] * 4, disabled=("proximity", "similarity", "closure", "continuity"))
    with pytest.raises(InvalidArgumentError):
        gate_coefficients([0.0] * 3)


def test_tower_params_validation():
    with pytest.raises(InvalidArgumentError):
        ProximityParams(tau=0.0)
    with pytest.raises(InvalidArgumentError):
        ProximityParams(hops=0)
    with pytest.raises(InvalidArgumentError):
        TowerParams(decay=1.0)
    with pytest.raises(InvalidArgumentError):
        TowerParams(disabled=("symmetry",))


# -----------------------------------------------------------------------------
# layers
# -----------------------------------------------------------------------------

def test_proximity_decays_with_distance(quadrant_graph):
    w = proximity_weights(quadrant_graph, 0, ProximityParams(tau=4.0))
    assert w.sum() == pytest.approx(1.0)
    assert w[1] == pytest.approx(w[2])
    assert w[0] > w[1] > w[3]


def test_proximity_hop_limit(quadrant_graph):
    w = proximity_weights(quadrant_graph, 0, ProximityParams(tau=4.0, hops=1))
    assert w[3] == 0.0
    assert w[:3].sum() == pytest.approx(1.0)


def test_similarity_prefers_matching_color(quadrant_graph):
    feats = quadrant_graph.features()
    w = similarity_weights(quadrant_graph, feats[1])
    assert int(np.argmax(w)) == 1
    assert w.sum() == pytest.approx(1.0)


def test_similarity_restriction_and_zero_query(quadrant_graph):
    feats = quadrant_graph.features()
    w = similarity_weights(quadrant_graph, feats[0], restrict_to=[True, False, True, False])
    assert w[1] == w[3] == 0.0
    with pytest.raises(InvalidArgumentError):
        similarity_weights(quadrant_graph, np.zeros(feats.shape[1]))


def test_differentiable_similarity_matches_numpy(quadrant_graph):
    feats = quadrant_graph.features()
    diff = similarity_layer(Tensor(feats), Tensor(feats[2])).numpy()
    np.testing.assert_allclose(diff, similarity_weights(quadrant_graph, feats[2]), atol=1e-9)


def test_cluster_regions_edge_cases(quadrant_graph):
    np.testing.assert_array_equal(cluster_regions(quadrant_graph, 4), [0, 1, 2, 3])
    np.testing.assert_array_equal(cluster_regions(quadrant_graph, 1), [0, 0, 0, 0])
    labels = cluster_regions(quadrant_graph, 2, seed=3)
    assert labels[0] == 0
    assert set(labels.tolist()) == {0, 1}
    with pytest.raises(InvalidArgumentError):
        cluster_regions(quadrant_graph, 5)


def test_continuity_without_guidance_is_uniform(quadrant_graph):
    w = trace_continuity_path(quadrant_graph, 0, None, 0.5)
    np.testing.assert_allclose(w, 0.25)


def test_continuity_follows_scores(quadrant_graph):
    w = trace_continuity_path(quadrant_graph, 0, [0.0, 1.0, 0.0, 5.0], 0.5)
    # path 0 -> 1 -> 3 -> 2 with geometric decay
    np.testing.assert_allclose(w, np.array([1.0, 0.5, 0.125, 0.25]) / 1.875)


def test_continuity_skips_background(quadrant_graph):
    entity = np.array([True, False, False, True])
    w = trace_continuity_path(quadrant_graph, 0, None, 0.5, entity=entity)
    np.testing.assert_allclose(w, [0.5, 0.0, 0.0, 0.5])


def test_entity_mask_ground_truth_shape(quadrant_graph):
    with pytest.raises(InvalidArgumentError):
        entity_mask(quadrant_graph, 0.01, ground_truth=[True, False])


# -----------------------------------------------------------------------------
# contours and closure
# -----------------------------------------------------------------------------

def test_small_gap_is_bridged():
    contours = complete_contour(square_outline(gap=2), bridge_gap_max=5.0)
    assert contours.closed_flags == (True,)
    assert len(contours.bridges[0]) == 2
    fill = contours.filled_mask()
    assert fill[15, 15] and not fill[2, 2]


def test_large_gap_stays_open():
    contours = complete_contour(square_outline(gap=2), bridge_gap_max=1.0)
    assert contours.closed_flags == (False,)
    ends = sorted(contours.gap_endpoints[0])
    assert ends == [(14, 8), (17, 8)]
    assert not contours.filled_mask().any()


def test_closed_outline_needs_no_bridge():
    contours = complete_contour(square_outline(gap=0))
    assert contours.closed_flags == (True,)
    assert len(contours.bridges[0]) == 0
    assert len(contours.contours[0]) == 60


def test_closure_layer_prefers_enclosed_region(square_graph):
    contours = complete_contour(square_outline(), bridge_gap_max=5.0)
    w = closure_layer(square_graph, contours, query=1)
    assert w.sum() == pytest.approx(1.0)
    assert w[1] > 0.9
    np.testing.assert_allclose(closure_layer(square_graph, None), [0.5, 0.5])


def test_closure_loss_iou(square_graph):
    mask = square_graph.labels == 1
    prior = rasterize_prior(np.array([0.1, 0.9]), square_graph)
    assert closure_loss(prior, mask) == pytest.approx(0.0)
    assert closure_loss(prior, ~mask) == pytest.approx(1.0)
    assert not binarize_prior(np.zeros((3, 3))).any()
    with pytest.raises(InvalidArgumentError):
        closure_loss(prior, mask[:4])


def test_soft_closure_loss_is_zero_on_exact_map(square_graph):
    mask = square_graph.labels == 1
    pixel_map = soft_prior_map(Tensor([0.0, 1.0]), square_graph)
    assert soft_closure_loss(pixel_map, mask).item() == pytest.approx(0.0)
    assert soft_closure_loss(pixel_map, ~mask).item() == pytest.approx(1.0)


def test_soft_closure_loss_gradient(square_graph):
    mask = square_graph.labels == 1

    def fn(prior):
        return soft_closure_loss(soft_prior_map(nt.softmax(prior), square_graph), mask)

    assert grad_check(fn, Tensor([0.3, -0.2]), eps=1e-5, floor=1e-3) < 1e-4


# -----------------------------------------------------------------------------
# combination
# -----------------------------------------------------------------------------

def test_gestalt_forward_is_a_distribution(quadrant_graph):
    feats = quadrant_graph.features()
    prior = gestalt_forward(quadrant_graph, 0, feats[0], None, [0.0, 0.0, 0.0, 0.0],
                            TowerParams(disabled=("closure",)),
                            contours=complete_contour(np.zeros((8, 8), dtype=bool)),
                            entity=np.ones(4, dtype=bool))
    assert prior.weights.sum() == pytest.approx(1.0)
    assert prior.gate[2] == 0.0
    assert prior.layer_contrib.shape == (4, 4)
    np.testing.assert_allclose(prior.weights, prior.layer_contrib @ prior.gate)


def test_combine_layers_matches_gate_coefficients():
    maps = np.array([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    logits = np.array([0.4, -0.3, 1.0, 0.2])
    combined = combine_layers(Tensor(maps), Tensor(logits), disabled=("similarity",)).numpy()
    np.testing.assert_allclose(combined, gate_coefficients(logits, ("similarity",)) @ maps)

    def fn(gate):
        return nt.sum(combine_layers(Tensor(maps), gate) * Tensor([1.0, 2.0, 3.0]))

    assert grad_check(fn, Tensor(logits), eps=1e-5, floor=1e-3) < 1e-4


def test_attention_prior_is_a_distribution():
    rng = np.random.default_rng(0)
    out = attention_prior(Tensor(rng.normal(size=5)), Tensor(rng.normal(size=(7, 3))),
                          Tensor(rng.normal(size=(5, 2))), Tensor(rng.normal(size=(3, 2)))).numpy()
    assert out.shape == (7,)
    assert out.sum() == pytest.approx(1.0)


def test_sobel_edges_follow_intensity_step(two_tone_image):
    from tower import sobel_edge_map

    edges = sobel_edge_map(two_tone_image, threshold=0.1)
    assert edges.any()
    assert not edges[:, :5].any() and not edges[:, 11:].any()

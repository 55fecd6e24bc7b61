"""Gestalt tower - layer maps over the region graph and the combined prior."""

from .contours import (
    ContourSet,
    binarize_prior,
    closure_loss,
    complete_contour,
    rasterize_prior,
    sobel_edge_map,
    soft_closure_loss,
    soft_prior_map,
)
from .layers import (
    LAYERS,
    GestaltPrior,
    ProximityParams,
    TowerParams,
    attention_prior,
    closure_layer,
    cluster_regions,
    combine_layers,
    contours_for,
    entity_component,
    entity_mask,
    gate_coefficients,
    gestalt_forward,
    layer_maps,
    proximity_weights,
    similarity_layer,
    similarity_weights,
    trace_continuity_path,
)

__all__ = [
    "LAYERS",
    "ContourSet",
    "GestaltPrior",
    "ProximityParams",
    "TowerParams",
    "attention_prior",
    "binarize_prior",
    "closure_layer",
    "closure_loss",
    "cluster_regions",
    "combine_layers",
    "complete_contour",
    "contours_for",
    "entity_component",
    "entity_mask",
    "gate_coefficients",
    "gestalt_forward",
    "layer_maps",
    "proximity_weights",
    "rasterize_prior",
    "similarity_layer",
    "similarity_weights",
    "sobel_edge_map",
    "soft_closure_loss",
    "soft_prior_map",
]

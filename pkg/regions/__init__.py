"""Region graph package - superpixels, adjacency and image I/O."""

from .graph import (
    Image,
    Region,
    RegionGraph,
    attach_features,
    build_adjacency,
    graph_from_labels,
    region_features,
    segment_slic,
    spatial_distance,
)
from .pnm import read_graph, read_pnm, write_graph, write_pgm, write_pnm

__all__ = [
    "Image",
    "Region",
    "RegionGraph",
    "attach_features",
    "build_adjacency",
    "graph_from_labels",
    "read_graph",
    "read_pnm",
    "region_features",
    "segment_slic",
    "spatial_distance",
    "write_graph",
    "write_pgm",
    "write_pnm",
]

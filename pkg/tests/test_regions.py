import numpy as np
import pytest

from numeric import InvalidArgumentError, NotFoundError
from regions import (
    Image,
    Region,
    attach_features,
    build_adjacency,
    graph_from_labels,
    read_graph,
    read_pnm,
    segment_slic,
    spatial_distance,
    write_graph,
    write_pgm,
    write_pnm,
)


def test_image_validates_range_and_size():
    with pytest.raises(InvalidArgumentError):
        Image(width=2, height=2, channels=1, data=[0.0, 0.5, 1.5, 0.0])
    with pytest.raises(InvalidArgumentError):
        Image(width=2, height=2, channels=1, data=[0.0, 0.5])
    with pytest.raises(InvalidArgumentError):
        Image(width=1, height=1, channels=2, data=[0.0, 0.5])


def test_quadrant_graph_structure(quadrant_graph):
    g = quadrant_graph
    assert len(g) == 4
    assert [e[:2] for e in g.edges] == [(0, 1), (0, 2), (1, 3), (2, 3)]
    assert g.neighbors(0) == (1, 2)
    assert g.region(3).centroid == (5.5, 5.5)
    assert g.region(0).area == 16
    np.testing.assert_allclose(g.region(1).feature[:3], [0.0, 1.0, 0.0])
    assert g.edges[0][2] == pytest.approx(4.0)


def test_region_lookup_out_of_range(quadrant_graph):
    with pytest.raises(NotFoundError):
        quadrant_graph.region(4)
    with pytest.raises(NotFoundError):
        quadrant_graph.neighbors(-1)


def test_hop_distances(quadrant_graph):
    np.testing.assert_array_equal(quadrant_graph.hop_distances(0), [0, 1, 1, 2])


def test_boundary_is_subset_of_pixels(quadrant_graph):
    for region in quadrant_graph.regions:
        pixels = {tuple(p) for p in region.pixels}
        assert {tuple(p) for p in region.boundary} <= pixels
        assert 0 < len(region.boundary) < region.area


def test_graph_from_labels_rejects_gaps():
    image = Image.from_array(np.zeros((2, 2)))
    with pytest.raises(InvalidArgumentError):
        graph_from_labels(image, np.array([[0, 0], [2, 2]]))
    with pytest.raises(InvalidArgumentError):
        graph_from_labels(image, np.zeros((3, 2), dtype=int))


def test_build_adjacency_matches_graph(quadrant_graph):
    edges = build_adjacency(list(quadrant_graph.regions))
    assert [e[:2] for e in edges] == [e[:2] for e in quadrant_graph.edges]
    assert build_adjacency([]) == []


def test_build_adjacency_rejects_overlap():
    a = Region(id=0, pixels=[[0, 0], [1, 0]], centroid=(0.5, 0.0), feature=[0.0], boundary=[[0, 0]])
    b = Region(id=1, pixels=[[1, 0]], centroid=(1.0, 0.0), feature=[0.0], boundary=[[1, 0]])
    with pytest.raises(InvalidArgumentError):
        build_adjacency([a, b])


def test_spatial_distance_metrics(quadrant_graph):
    a, d = quadrant_graph.region(0), quadrant_graph.region(3)
    assert spatial_distance(a, d) == pytest.approx(np.hypot(4, 4))
    assert spatial_distance(a, d, "manhattan") == pytest.approx(8.0)
    with pytest.raises(InvalidArgumentError):
        spatial_distance(a, d, "chebyshev")


def test_attach_features_appends(quadrant_graph):
    extended = attach_features(quadrant_graph, np.eye(4)[:, :2])
    assert extended.features().shape == (4, quadrant_graph.features().shape[1] + 2)
    with pytest.raises(InvalidArgumentError):
        attach_features(quadrant_graph, np.zeros((3, 2)))


def test_slic_partitions_and_orders_ids(two_tone_image):
    graph = segment_slic(two_tone_image, k=4, compactness=0.1, iters=5)
    labels = graph.labels
    assert labels.min() == 0 and labels.max() == len(graph) - 1
    assert sum(r.area for r in graph.regions) == 16 * 16
    # ids follow raster order of each region's first pixel
    firsts = [int(np.flatnonzero(labels.ravel() == rid)[0]) for rid in range(len(graph))]
    assert firsts == sorted(firsts)
    # no region straddles the intensity step
    for region in graph.regions:
        xs = region.pixels[:, 0]
        assert (xs < 8).all() or (xs >= 8).all()


def test_slic_is_deterministic(two_tone_image):
    a = segment_slic(two_tone_image, k=6)
    b = segment_slic(two_tone_image, k=6)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.edges == b.edges


def test_slic_edges_are_symmetric(two_tone_image):
    graph = segment_slic(two_tone_image, k=8)
    for a, b, dist in graph.edges:
        assert a < b
        assert b in graph.neighbors(a) and a in graph.neighbors(b)
        assert dist >= 0


def test_slic_argument_checks(two_tone_image):
    with pytest.raises(InvalidArgumentError):
        segment_slic(two_tone_image, k=0)
    with pytest.raises(InvalidArgumentError):
        segment_slic(two_tone_image, k=16 * 16 + 1)
    with pytest.raises(InvalidArgumentError):
        segment_slic(two_tone_image, k=4, compactness=-1.0)


def test_slic_single_region():
    graph = segment_slic(Image.from_array(np.full((5, 5), 0.5)), k=1)
    assert len(graph) == 1
    assert graph.edges == ()


def test_slic_uniform_quadrants():
    graph = segment_slic(Image.from_array(np.full((6, 6), 0.5)), k=4)
    assert graph.areas().tolist() == [9, 9, 9, 9]
    np.testing.assert_allclose(graph.centroids(), [(1, 1), (4, 1), (1, 4), (4, 4)])


def test_slic_uniform_eight_by_eight():
    graph = segment_slic(Image.from_array(np.full((8, 8), 0.5)), k=4)
    assert len(graph) == 4
    assert graph.areas().sum() == 64
    corners = {int(graph.labels[y, x]) for x, y in [(1, 1), (6, 1), (1, 6), (6, 6)]}
    assert corners == {0, 1, 2, 3}


def test_slic_splits_halves():
    data = np.zeros((8, 16))
    data[:, 8:] = 1.0
    graph = segment_slic(Image.from_array(data), k=2)
    assert len(graph) == 2
    assert (graph.labels[:, :8] == 0).all() and (graph.labels[:, 8:] == 1).all()
    np.testing.assert_allclose(graph.centroids(), [(3.5, 3.5), (11.5, 3.5)])


def test_pnm_and_graph_files(tmp_path, quadrant_graph):
    path = tmp_path / "scene.ppm"
    write_pnm(path, quadrant_graph.image)
    loaded = read_pnm(path)
    assert (loaded.width, loaded.height, loaded.channels) == (8, 8, 3)
    np.testing.assert_allclose(loaded.data, quadrant_graph.image.data)

    write_pgm(tmp_path / "labels.pgm", quadrant_graph.labels, labels=True)
    np.testing.assert_allclose(read_pnm(tmp_path / "labels.pgm").data[:, :, 0] * 255,
                               quadrant_graph.labels)

    write_graph(tmp_path / "graph.txt", quadrant_graph)
    regions, edges = read_graph(tmp_path / "graph.txt")
    assert [r["npix"] for r in regions] == [16, 16, 16, 16]
    assert [e[:2] for e in edges] == [(0, 1), (0, 2), (1, 3), (2, 3)]


def test_read_graph_rejects_garbage(tmp_path):
    path = tmp_path / "graph.txt"
    path.write_text("R 0 1.0\n")
    with pytest.raises(InvalidArgumentError):
        read_graph(path)


def test_read_pnm_rejects_ascii(tmp_path):
    path = tmp_path / "ascii.pgm"
    path.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(InvalidArgumentError):
        read_pnm(path)


def test_read_pnm_rejects_truncated_body(tmp_path):
    path = tmp_path / "short.pgm"
    path.write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(InvalidArgumentError):
        read_pnm(path)

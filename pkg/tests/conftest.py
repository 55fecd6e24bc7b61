import numpy as np
import pytest

from regions import Image, graph_from_labels


@pytest.fixture
def two_tone_image():
    """16x16 gray image: dark left half, bright right half."""
    data = np.full((16, 16), 0.1)
    data[:, 8:] = 0.9
    return Image.from_array(data)


@pytest.fixture
def quadrant_graph():
    """Four 4x4 quadrants of an 8x8 image, each its own region."""
    data = np.zeros((8, 8, 3))
    data[:4, :4] = (1.0, 0.0, 0.0)
    data[:4, 4:] = (0.0, 1.0, 0.0)
    data[4:, :4] = (1.0, 0.0, 0.0)
    data[4:, 4:] = (0.0, 0.0, 1.0)
    labels = np.zeros((8, 8), dtype=np.int64)
    labels[:4, 4:] = 1
    labels[4:, :4] = 2
    labels[4:, 4:] = 3
    return graph_from_labels(Image.from_array(data), labels)


@pytest.fixture
def ring_image():
    """32x32 gray image with a one-pixel bright square outline."""
    data = np.zeros((32, 32))
    data[8, 8:24] = 1.0
    data[23, 8:24] = 1.0
    data[8:24, 8] = 1.0
    data[8:24, 23] = 1.0
    return Image.from_array(data)


@pytest.fixture(scope="session")
def tiny_config():
    """Small model and data sizes so a forward/backward pass stays fast."""
    from harness.config import BenchConfig, DataConfig, FusionConfig, SegmentationConfig, TrainConfig

    return BenchConfig(
        segmentation=SegmentationConfig(k=24, iters=4),
        fusion=FusionConfig(width=8, conv_channels=4, decoder_width=16, blocks=2, intervention_blocks=(1, 2),
                            expert_hidden=8, sparsify_k=8, strengthen_top_k=4),
        train=TrainConfig(epochs=1, batch_size=2),
        data=DataConfig(n_train=4, n_eval=3),
    )


@pytest.fixture(scope="session")
def tiny_data(tiny_config):
    from harness import prepare_data

    return prepare_data(tiny_config)

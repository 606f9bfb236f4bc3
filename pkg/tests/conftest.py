import numpy as np
import pytest
import torch

from advsdg import make_toy_dataset
from advsdg.data import normalize_zscore


@pytest.fixture(scope="session")
def toy32():
    """Eight small flat-textured scenes; session-scoped, treat as read-only."""
    return make_toy_dataset(8, "flat", seed=3, image_size=32)


@pytest.fixture(scope="session")
def toy_batch(toy32):
    images = torch.from_numpy(
        np.stack([normalize_zscore(s.image) for s in toy32])).float().unsqueeze(1)
    labels = torch.from_numpy(np.stack([s.mask for s in toy32]).astype(np.int64))
    return images, labels


def random_simplex(rng, shape_bkhw):
    """Random soft predictions: positive entries normalized over the class axis."""
    b, k, h, w = shape_bkhw
    raw = rng.uniform(0.05, 1.0, size=(b, k, h, w))
    return torch.from_numpy(raw / raw.sum(axis=1, keepdims=True))

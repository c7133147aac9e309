import numpy as np
import pytest
from hypothesis import settings

from awsaug.data import synth_dataset
from awsaug.search import SearchData

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_images(n, rng, min_side=2, max_side=12):
    out = []
    for _ in range(n):
        h, w = rng.integers(min_side, max_side + 1, size=2)
        c = 3 if rng.random() < 0.8 else 1
        if rng.random() < 0.3:
            # few distinct levels, so histogram ties and flat channels show up
            levels = rng.integers(0, 256, size=rng.integers(1, 4))
            img = rng.choice(levels, size=(h, w, c))
        else:
            img = rng.integers(0, 256, size=(h, w, c))
        out.append(img.astype(np.uint8))
    return out


@pytest.fixture(scope="session")
def tiny_data():
    full = synth_dataset(160, seed=3, noise=30.0)
    train = full.subset(np.arange(100), "train")
    val = full.subset(np.arange(100, 160), "val")
    return SearchData(train, val)


def rel_err(analytic, numeric, floor=1e-4):
    """Max-abs error relative to the numeric gradient's scale (floored for near-zero gradients)."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), floor))

import numpy as np
import pytest

from trajod import FeatureSet, UNLABELED


def make_fs(features, labels, n_classes, names=None):
    """Build a FeatureSet from plain arrays (float32-coerced)."""
    features = [np.atleast_2d(np.asarray(f, dtype=np.float32)) for f in features]
    if names is None:
        names = [f"layer{i}" for i in range(len(features) - 1)] + ["logits"]
    return FeatureSet.create(names, features, np.asarray(labels, dtype=np.uint32), n_classes)


def random_fs(rng, n=20, dims=(3, 5), n_classes=2, unlabeled=False):
    feats = [rng.standard_normal((n, d)) for d in dims] + [
        rng.standard_normal((n, n_classes))
    ]
    if unlabeled:
        labels = np.full(n, UNLABELED, dtype=np.uint32)
    else:
        labels = (np.arange(n) % n_classes).astype(np.uint32)
    return make_fs(feats, labels, n_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)

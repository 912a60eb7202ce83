"""Small hand-built datasets shared by the tests."""

import numpy as np

from annomap.corpus import Annotation, Dataset, Sample
from annomap.metrics import ScalingParams


def grid_dataset(n_samples=40, n_groups=10, annotators=("a", "b", "c"), feature_dim=3, seed=0, name="grid"):
    """Every annotator labels every sample; labels depend linearly on features."""
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n_samples, feature_dim))
    samples = [Sample(f"x{i:03d}", feats[i], f"g{i % n_groups}") for i in range(n_samples)]
    anns = []
    for k, a in enumerate(annotators):
        for i in range(n_samples):
            act = np.tanh(feats[i, 0] + 0.1 * k)
            val = np.tanh(feats[i, 1] - 0.1 * k)
            anns.append(Annotation(f"x{i:03d}", a, float(act), float(val)))
    unit = ScalingParams(-1.0, 1.0)
    return Dataset.from_records(name, samples, anns, declared_range=(unit, unit))


def tiny_dataset():
    samples = [Sample(f"s{i}", np.array([float(i), 1.0]), f"g{i}") for i in range(3)]
    anns = [
        Annotation("s0", "a1", 1.0, 2.0),
        Annotation("s0", "a2", 3.0, 4.0),
        Annotation("s1", "a1", 5.0, 6.0),
        Annotation("s2", "a2", 7.0, 1.0),
    ]
    return Dataset.from_records("tiny", samples, anns, declared_range=(ScalingParams(1, 7), ScalingParams(1, 7)))

"""Shared builders for the test suite."""

import numpy as np
import pytest

from drm_monitor.data import ClusteredDataset, PopulationSample


def make_dataset(pop_clusters, labels=None):
    """Build a dataset from a list of lists of cluster value lists."""
    pops = []
    for k, clusters in enumerate(pop_clusters):
        label = labels[k] if labels else f"P{k}"
        pops.append(PopulationSample(label=label, clusters=tuple(np.asarray(c, dtype=float) for c in clusters)))
    return ClusteredDataset(populations=tuple(pops))


def random_dataset(rng, m=None, q_positive=True, max_clusters=6, max_d=3):
    """Small random dataset for property tests; values kept positive."""
    m = int(rng.integers(1, 4)) if m is None else m
    pops = []
    for k in range(m + 1):
        n_k = int(rng.integers(2, max_clusters + 1))
        clusters = []
        for _ in range(n_k):
            d = int(rng.integers(1, max_d + 1))
            vals = rng.lognormal(mean=0.2 * k, sigma=0.6, size=d)
            clusters.append(vals)
        pops.append(PopulationSample(label=f"P{k}", clusters=tuple(clusters)))
    return ClusteredDataset(populations=tuple(pops))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)

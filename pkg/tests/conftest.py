"""Shared fixtures: the packaged item table and small synthetic datasets."""

import numpy as np
import pytest

from mgdif.booklet import load_booklet
from mgdif.irt import ItemParams, ResponseMatrix, icc


@pytest.fixture(scope="session")
def booklet():
    return load_booklet()


def simulate_groups(items, group_dists, sizes, seed):
    """Bernoulli responses for each group from known item parameters.

    items: list of ItemParams; group_dists: list of (mu, sigma);
    sizes: persons per group.
    """
    rng = np.random.default_rng(seed)
    blocks, gop = [], []
    for g, ((mu, sigma), n) in enumerate(zip(group_dists, sizes)):
        theta = rng.normal(mu, sigma, size=n)
        probs = np.stack([icc(it, theta) for it in items], axis=1)
        blocks.append((rng.random(probs.shape) < probs).astype(float))
        gop += [g] * n
    return ResponseMatrix(
        np.vstack(blocks), np.array(gop),
        [f"i{k + 1}" for k in range(len(items))],
        [f"g{g + 1}" for g in range(len(sizes))])


@pytest.fixture
def two_group_2pl():
    """Moderate two-group 2PL dataset with no group differences in items."""
    items = [ItemParams(a, b) for a, b in
             ((1.2, -0.8), (0.9, 0.0), (1.6, 0.5), (1.1, 1.1), (1.4, -0.3),
              (0.8, 0.8))]
    return simulate_groups(items, [(0.0, 1.0), (-0.4, 0.9)],
                           [400, 400], seed=7)

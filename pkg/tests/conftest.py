import numpy as np
import pytest

from mqre import ClusterBlock, GroupedDesign


def make_clean_design(
    m=100,
    n_j=15,
    seed=0,
    sigma_gamma=1.0,
    sigma_eps2=3.3,
    beta=(100.0, 2.0),
    w1=None,
    w2=None,
):
    """Gaussian random-intercept data on a balanced two-level layout."""
    rng = np.random.default_rng(seed)
    gamma = rng.normal(0.0, sigma_gamma, m)
    x = rng.uniform(0.0, 20.0, m * n_j)
    eps = rng.normal(0.0, np.sqrt(sigma_eps2), m * n_j)
    ci = np.repeat(np.arange(m), n_j)
    y = beta[0] + beta[1] * x + gamma[ci] + eps
    X = np.column_stack([np.ones(m * n_j), x])
    blocks = []
    for j in range(m):
        sl = slice(j * n_j, (j + 1) * n_j)
        blocks.append(
            ClusterBlock(
                X=X[sl],
                y=y[sl],
                w1=np.ones(n_j) if w1 is None else w1[sl],
                w2=1.0 if w2 is None else w2[j],
                id=j,
            )
        )
    return GroupedDesign(blocks)


@pytest.fixture(scope="session")
def clean_design():
    """100 clusters x 15 units of clean Gaussian data (n = 1500)."""
    return make_clean_design(m=100, n_j=15, seed=42)


@pytest.fixture(scope="session")
def small_design():
    """Small unbalanced design with nontrivial weights, for exact checks."""
    rng = np.random.default_rng(5)
    blocks = []
    for j, n_j in enumerate([4, 6, 5]):
        x = rng.uniform(0.0, 10.0, n_j)
        y = 1.0 + 0.5 * x + rng.normal(0.0, 1.0, n_j) + rng.normal(0.0, 0.7)
        blocks.append(
            ClusterBlock(
                X=np.column_stack([np.ones(n_j), x]),
                y=y,
                w1=rng.uniform(0.5, 3.0, n_j),
                w2=float(j + 1),
                id=f"c{j}",
            )
        )
    return GroupedDesign(blocks)

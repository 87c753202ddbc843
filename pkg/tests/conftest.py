import numpy as np
import pytest

from fedfair import ScoredSample, build_bundles


def make_samples(rng, n_per_stratum, num_clients=2, num_groups=2, spread=0.18):
    """Continuous synthetic samples with group-1 scores shifted down."""
    samples = []
    for i in range(num_clients):
        for y in (0, 1):
            for a in range(num_groups):
                n = n_per_stratum if isinstance(n_per_stratum, int) else n_per_stratum[(i, y, a)]
                mu = 0.35 + 0.3 * y - 0.05 * a + 0.02 * i
                scores = np.clip(rng.normal(mu, spread, n), 0.0, 1.0)
                # avoid exact 0/1 ties from clipping
                scores = 0.001 + 0.998 * scores
                samples.extend(ScoredSample(i, y, a, float(s)) for s in scores)
    return samples


@pytest.fixture
def small_bundles():
    rng = np.random.default_rng(1234)
    return build_bundles(make_samples(rng, 25), 7, 300, keep_sorted=True)


@pytest.fixture
def rng():
    return np.random.default_rng(987)

import numpy as np
import pytest

from latentalign.spectral import EmbeddingStack


def random_unit_columns(rng, d, k):
    cols = rng.standard_normal((d, k))
    return cols / np.linalg.norm(cols, axis=0)


def random_stack(rng, d, k, min_gap=0.0, ids=None):
    """Random unit-column stack, resampled until the spectral gap clears
    ``min_gap``."""
    from latentalign.spectral import spectral_gap

    if ids is None:
        ids = tuple(f"m{i}" for i in range(k))
    while True:
        mat = random_unit_columns(rng, d, k)
        if min_gap <= 0.0 or spectral_gap(mat) > min_gap:
            return EmbeddingStack(mat, ids)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

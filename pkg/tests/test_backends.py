import numpy as np
import pytest

from latentalign import backends
from latentalign.spectral import decompose


def battery(rng):
    mats = []
    for _ in range(40):
        d = int(rng.integers(1, 12))
        k = int(rng.integers(1, 12))
        m = rng.standard_normal((d, k))
        mats.append(m)
    rank_def = rng.standard_normal((6, 4))
    rank_def[:, 1] = rank_def[:, 0]
    rank_def[:, 3] = -2.0 * rank_def[:, 2]
    mats.append(rank_def)
    mats.append(np.zeros((4, 3)))
    mats.append(np.ones((1, 5)))
    return mats


def contract_holds(svd, m):
    u, s, v = svd(m)
    p = min(m.shape)
    assert u.shape == (m.shape[0], p) and v.shape == (m.shape[1], p)
    eye = np.eye(p)
    assert np.max(np.abs(u.T @ u - eye)) < 1e-8
    assert np.max(np.abs(v.T @ v - eye)) < 1e-8
    assert np.all(s >= 0) and np.all(np.diff(s) <= 1e-15)
    assert np.linalg.norm((u * s) @ v.T - m) <= 1e-8 * (1 + np.linalg.norm(m))


def test_python_backend_contract(rng):
    for m in battery(rng):
        contract_holds(backends._svd_python, m)


@pytest.mark.skipif(not backends.compiled_available(),
                    reason="compiled kernel not built")
def test_compiled_backend_contract(rng):
    for m in battery(rng):
        contract_holds(backends._svd_compiled, m)


@pytest.mark.skipif(not backends.compiled_available(),
                    reason="compiled kernel not built")
def test_backends_agree(rng):
    for m in battery(rng):
        s_c = backends._svd_compiled(m)[1]
        s_p = backends._svd_python(m)[1]
        scale = max(1.0, float(s_p[0]) if len(s_p) else 1.0)
        assert np.max(np.abs(s_c - s_p)) < 1e-12 * scale
        if min(m.shape) >= 2 and len(s_p) >= 2 and s_p[0] - s_p[1] > 1e-6:
            with backends.use_backend(backends.COMPILED):
                u_c = decompose(m).left_vectors[:, 0]
            with backends.use_backend(backends.PYTHON):
                u_p = decompose(m).left_vectors[:, 0]
            assert np.max(np.abs(u_c - u_p)) < 1e-9


def test_use_backend_restores():
    before = backends.active_backend()
    with backends.use_backend(backends.PYTHON):
        assert backends.active_backend() == backends.PYTHON
    assert backends.active_backend() == before


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        backends.set_backend("fortran")

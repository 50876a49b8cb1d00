"""Backend selection for the small-matrix SVD kernel.

Two interchangeable implementations exist:

``compiled``
    Cython one-sided Jacobi (:mod:`latentalign._svdcore`), fastest on the
    tiny per-instance stacks that dominate training and diagnostics.
``python``
    numpy's LAPACK path, used when the extension is unavailable.

The active backend is chosen at import time: the compiled kernel when it
imports, otherwise the Python fallback.  Set ``LATENTALIGN_BACKEND`` to
``compiled`` or ``python`` to force one.  Both backends satisfy the same
contract (orthonormal factors, nonincreasing singular values,
reconstruction to 1e-8); results may differ in the last floating-point
bits, so reproduction manifests record which backend produced a run.
"""

import contextlib
import os

import numpy as np

try:
    from latentalign import _svdcore
except ImportError:  # pragma: no cover - build-dependent
    _svdcore = None

COMPILED = "compiled"
PYTHON = "python"


def compiled_available():
    return _svdcore is not None


def _svd_compiled(mat):
    d, k = mat.shape
    if d >= k:
        u, s, v = _svdcore.jacobi_svd(np.ascontiguousarray(mat, dtype=float))
        return u, s, v
    u, s, v = _svdcore.jacobi_svd(np.ascontiguousarray(mat.T, dtype=float))
    return v, s, u


def _svd_python(mat):
    u, s, vt = np.linalg.svd(np.asarray(mat, dtype=float), full_matrices=False)
    return u, s, vt.T


_IMPLS = {COMPILED: _svd_compiled, PYTHON: _svd_python}


def _initial_backend():
    forced = os.environ.get("LATENTALIGN_BACKEND")
    if forced:
        if forced not in _IMPLS:
            raise ValueError(f"unknown LATENTALIGN_BACKEND {forced!r}")
        if forced == COMPILED and not compiled_available():
            raise ImportError(
                "LATENTALIGN_BACKEND=compiled but the extension is not built")
        return forced
    return COMPILED if compiled_available() else PYTHON


_active = _initial_backend()


def active_backend():
    """Name of the backend currently used for SVD calls."""
    return _active


def set_backend(name):
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}")
    if name == COMPILED and not compiled_available():
        raise ImportError("compiled kernel is not available")
    _active = name


@contextlib.contextmanager
def use_backend(name):
    """Temporarily switch the SVD backend (tests and benchmarks)."""
    previous = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def svd(mat):
    """Thin SVD via the active backend: returns (U, s, V), M = U diag(s) V^T."""
    return _IMPLS[_active](mat)

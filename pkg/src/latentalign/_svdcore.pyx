# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""One-sided Jacobi SVD kernel for small dense matrices.

The stacks this library decomposes are tiny (a handful of modality columns)
but decomposed millions of times during training and diagnostics, where
LAPACK's per-call overhead dominates.  Cyclic one-sided Jacobi with a
relative orthogonality threshold converges in a few sweeps at these sizes
and is fully deterministic.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()

DEF MAX_SWEEPS = 60
DEF REL_TOL = 1e-15


def jacobi_svd(mat):
    """Decompose ``mat`` (n x p, n >= p) as U @ diag(s) @ V.T.

    Returns (U, s, V) with U (n x p) and V (p x p) orthonormal and s
    nonincreasing (stable order for ties).  Columns with negligible
    singular value get deterministic orthonormal filler directions in U.
    """
    cdef Py_ssize_t n = mat.shape[0]
    cdef Py_ssize_t p = mat.shape[1]
    if n < p:
        raise ValueError("jacobi_svd requires n >= p")

    # Rows of `a` are the columns of `mat`, kept contiguous for the sweeps.
    a_arr = np.empty((p, n))
    v_arr = np.zeros((p, p))
    cdef double[:, ::1] a = a_arr
    cdef double[:, ::1] v = v_arr
    cdef const double[:, :] src = mat

    cdef Py_ssize_t i, j, t, sweep
    cdef double alpha, beta, gamma, zeta, tt, c, s, x, y
    cdef bint rotated

    for i in range(p):
        v[i, i] = 1.0
        for t in range(n):
            a[i, t] = src[t, i]

    for sweep in range(MAX_SWEEPS):
        rotated = False
        for i in range(p - 1):
            for j in range(i + 1, p):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for t in range(n):
                    x = a[i, t]
                    y = a[j, t]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if gamma == 0.0:
                    continue
                if fabs(gamma) <= REL_TOL * sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    tt = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    tt = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + tt * tt)
                s = c * tt
                for t in range(n):
                    x = a[i, t]
                    y = a[j, t]
                    a[i, t] = c * x - s * y
                    a[j, t] = s * x + c * y
                for t in range(p):
                    x = v[i, t]
                    y = v[j, t]
                    v[i, t] = c * x - s * y
                    v[j, t] = s * x + c * y
        if not rotated:
            break

    s_arr = np.empty(p)
    cdef double[::1] norms = s_arr
    cdef double sigma_max = 0.0
    for i in range(p):
        alpha = 0.0
        for t in range(n):
            alpha += a[i, t] * a[i, t]
        norms[i] = sqrt(alpha)
        if norms[i] > sigma_max:
            sigma_max = norms[i]

    # Stable insertion sort of indices by descending norm.
    cdef Py_ssize_t order[512]
    cdef Py_ssize_t key, pos
    if p > 512:
        raise ValueError("matrix too large for the small-matrix kernel")
    for i in range(p):
        order[i] = i
    for i in range(1, p):
        key = order[i]
        pos = i
        while pos > 0 and norms[order[pos - 1]] < norms[key]:
            order[pos] = order[pos - 1]
            pos -= 1
        order[pos] = key

    u_arr = np.empty((n, p))
    s_out = np.empty(p)
    v_out = np.empty((p, p))
    cdef double[:, ::1] u = u_arr
    cdef double[::1] s_o = s_out
    cdef double[:] s_view = s_arr
    cdef double[:, ::1] v_o = v_out
    cdef double cutoff = sigma_max * 1e-12
    cdef double inv
    cdef Py_ssize_t src_i
    cdef bint need_filler = False
    for i in range(p):
        src_i = order[i]
        s_o[i] = s_view[src_i]
        for t in range(p):
            v_o[t, i] = v[src_i, t]
        if s_view[src_i] > cutoff and s_view[src_i] > 0.0:
            inv = 1.0 / s_view[src_i]
            for t in range(n):
                u[t, i] = a[src_i, t] * inv
        else:
            need_filler = True
            for t in range(n):
                u[t, i] = 0.0

    if need_filler:
        _fill_null_directions(u_arr, s_out, cutoff)
    return u_arr, s_out, v_out


def _fill_null_directions(u, s, double cutoff):
    """Deterministic orthonormal completion for negligible singular values:
    first standard basis vector with a usable residual, Gram-Schmidt twice."""
    n, p = u.shape
    basis = [u[:, i] for i in range(p) if s[i] > cutoff and s[i] > 0.0]
    for i in range(p):
        if s[i] > cutoff and s[i] > 0.0:
            continue
        placed = False
        for k in range(n):
            cand = np.zeros(n)
            cand[k] = 1.0
            for _ in range(2):
                for b in basis:
                    cand -= (cand @ b) * b
            nrm = np.linalg.norm(cand)
            if nrm > 0.5:
                u[:, i] = cand / nrm
                basis.append(u[:, i])
                placed = True
                break
        if not placed:  # unreachable for p <= n
            raise RuntimeError("no filler direction found")

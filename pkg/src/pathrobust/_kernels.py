"""Compiled inner loops for exact similarity comparisons.

Every similarity that decides a rank is defined as the float64 dot product
accumulated strictly left to right (one rounding per multiply, one per add,
no fused multiply-add).  BLAS results are only used to skip candidates that
are provably on one side of the threshold; anything within the BLAS error
bound of the threshold is recomputed here with the reference ordering.
"""

import numpy as np
from numba import njit

_UNIT_ROUNDOFF = 2.0**-53


def blas_error_margin(dim: int) -> float:
    """Bound on |BLAS dot - reference dot| for unit-norm float64 rows.

    Both results lie within gamma_d * sum|a_k b_k| <= gamma_d * |a||b| of the
    exact value for any summation order, FMA or not, so their distance is at
    most 2 * gamma_d.  The factor 4 leaves room for rows whose norm is a few
    ulps above one.
    """
    nu = (dim + 2) * _UNIT_ROUNDOFF
    return 4.0 * nu / (1.0 - nu) + 1e-300


@njit(nogil=True, cache=True)
def strict_dot(a, b):
    acc = 0.0
    for k in range(a.shape[0]):
        acc = acc + a[k] * b[k]
    return acc


@njit(nogil=True, cache=True)
def strict_row_dots(A, B):
    """Row-wise reference dot products of two equally shaped matrices."""
    n = A.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = strict_dot(A[i], B[i])
    return out


@njit(nogil=True, cache=True)
def strict_sq_norms(A):
    n = A.shape[0]
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for k in range(A.shape[1]):
            x = np.float64(A[i, k])
            acc = acc + x * x
        out[i] = acc
    return out


@njit(nogil=True, cache=True)
def count_rows(S, Q, C, q0, thresholds, delta, exclude_self, out):
    """Per query row, count candidates whose reference similarity >= threshold.

    ``S[r, j]`` approximates ``dot(Q[q0 + r], C[j])``.  ``thresholds`` is
    indexed by absolute query row.  With ``exclude_self`` the column equal
    to the absolute query index is skipped (same-slide block).  Counts are
    added into ``out[r]``.
    """
    b, m = S.shape
    n_exact = 0
    for r in range(b):
        qi = q0 + r
        thr = thresholds[qi]
        hi = thr + delta
        lo = thr - delta
        c = 0
        for j in range(m):
            if exclude_self and j == qi:
                continue
            s = S[r, j]
            if s >= hi:
                c += 1
            elif s > lo:
                n_exact += 1
                if strict_dot(Q[qi], C[j]) >= thr:
                    c += 1
        out[r] += c
    return n_exact


@njit(nogil=True, cache=True)
def count_cross(S, Q, C, q0, thresholds, delta, row_out, col_out):
    """Count both directions from one cross-slide block.

    Row r (query ``Q[q0 + r]``) compares against ``thresholds[q0 + r]``;
    column j (query ``C[j]`` seeing candidate ``Q[q0 + r]``) compares against
    ``thresholds[j]``.  The matched similarity is symmetric, so one
    threshold vector serves both directions.
    """
    b, m = S.shape
    n_exact = 0
    for r in range(b):
        qi = q0 + r
        thr_r = thresholds[qi]
        c = 0
        for j in range(m):
            s = S[r, j]
            thr_c = thresholds[j]
            # resolve lazily; at most one reference dot per entry
            exact_done = False
            exact = 0.0
            if s >= thr_r + delta:
                c += 1
            elif s > thr_r - delta:
                exact = strict_dot(Q[qi], C[j])
                exact_done = True
                n_exact += 1
                if exact >= thr_r:
                    c += 1
            if s >= thr_c + delta:
                col_out[j] += 1
            elif s > thr_c - delta:
                if not exact_done:
                    exact = strict_dot(Q[qi], C[j])
                    n_exact += 1
                if exact >= thr_c:
                    col_out[j] += 1
        row_out[r] += c
    return n_exact

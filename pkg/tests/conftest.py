import math

import numpy as np
import pytest

from pathrobust.synth import SynthSpec, synth_cohort


def py_normalize(rows):
    """Unit rows in plain Python floats (sequential sum, no fused ops)."""
    out = []
    for r in rows:
        s = 0.0
        for x in r:
            s += x * x
        n = math.sqrt(s)
        out.append([x / n for x in r])
    return out


def py_dot(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += x * y
    return s


def oracle_ranks(A, B):
    """Full enumeration of the 2N - 1 candidates for every query of A."""
    A = py_normalize(np.asarray(A, dtype=np.float32).astype(np.float64).tolist())
    B = py_normalize(np.asarray(B, dtype=np.float32).astype(np.float64).tolist())
    n = len(A)
    ranks = []
    for i in range(n):
        thr = py_dot(A[i], B[i])
        r = sum(1 for j in range(n) if j != i and py_dot(A[i], A[j]) >= thr)
        r += sum(1 for j in range(n) if py_dot(A[i], B[j]) >= thr)
        ranks.append(r)
    return np.array(ranks)


def random_pair(rng, n, d, dup_frac=0.0, noise=0.3):
    """Random float32 pair; a fraction of rows can be exact duplicates to force ties."""
    A = rng.standard_normal((n, d)).astype(np.float32)
    B = (A + noise * rng.standard_normal((n, d))).astype(np.float32)
    n_dup = int(dup_frac * n)
    if n_dup:
        src = rng.integers(0, n, size=n_dup)
        dst = rng.integers(0, n, size=n_dup)
        A[dst] = A[src]
        B[rng.integers(0, n, size=n_dup)] = A[src]
    return A, B


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    spec = SynthSpec(n_stainings=4, n_scanners=3, n_tiles=40, dim=8, seed=3)
    return synth_cohort(spec, out)

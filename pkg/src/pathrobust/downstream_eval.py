"""Downstream evaluation protocols on frozen embeddings.

* slide-level classification: mean-pooled tiles, L2-regularised logistic
  regression, AUC per test subcohort, and Lin's concordance (CCC) between
  predictions of subcohorts that share tumor blocks;
* spot-level regression: PCA (<= 256 components) followed by ridge
  regression, Pearson correlation per target.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Optional, Sequence

import numpy as np

from .exceptions import ValidationError

log = logging.getLogger(__name__)

MAX_PCA_COMPONENTS = 256


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LabeledFeatures:
    X: np.ndarray
    y: np.ndarray
    group_id: Optional[tuple] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 2:
            raise ValidationError(f"need an n x d design matrix with n >= 2, got shape {X.shape}")
        if y.shape[0] != X.shape[0]:
            raise ValidationError(f"{y.shape[0]} targets for {X.shape[0]} rows")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValidationError("non-finite feature or target")
        if self.group_id is not None and len(self.group_id) != X.shape[0]:
            raise ValidationError("one group id per row is required")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.group_id is not None:
            object.__setattr__(self, "group_id", tuple(self.group_id))


@dataclass
class LinearModel:
    kind: str  # "logistic" | "ridge"
    weights: np.ndarray
    bias: np.ndarray
    regularization: float
    n_iter: int = 0
    converged: bool = True
    objective_trace: list = field(default_factory=list, repr=False)


def mean_pool(tile_embeddings) -> np.ndarray:
    t = np.asarray(tile_embeddings, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] == 0:
        raise ValidationError("mean pooling needs a non-empty N x d matrix")
    return t.mean(axis=0)


class Standardizer:
    """Column z-scoring fitted on training rows; constant columns are left unscaled."""

    def __init__(self, X):
        X = np.asarray(X, dtype=np.float64)
        self.mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0.0] = 1.0
        self.scale = scale

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale


# ------------------------------------------------------------------ logistic


def _log1pexp(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_objective(w, b, X, y, l2) -> float:
    """Mean logistic loss plus (l2 / 2) ||w||^2; labels in {0, 1}."""
    z = X @ w + b
    return float(np.mean(_log1pexp(z) - y * z) + 0.5 * l2 * (w @ w))


def _logistic_grad(w, b, X, y, l2):
    r = (_sigmoid(X @ w + b) - y) / X.shape[0]
    return X.T @ r + l2 * w, float(r.sum())


def fit_logistic(data: LabeledFeatures, l2: float = 1e-2, max_iter: int = 10_000, tol: float = 1e-8) -> LinearModel:
    """Full-batch gradient descent with Armijo backtracking from zero.

    Stops when the gradient norm (weights and bias) is <= ``tol``.  On
    hitting ``max_iter`` a ``ConvergenceWarning`` is issued and the last
    iterate is returned with ``converged=False``.
    """
    if l2 <= 0:
        raise ValidationError("l2 must be positive")
    X, y = data.X, data.y
    classes = np.unique(y)
    if not np.isin(classes, (0.0, 1.0)).all():
        raise ValidationError(f"labels must be binary 0/1, got {classes[:5]}")
    if classes.size < 2:
        raise ValidationError("logistic regression needs both classes")

    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    f = logistic_objective(w, b, X, y, l2)
    trace = [f]
    # 1 / Lipschitz bound of the gradient as the first trial step
    lip = 0.25 * (np.linalg.norm(X, 2) ** 2 / n + 1.0) + l2
    step = 1.0 / lip
    converged = False
    n_iter = 0
    for _ in range(max_iter):
        gw, gb = _logistic_grad(w, b, X, y, l2)
        gnorm2 = float(gw @ gw + gb * gb)
        if math.sqrt(gnorm2) <= tol:
            converged = True
            break
        step *= 2.0
        while True:
            w_new = w - step * gw
            b_new = b - step * gb
            f_new = logistic_objective(w_new, b_new, X, y, l2)
            if f_new <= f - 0.5 * step * gnorm2 or step < 1e-20:
                break
            step *= 0.5
        if f_new > f:
            # rounding floor: no step decreases the objective any more
            break
        w, b, f = w_new, b_new, f_new
        n_iter += 1
        trace.append(f)
    else:
        gw, gb = _logistic_grad(w, b, X, y, l2)
        converged = math.sqrt(float(gw @ gw + gb * gb)) <= tol
    if not converged:
        warnings.warn(f"logistic regression did not converge in {max_iter} iterations", ConvergenceWarning)
    return LinearModel("logistic", w, np.asarray(b), l2, n_iter, converged, trace)


def predict_scores(model: LinearModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.weights.shape[0]:
        raise ValidationError(f"model expects {model.weights.shape[0]} features, got {X.shape[1]}")
    z = X @ model.weights + model.bias
    if model.kind == "logistic":
        return _sigmoid(z)
    return z


# ------------------------------------------------------------------ metrics


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e - 1) / 2.0 + 1.0
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + P(tie) / 2 over all pos/neg pairs."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be equal-length vectors")
    pos = y == 1
    neg = y == 0
    if not (pos | neg).all():
        raise ValidationError("labels must be binary 0/1")
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both classes")
    ranks = average_ranks(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValidationError("pearson needs two equal-length vectors with n >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise ValidationError("pearson correlation undefined for a constant vector")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def ccc(x, y) -> float:
    """Lin's concordance correlation with population (1/n) moments."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValidationError("ccc needs two equal-length vectors with n >= 2")
    mx, my = x.mean(), y.mean()
    sxy = float(np.mean((x - mx) * (y - my)))
    denom = float(np.mean((x - mx) ** 2) + np.mean((y - my) ** 2) + (mx - my) ** 2)
    if denom == 0.0:
        raise ValidationError("ccc undefined: both vectors constant with equal means")
    return 2.0 * sxy / denom


# ------------------------------------------------------------------ PCA / ridge


@dataclass(frozen=True)
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray  # q x d, orthonormal rows
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) @ self.components + self.mean


def pca_fit(X, q: int = MAX_PCA_COMPONENTS) -> PcaProjection:
    """Principal directions of centered ``X`` by decreasing variance.

    ``q`` is clamped to min(256, d, n - 1) and to the number of directions
    with non-negligible variance.  Each component's largest-magnitude entry
    is made positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError("PCA needs an n x d matrix with n >= 2")
    n, d = X.shape
    if q < 1:
        raise ValidationError("q must be positive")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    rank_tol = s[0] * max(n, d) * np.finfo(np.float64).eps if s.size else 0.0
    rank = int(np.count_nonzero(s > rank_tol))
    q_eff = min(q, MAX_PCA_COMPONENTS, d, n - 1, rank)
    if q_eff < 1:
        raise ValidationError("PCA undefined: input has zero variance")
    if q_eff < q:
        log.info("PCA components clamped from %d to %d (n=%d, d=%d, rank=%d)", q, q_eff, n, d, rank)
    comps = vt[:q_eff].copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(q_eff), pivot])
    comps *= signs[:, None]
    return PcaProjection(mean, comps, s[:q_eff] ** 2 / (n - 1))


def ridge_fit(Z, Y, alpha: float = 1.0) -> LinearModel:
    """Closed-form ridge with an unpenalised intercept.

    Features and targets are centered; W = (Zc'Zc + alpha I)^-1 Zc'Yc and
    bias = mean(Y) - mean(Z) W.  ``Y`` may be a vector or n x G.
    """
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if alpha < 0:
        raise ValidationError("alpha must be non-negative")
    if Z.ndim != 2 or Y.shape[0] != Z.shape[0]:
        raise ValidationError(f"shape mismatch: Z {Z.shape}, Y {Y.shape}")
    zm = Z.mean(axis=0)
    ym = Y.mean(axis=0)
    Zc = Z - zm
    gram = Zc.T @ Zc + alpha * np.eye(Z.shape[1])
    if alpha == 0 and np.linalg.matrix_rank(gram) < Z.shape[1]:
        raise ValidationError("singular normal equations at alpha = 0")
    W = np.linalg.solve(gram, Zc.T @ (Y - ym))
    return LinearModel("ridge", W, ym - zm @ W, alpha)


# ------------------------------------------------------------------ protocols


@dataclass
class HestResult:
    per_target: list  # Pearson per target, None where undefined
    mean_pearson: float
    n_components: int


def run_hest_protocol(
    train: LabeledFeatures,
    test: LabeledFeatures,
    q: int = MAX_PCA_COMPONENTS,
    alpha: float = 1.0,
    standardize: bool = True,
) -> HestResult:
    """PCA fitted on train, ridge on the (standardized) projections, Pearson per target on test."""
    if train.X.shape[1] != test.X.shape[1]:
        raise ValidationError("train and test feature dimensions differ")
    Ytr = train.y.reshape(train.y.shape[0], -1)
    Yte = test.y.reshape(test.y.shape[0], -1)
    if Ytr.shape[1] != Yte.shape[1]:
        raise ValidationError("train and test target counts differ")
    pca = pca_fit(train.X, q)
    Ztr, Zte = pca.transform(train.X), pca.transform(test.X)
    if standardize:
        sc = Standardizer(Ztr)
        Ztr, Zte = sc.transform(Ztr), sc.transform(Zte)
    model = ridge_fit(Ztr, Ytr, alpha)
    pred = predict_scores(model, Zte).reshape(Yte.shape)
    per_target = []
    for g in range(Yte.shape[1]):
        try:
            per_target.append(pearson(pred[:, g], Yte[:, g]))
        except ValidationError:
            warnings.warn(f"target {g}: Pearson undefined (constant vector); excluded from mean")
            per_target.append(None)
    defined = [r for r in per_target if r is not None]
    mean = float(np.mean(defined)) if defined else float("nan")
    return HestResult(per_target, mean, pca.n_components)


@dataclass(frozen=True)
class SlideSample:
    tiles: np.ndarray  # N x d tile embeddings (or a 1 x d pooled vector)
    label: int
    group_id: str = ""


@dataclass
class BreastBmResult:
    auc: dict  # subcohort -> AUC (None if single-class)
    ccc: dict  # (subcohort_a, subcohort_b) -> CCC on shared blocks
    n_shared: dict
    predictions: dict  # subcohort -> {group_id: score}
    model: LinearModel


def _pool(slides: Sequence[SlideSample]):
    X = np.stack([mean_pool(s.tiles) for s in slides])
    y = np.array([s.label for s in slides], dtype=np.float64)
    return X, y


def run_breastbm_protocol(
    train_slides: Sequence[SlideSample],
    test_subcohorts: Mapping[str, Sequence[SlideSample]],
    l2: float = 1e-2,
    standardize: bool = True,
    max_iter: int = 10_000,
    tol: float = 1e-8,
) -> BreastBmResult:
    """Train once on pooled train slides; AUC per subcohort, CCC per subcohort pair."""
    Xtr, ytr = _pool(train_slides)
    sc = Standardizer(Xtr) if standardize else None
    if sc is not None:
        Xtr = sc.transform(Xtr)
    model = fit_logistic(LabeledFeatures(Xtr, ytr), l2=l2, max_iter=max_iter, tol=tol)

    aucs, preds = {}, {}
    for name in sorted(test_subcohorts):
        slides = test_subcohorts[name]
        X, y = _pool(slides)
        if sc is not None:
            X = sc.transform(X)
        scores = predict_scores(model, X)
        groups = [s.group_id for s in slides]
        if len(set(groups)) != len(groups):
            raise ValidationError(f"subcohort {name!r}: duplicate group ids")
        preds[name] = dict(zip(groups, scores.tolist()))
        try:
            aucs[name] = auc(scores, y)
        except ValidationError:
            warnings.warn(f"subcohort {name!r}: single-class labels, AUC undefined")
            aucs[name] = None

    cccs, shared_n = {}, {}
    for a, b in combinations(sorted(test_subcohorts), 2):
        shared = sorted(set(preds[a]) & set(preds[b]))
        if not shared:
            raise ValidationError(f"subcohorts {a!r} and {b!r} share no tumor blocks")
        cccs[(a, b)] = ccc([preds[a][g] for g in shared], [preds[b][g] for g in shared])
        shared_n[(a, b)] = len(shared)
    return BreastBmResult(aucs, cccs, shared_n, preds, model)

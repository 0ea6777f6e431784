"""Forward values of the DINO / iBOT distillation objectives on prototype scores.

Teacher scores become probabilities through a centered, sharpened softmax;
the student side enters through its log-softmax at the student
temperature.  The class-token objective averages the two cross-view terms,
the patch-token objective averages over every (view, patch) term with no
masking.  Everything here is forward-only, apart from the closed-form
gradient of the cross-entropy used for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .exceptions import ValidationError

DISTRIBUTION_TOL = 1e-6


@dataclass(frozen=True)
class DistillConfig:
    n_prototypes: int = 131_072
    teacher_temperature: float = 0.07
    student_temperature: float = 0.1
    center_momentum: float = 0.9
    ema_momentum: float = 0.996
    loss_weight_dino: float = 1.0
    loss_weight_ibot: float = 1.0
    # distillation recipe of the released ViT-B student
    warmup_epochs: int = 16
    teacher_temp_warmup_epochs: int = 30
    weight_decay_end: float = 0.4
    batch_size: int = 2048
    iterations: int = 105_000
    patch_size: int = 14
    register_tokens: int = 4
    embed_dim: int = 768
    layers: int = 12
    heads: int = 12
    mlp_ratio: int = 4
    mlp_activation: str = "SwiGLU"
    dino_bottleneck: int = 384
    ibot_bottleneck: int = 256

    def __post_init__(self):
        if self.teacher_temperature <= 0 or self.student_temperature <= 0:
            raise ValidationError("temperatures must be strictly positive")
        for name in ("center_momentum", "ema_momentum"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.loss_weight_dino < 0 or self.loss_weight_ibot < 0:
            raise ValidationError("loss weights must be non-negative")


@dataclass(frozen=True)
class DistillViewBatch:
    """Prototype logits for two augmented views of one image.

    ``teacher_class`` / ``student_class``: 2 x K (view 1, view 2).
    ``teacher_patch`` / ``student_patch``: 2 x P x K.
    ``class_center`` / ``patch_center``: optional K-vectors subtracted from
    teacher logits before sharpening.
    """

    teacher_class: np.ndarray
    student_class: np.ndarray
    teacher_patch: np.ndarray
    student_patch: np.ndarray
    class_center: Optional[np.ndarray] = None
    patch_center: Optional[np.ndarray] = None

    def __post_init__(self):
        arrs = {}
        for name in ("teacher_class", "student_class", "teacher_patch", "student_patch"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(a).all():
                raise ValidationError(f"{name}: non-finite logits")
            arrs[name] = a
        tc, sc = arrs["teacher_class"], arrs["student_class"]
        tp, sp = arrs["teacher_patch"], arrs["student_patch"]
        if tc.ndim != 2 or tc.shape[0] != 2 or tc.shape != sc.shape:
            raise ValidationError(f"class scores must both be 2 x K, got {tc.shape} and {sc.shape}")
        if tp.ndim != 3 or tp.shape[0] != 2 or tp.shape != sp.shape or tp.shape[1] < 1:
            raise ValidationError(f"patch scores must both be 2 x P x K with P >= 1, got {tp.shape} and {sp.shape}")
        if tp.shape[2] != tc.shape[1]:
            raise ValidationError("prototype count differs between class and patch scores")
        for name, a in arrs.items():
            object.__setattr__(self, name, a)
        k = tc.shape[1]
        for name in ("class_center", "patch_center"):
            c = getattr(self, name)
            if c is not None:
                c = np.asarray(c, dtype=np.float64)
                if c.shape != (k,):
                    raise ValidationError(f"{name} must be a {k}-vector")
                object.__setattr__(self, name, c)

    @property
    def n_prototypes(self) -> int:
        return self.teacher_class.shape[1]

    @property
    def n_patches(self) -> int:
        return self.teacher_patch.shape[1]

    def swap_views(self) -> "DistillViewBatch":
        return replace(
            self,
            teacher_class=self.teacher_class[::-1].copy(),
            student_class=self.student_class[::-1].copy(),
            teacher_patch=self.teacher_patch[::-1].copy(),
            student_patch=self.student_patch[::-1].copy(),
        )


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def prototype_distribution(logits, temperature: float, center=None) -> np.ndarray:
    """softmax((logits - center) / temperature) along the last axis."""
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValidationError("non-finite logits")
    if center is not None:
        z = z - np.asarray(center, dtype=np.float64)
    z = z / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy_h(p_teacher, student_logits, student_temperature: float) -> float:
    """-sum_k p[k] log softmax(student / tau)[k] via log-sum-exp."""
    p = np.asarray(p_teacher, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if student_temperature <= 0:
        raise ValidationError("temperature must be positive")
    if p.shape != s.shape or p.ndim != 1:
        raise ValidationError("teacher distribution and student logits must be equal-length vectors")
    if (p < 0).any() or abs(p.sum() - 1.0) > DISTRIBUTION_TOL:
        raise ValidationError(f"teacher distribution invalid (sum={p.sum():.9g})")
    if not np.isfinite(s).all():
        raise ValidationError("non-finite student logits")
    logq = _log_softmax(s / student_temperature)
    # 0 * log q is 0 even where q underflows
    nz = p > 0
    return float(max(0.0, -np.sum(p[nz] * logq[nz])))


def cross_entropy_grad(p_teacher, student_logits, student_temperature: float) -> np.ndarray:
    """Gradient of ``cross_entropy_h`` with respect to the student logits."""
    p = np.asarray(p_teacher, dtype=np.float64)
    q = prototype_distribution(student_logits, student_temperature)
    return (q - p) / student_temperature


def _batched_ce(p: np.ndarray, student: np.ndarray, tau_s: float) -> np.ndarray:
    logq = _log_softmax(student / tau_s)
    return -np.sum(np.where(p > 0, p * logq, 0.0), axis=-1)


def dino_loss(batch: DistillViewBatch, cfg: DistillConfig) -> float:
    """(H(t1, s2) + H(t2, s1)) / 2 on class scores."""
    pt = prototype_distribution(batch.teacher_class, cfg.teacher_temperature, batch.class_center)
    ce = _batched_ce(pt, batch.student_class[::-1], cfg.student_temperature)
    return float(max(0.0, (ce[0] + ce[1]) / 2.0))


def ibot_loss(batch: DistillViewBatch, cfg: DistillConfig) -> float:
    """Mean of H(t_{j,p}, s_{j,p}) over both views and all P patches (no masking)."""
    pt = prototype_distribution(batch.teacher_patch, cfg.teacher_temperature, batch.patch_center)
    ce = _batched_ce(pt, batch.student_patch, cfg.student_temperature)
    return float(max(0.0, ce.sum() / (2 * batch.n_patches)))


def total_loss(batch: DistillViewBatch, cfg: DistillConfig) -> float:
    total = 0.0
    if cfg.loss_weight_dino:
        total += cfg.loss_weight_dino * dino_loss(batch, cfg)
    if cfg.loss_weight_ibot:
        total += cfg.loss_weight_ibot * ibot_loss(batch, cfg)
    return total


def ema_update(ema, student, momentum: float) -> np.ndarray:
    """momentum * ema + (1 - momentum) * student, elementwise."""
    e = np.asarray(ema, dtype=np.float64)
    s = np.asarray(student, dtype=np.float64)
    if e.shape != s.shape:
        raise ValidationError(f"parameter length mismatch: {e.shape} vs {s.shape}")
    if not 0.0 <= momentum <= 1.0:
        raise ValidationError("momentum must lie in [0, 1]")
    if not (np.isfinite(e).all() and np.isfinite(s).all()):
        raise ValidationError("non-finite parameters")
    return momentum * e + (1.0 - momentum) * s


def update_center(center, teacher_batch_logits, momentum: float) -> np.ndarray:
    c = np.asarray(center, dtype=np.float64)
    t = np.asarray(teacher_batch_logits, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] == 0:
        raise ValidationError("teacher batch must be a non-empty B x K matrix")
    if t.shape[1] != c.shape[0]:
        raise ValidationError("center and teacher logits disagree on K")
    if not 0.0 <= momentum <= 1.0:
        raise ValidationError("momentum must lie in [0, 1]")
    return momentum * c + (1.0 - momentum) * t.mean(axis=0)


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def random_batch(rng: np.random.Generator, k: int = 16, n_patches: int = 4, scale: float = 3.0) -> DistillViewBatch:
    return DistillViewBatch(
        teacher_class=rng.normal(scale=scale, size=(2, k)),
        student_class=rng.normal(scale=scale, size=(2, k)),
        teacher_patch=rng.normal(scale=scale, size=(2, n_patches, k)),
        student_patch=rng.normal(scale=scale, size=(2, n_patches, k)),
    )


def one_hot_batch(k: int, idx_view1: int, idx_view2: int, n_patches: int = 1, peak: float = 60.0) -> DistillViewBatch:
    """Teacher logits one-hot-like at the given indices; student sharply peaked to match.

    Cross-view pairing means student view 2 matches teacher view 1 for the
    class term, while patch terms match within the same view.
    """
    def peaked(i):
        v = np.full(k, -peak)
        v[i] = peak
        return v

    t1, t2 = peaked(idx_view1), peaked(idx_view2)
    return DistillViewBatch(
        teacher_class=np.stack([t1, t2]),
        student_class=np.stack([t2, t1]),
        teacher_patch=np.stack([np.tile(t1, (n_patches, 1)), np.tile(t2, (n_patches, 1))]),
        student_patch=np.stack([np.tile(t1, (n_patches, 1)), np.tile(t2, (n_patches, 1))]),
    )


# ---------------------------------------------------------------- property suite


@dataclass(frozen=True)
class PropertyCheck:
    name: str
    passed: bool
    detail: str


def _check_shift_invariance(rng, cfg) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        b = random_batch(rng)
        base = (dino_loss(b, cfg), ibot_loss(b, cfg))
        c = rng.normal(scale=50.0)
        fields = ["teacher_class", "student_class", "teacher_patch", "student_patch"]
        for f in fields:
            arr = getattr(b, f).copy()
            if arr.ndim == 2:
                arr[rng.integers(2)] += c
            else:
                arr[rng.integers(2), rng.integers(arr.shape[1])] += c
            shifted = replace(b, **{f: arr})
            got = (dino_loss(shifted, cfg), ibot_loss(shifted, cfg))
            worst = max(worst, abs(got[0] - base[0]), abs(got[1] - base[1]))
    return worst <= 1e-6, f"max |delta| = {worst:.3g} (tol 1e-6)"


def _check_view_symmetry(rng, cfg) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(50):
        b = random_batch(rng)
        worst = max(worst, abs(dino_loss(b, cfg) - dino_loss(b.swap_views(), cfg)))
    return worst == 0.0, f"max |L(b) - L(swap(b))| = {worst:.3g} (exact)"


def _check_matched_one_hot(rng, cfg) -> tuple[bool, str]:
    k = 16
    b = one_hot_batch(k, int(rng.integers(k)), int(rng.integers(k)), n_patches=3)
    vals = (dino_loss(b, cfg), ibot_loss(b, cfg))
    return max(vals) < 1e-10, f"L_dino={vals[0]:.3g}, L_ibot={vals[1]:.3g} (< 1e-10)"


def _check_gradient(rng, cfg) -> tuple[bool, str]:
    worst = 0.0
    h = 1e-5
    for _ in range(20):
        k = int(rng.integers(2, 17))
        tau = float(rng.uniform(0.1, 2.0))
        p = prototype_distribution(rng.normal(size=k), 1.0)
        s = rng.normal(size=k)
        g = cross_entropy_grad(p, s, tau)
        fd = np.empty(k)
        for j in range(k):
            e = np.zeros(k)
            e[j] = h
            fd[j] = (cross_entropy_h(p, s + e, tau) - cross_entropy_h(p, s - e, tau)) / (2 * h)
        rel = np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-12)
        worst = max(worst, rel)
    return worst <= 1e-5, f"max relative error = {worst:.3g} (tol 1e-5)"


def _check_ln2_cases(rng, cfg) -> tuple[bool, str]:
    c1 = cross_entropy_h([1.0, 0.0], [0.0, 0.0], 1.0)
    c2 = cross_entropy_h([0.5, 0.5], [0.0, 0.0], 1.0)
    two = DistillViewBatch(
        teacher_class=[[60.0, -60.0], [-60.0, 60.0]],
        student_class=[[0.0, 0.0], [0.0, 0.0]],
        teacher_patch=[[[60.0, -60.0]], [[-60.0, 60.0]]],
        student_patch=[[[0.0, 0.0]], [[0.0, 0.0]]],
    )
    vals = [c1, c2, dino_loss(two, cfg), ibot_loss(two, cfg)]
    worst = max(abs(v - math.log(2.0)) for v in vals)
    return worst <= 1e-9, f"max |value - ln 2| = {worst:.3g} (tol 1e-9)"


def _check_non_negative(rng, cfg) -> tuple[bool, str]:
    low = min(min(dino_loss(b, cfg), ibot_loss(b, cfg)) for b in (random_batch(rng) for _ in range(50)))
    return low >= -1e-9, f"min loss = {low:.3g}"


def _check_entropy_bound(rng, cfg) -> tuple[bool, str]:
    p = prototype_distribution(rng.normal(size=3), 1.0)
    target = entropy(p)
    grid = np.linspace(-6, 6, 121)
    best = min(cross_entropy_h(p, [a, b, 0.0], 1.0) for a in grid for b in grid)
    at_p = cross_entropy_h(p, np.log(p), 1.0)
    ok = best >= target - 1e-12 and abs(at_p - target) < 1e-12
    return ok, f"entropy={target:.9f}, grid min={best:.9f}, at student=p: {at_p:.9f}"


def _check_patch_permutation(rng, cfg) -> tuple[bool, str]:
    b = random_batch(rng, n_patches=6)
    perm = rng.permutation(6)
    pb = replace(b, teacher_patch=b.teacher_patch[:, perm], student_patch=b.student_patch[:, perm])
    diff = abs(ibot_loss(b, cfg) - ibot_loss(pb, cfg))
    return diff <= 1e-12, f"|delta| = {diff:.3g}"


def _check_large_k(rng, cfg) -> tuple[bool, str]:
    k = cfg.n_prototypes
    b = random_batch(rng, k=k, n_patches=1, scale=100.0)
    vals = (dino_loss(b, cfg), ibot_loss(b, cfg))
    return all(np.isfinite(vals)), f"K={k}: L_dino={vals[0]:.4g}, L_ibot={vals[1]:.4g}"


PROPERTIES: dict[str, Callable] = {
    "logit shift invariance": _check_shift_invariance,
    "view-swap symmetry": _check_view_symmetry,
    "matched one-hot loss": _check_matched_one_hot,
    "analytic gradient vs finite differences": _check_gradient,
    "ln 2 closed-form cases": _check_ln2_cases,
    "non-negativity": _check_non_negative,
    "entropy lower bound": _check_entropy_bound,
    "patch permutation invariance": _check_patch_permutation,
    "stability at full prototype count": _check_large_k,
}


def run_property_suite(seed: int = 0, cfg: Optional[DistillConfig] = None) -> list[PropertyCheck]:
    cfg = cfg or DistillConfig()
    out = []
    for i, (name, fn) in enumerate(PROPERTIES.items()):
        rng = np.random.default_rng([seed, i])
        ok, detail = fn(rng, cfg)
        out.append(PropertyCheck(name, bool(ok), detail))
    return out

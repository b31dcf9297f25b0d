"""Heteroscedastic segmentation losses, consistency losses and entropy helpers.

Array conventions: logits are channel-first ``(C, *spatial)``; variance and
log-variance maps are ``spatial``; label maps are integer ``spatial`` arrays.
Every loss returns a :class:`Loss` carrying the scalar value, per-voxel terms
where meaningful, and analytic gradients with respect to its differentiable
inputs. Reductions are voxel means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

TWO_PI_E = 2.0 * math.pi * math.e
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class Loss:
    value: float
    per_voxel: np.ndarray | None = None
    grads: dict = field(default_factory=dict)


@dataclass
class UncertaintyBundle:
    """Per-voxel log-variances: one task channel plus one per augmentation."""

    s_task: np.ndarray
    s_aug: np.ndarray = None  # (N, *spatial); N may be 0

    def __post_init__(self):
        self.s_task = np.asarray(self.s_task)
        if self.s_aug is None:
            self.s_aug = np.zeros((0, *self.s_task.shape), dtype=self.s_task.dtype)
        self.s_aug = np.asarray(self.s_aug)
        if self.s_aug.shape[1:] != self.s_task.shape:
            raise ValueError("augmentation channels must match the task channel shape")

    @property
    def n_aug(self) -> int:
        return self.s_aug.shape[0]

    def task_variance(self) -> np.ndarray:
        return np.exp(self.s_task)

    def aug_variance(self) -> np.ndarray:
        return np.exp(self.s_aug)

    def total_variance(self) -> np.ndarray:
        """Variance sum law: task variance plus every augmentation variance."""
        return np.exp(self.s_task) + np.exp(self.s_aug).sum(axis=0)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=0)
    return m + np.log(np.exp(z - m).sum(axis=0))


class NonFiniteError(ValueError):
    pass


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("non-finite input")


def scaled_softmax(logits: np.ndarray, sigma2) -> np.ndarray:
    """Class probabilities ``softmax(f / sigma^2)`` per voxel."""
    logits = np.asarray(logits, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    _check_finite(logits)
    if np.any(np.isnan(sigma2)) or np.any(sigma2 <= 0):
        raise ValueError("sigma^2 must be positive")
    return _softmax(logits / sigma2)


def cross_entropy(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Unscaled per-voxel cross entropy ``-log softmax(f)_y``."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    if target.max(initial=0) >= logits.shape[0] or target.min(initial=0) < 0:
        raise ValueError(f"labels must lie in [0, {logits.shape[0]})")
    picked = np.take_along_axis(logits, target[None].astype(np.int64), axis=0)[0]
    return _logsumexp(logits) - picked


def exact_nll(logits: np.ndarray, target: np.ndarray, sigma2) -> np.ndarray:
    """Per-voxel ``-log softmax(f / sigma^2)_y`` without the usual approximation.

    Diagnostic only; training uses :func:`weighted_ce`.
    """
    return cross_entropy(np.asarray(logits, dtype=np.float64) / np.asarray(sigma2), target)


def weighted_ce(logits, target, sigma2, epsilon: float = 0.0) -> Loss:
    """``CE / (sigma^2 + eps) + 0.5 * log(sigma^2 + eps)`` averaged over voxels.

    Gradients are returned for ``logits`` and ``sigma2``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), target.shape)
    if logits.shape[1:] != target.shape:
        raise ValueError("logits and target shapes differ")
    _check_finite(logits, sigma2)
    if np.any(sigma2 <= 0) and epsilon <= 0:
        raise ValueError("sigma^2 must be positive")
    ce = cross_entropy(logits, target)
    v = sigma2 + epsilon
    per_voxel = ce / v + 0.5 * np.log(v)
    m = per_voxel.size
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, target[None].astype(np.int64), 1.0, axis=0)
    g_logits = (_softmax(logits) - onehot) / v / m
    g_sigma2 = (-ce / v**2 + 0.5 / v) / m
    return Loss(float(per_voxel.mean()), per_voxel, {"logits": g_logits, "sigma2": g_sigma2})


def combined_loss(logits, target, bundle: UncertaintyBundle, epsilon: float = 0.0) -> Loss:
    """Weighted cross entropy with the total variance of ``bundle``.

    Gradients are taken with respect to the log-variance channels.
    """
    var_t = np.exp(bundle.s_task)
    var_aug = np.exp(bundle.s_aug)
    base = weighted_ce(logits, target, var_t + var_aug.sum(axis=0), epsilon)
    g = base.grads["sigma2"]
    base.grads = {
        "logits": base.grads["logits"],
        "s_task": g * var_t,
        "s_aug": g[None] * var_aug,
    }
    return base


# --------------------------------------------------------------------------
# consistency terms

def _forward_diff(x: np.ndarray, axis: int) -> np.ndarray:
    """Forward difference with a replicated last sample (so the last entry is 0)."""
    d = np.zeros_like(x)
    n = x.shape[axis]
    if n > 1:
        hi = [slice(None)] * x.ndim
        lo = [slice(None)] * x.ndim
        hi[axis] = slice(1, None)
        lo[axis] = slice(0, n - 1)
        d[tuple(lo)] = x[tuple(hi)] - x[tuple(lo)]
    return d


def _forward_diff_T(g: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(g)
    n = g.shape[axis]
    if n > 1:
        head = [slice(None)] * g.ndim
        tail = [slice(None)] * g.ndim
        head[axis] = slice(0, n - 1)
        tail[axis] = slice(1, None)
        out[tuple(head)] -= g[tuple(head)]
        out[tuple(tail)] += g[tuple(head)]
    return out


def _box_sum(x: np.ndarray) -> np.ndarray:
    # zero-padded 3x3x3 window sum; the operator is symmetric
    return uniform_filter(x, size=3, mode="constant", cval=0.0) * 27.0


class _Box:
    """3x3x3 window mean counting only in-bounds voxels."""

    def __init__(self, shape):
        self.count = _box_sum(np.ones(shape))

    def __call__(self, x):
        return _box_sum(x) / self.count

    def T(self, g):
        return _box_sum(g / self.count)


def ssim3(pred: np.ndarray, target: np.ndarray, data_range: float | None = None,
          with_grad: bool = False):
    """Mean SSIM over 3x3x3 box windows; optionally its gradient w.r.t. ``pred``.

    ``data_range`` defaults to the dynamic range of ``target`` (1 when flat, i.e.
    below 1e-12).
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("SSIM inputs differ in shape")
    if data_range is None:
        data_range = float(y.max() - y.min())
    if data_range < 1e-12:
        # flat (or numerically flat) target: constants would underflow to 0
        data_range = 1.0
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    box = _Box(x.shape)
    mx, my = box(x), box(y)
    vx = box(x * x) - mx * mx
    vy = box(y * y) - my * my
    cxy = box(x * y) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * cxy + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    s = (a1 * a2) / (b1 * b2)
    value = float(s.mean())
    if not with_grad:
        return value
    ds_dmx = (2 * my * a2) / (b1 * b2) - s * 2 * mx / b1
    ds_dvx = -s / b2
    ds_dcxy = 2 * a1 / (b1 * b2)
    g_mean = ds_dmx - 2 * mx * ds_dvx - my * ds_dcxy
    grad = (box.T(g_mean) + 2 * x * box.T(ds_dvx) + y * box.T(ds_dcxy)) / s.size
    return value, grad


def consistency_loss(pred, target, lam: float = 0.1) -> Loss:
    """L1 + forward-difference gradient L1 + ``lam * (1 - SSIM)`` between variance maps.

    ``target`` is a pseudo label and receives no gradient.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    m = x.size
    diff = x - y
    l1 = np.abs(diff).mean()
    grad = np.sign(diff) / m
    lgrad = 0.0
    for axis in range(x.ndim):
        dd = _forward_diff(x, axis) - _forward_diff(y, axis)
        lgrad += np.abs(dd).mean() / x.ndim
        grad = grad + _forward_diff_T(np.sign(dd), axis) / (m * x.ndim)
    value = l1 + lgrad
    if lam:
        ssim, g_ssim = ssim3(x, y, with_grad=True)
        value += lam * (1.0 - ssim)
        grad = grad - lam * g_ssim
    return Loss(float(value), None, {"pred": grad})


def aug_loss(logits, target, s_task, s_aug_i, pseudo_s_task, epsilon: float = 0.0,
             lam: float = 0.1) -> Loss:
    """Teacher loss: two-channel combined loss plus task-uncertainty consistency.

    ``pseudo_s_task`` comes from the frozen task network and is a constant.
    """
    s_task = np.asarray(s_task, dtype=np.float64)
    bundle = UncertaintyBundle(s_task, np.asarray(s_aug_i, dtype=np.float64)[None])
    base = combined_loss(logits, target, bundle, epsilon)
    var_t = np.exp(s_task)
    cons = consistency_loss(var_t, np.exp(pseudo_s_task), lam)
    grads = {
        "logits": base.grads["logits"],
        "s_task": base.grads["s_task"] + cons.grads["pred"] * var_t,
        "s_aug": base.grads["s_aug"][0],
        "pseudo_s_task": np.zeros_like(np.asarray(pseudo_s_task, dtype=np.float64)),
    }
    return Loss(base.value + cons.value, base.per_voxel, grads)


def student_loss(logits, target, bundle: UncertaintyBundle, pseudo_s_task,
                 pseudo_s_aug: Sequence[np.ndarray], epsilon: float = 0.0,
                 lam: float = 0.1) -> Loss:
    """Combined loss over all channels plus per-channel consistency with frozen teachers."""
    base = combined_loss(logits, target, bundle, epsilon)
    var_t = np.exp(bundle.s_task)
    cons_t = consistency_loss(var_t, np.exp(pseudo_s_task), lam)
    value = base.value + cons_t.value
    g_task = base.grads["s_task"] + cons_t.grads["pred"] * var_t
    g_aug = np.array(base.grads["s_aug"])
    if len(pseudo_s_aug) != bundle.n_aug:
        raise ValueError("need one teacher pseudo label per augmentation channel")
    for i, pseudo in enumerate(pseudo_s_aug):
        var_i = np.exp(bundle.s_aug[i])
        cons_i = consistency_loss(var_i, np.exp(pseudo), lam)
        value += cons_i.value
        g_aug[i] += cons_i.grads["pred"] * var_i
    return Loss(value, base.per_voxel, {"logits": base.grads["logits"], "s_task": g_task,
                                        "s_aug": g_aug})


# --------------------------------------------------------------------------
# entropy and error bars

def entropy_map(probs: np.ndarray) -> np.ndarray:
    """Per-voxel entropy in nats of channel-first probabilities (0 log 0 = 0)."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=0)


def entropy_to_variance(h):
    """Gaussian variance with entropy ``h``: ``exp(2h) / (2 pi e)``."""
    return np.exp(2.0 * np.asarray(h, dtype=np.float64)) / TWO_PI_E


def variance_to_entropy(var):
    return 0.5 * np.log(TWO_PI_E * np.asarray(var, dtype=np.float64))


def total_entropy_variance(probs: np.ndarray) -> float:
    """Sum of entropy-derived per-voxel variances."""
    return float(entropy_to_variance(entropy_map(probs)).sum())


@dataclass
class ErrorBar:
    volume: float
    sigma: float

    @property
    def interval(self) -> tuple[float, float]:
        return self.volume - self.sigma, self.volume + self.sigma


def volume_error_bars(probs: np.ndarray, clean_reference_variance: float,
                      foreground: int = 1) -> ErrorBar:
    """Segmentation volume (voxels) with a +/- sigma error bar.

    ``probs`` are the variance-scaled class probabilities. The total of the
    entropy-derived per-voxel variances is calibrated by subtracting the same
    total measured on clean data.
    """
    p = np.asarray(probs, dtype=np.float64)
    volume = float(p[foreground].sum())
    total = total_entropy_variance(p) - clean_reference_variance
    return ErrorBar(volume, math.sqrt(max(0.0, total)))


@dataclass
class EpsilonSchedule:
    """Stabiliser and learning-rate schedule halved whenever the loss plateaus.

    The plateau test compares the mean loss over the latest ``window``
    iterations with the mean over the window before it; a relative improvement
    under ``threshold`` halves both epsilon and the learning-rate scale, until
    epsilon drops below ``floor``.
    """

    epsilon: float = 0.05
    floor: float = 1e-3
    window: int = 200
    threshold: float = 0.01
    lr_scale: float = 1.0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def done(self) -> bool:
        return self.epsilon < self.floor

    def update(self, loss: float) -> bool:
        """Record one iteration's loss; returns True when a halving happened."""
        if self.done:
            return False
        self.history.append(float(loss))
        if len(self.history) < 2 * self.window:
            return False
        prev = float(np.mean(self.history[-2 * self.window:-self.window]))
        cur = float(np.mean(self.history[-self.window:]))
        improvement = (prev - cur) / max(abs(prev), 1e-12)
        if improvement < self.threshold:
            self.epsilon /= 2.0
            self.lr_scale /= 2.0
            # the loss surface changes with epsilon; restart the comparison
            self.history.clear()
            return True
        # slide by a full window so each decision uses fresh data
        del self.history[: self.window]
        return False

    def state(self) -> dict:
        return {"epsilon": self.epsilon, "floor": self.floor, "window": self.window,
                "threshold": self.threshold, "lr_scale": self.lr_scale,
                "history": list(self.history)}

    @classmethod
    def from_state(cls, state: dict) -> "EpsilonSchedule":
        return cls(**state)

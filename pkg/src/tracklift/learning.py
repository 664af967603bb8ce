"""Losses with analytic gradients and a small 3D-position regressor.

The regressor maps a 6-value box-geometry descriptor to a camera-frame
position plus a log-variance; it trains by full-batch gradient descent on
the uncertainty-weighted L1 position loss, so every run with the same
seed is bitwise reproducible. No deep-learning framework is involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .association import FeatureVector, ShapeMismatch
from .geometry import BBox2D, PinholeIntrinsics

_CLAMP = 1e-7


@dataclass(frozen=True)
class LossValue:
    value: float
    grads: dict[str, np.ndarray]


def _as_vector(x) -> np.ndarray:
    if isinstance(x, FeatureVector):
        return np.asarray(x.values, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def l3d_loss(pred: np.ndarray, target: np.ndarray, log_var: float) -> LossValue:
    """Uncertainty-weighted position loss L = |o - o*|_1 / sigma^2 + log sigma^2.

    Parameterized in s = log sigma^2 so the variance stays positive:
    L = |o - o*|_1 * exp(-s) + s. The sign subgradient is 0 at exact
    component ties.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    l1 = float(np.sum(np.abs(diff)))
    inv_var = float(np.exp(-log_var))
    value = l1 * inv_var + log_var
    return LossValue(
        value,
        {
            "pred": np.sign(diff) * inv_var,
            "log_var": np.array(1.0 - l1 * inv_var),
        },
    )


def triplet_loss(anchor, positive, negative, margin: float) -> LossValue:
    """Hinge on embedding distances: max(0, |a-p| - |a-n| + margin)."""
    a, p, n = _as_vector(anchor), _as_vector(positive), _as_vector(negative)
    if not (a.shape == p.shape == n.shape):
        raise ShapeMismatch(f"shapes differ: {a.shape}, {p.shape}, {n.shape}")
    dp = float(np.linalg.norm(a - p))
    dn = float(np.linalg.norm(a - n))
    value = dp - dn + margin
    zeros = np.zeros_like(a)
    if value <= 0:
        return LossValue(0.0, {"anchor": zeros, "positive": zeros.copy(), "negative": zeros.copy()})
    gp = (a - p) / dp if dp > 0 else zeros
    gn = (a - n) / dn if dn > 0 else zeros
    return LossValue(value, {"anchor": gp - gn, "positive": -gp, "negative": gn})


def bce_association_loss(soft_assignment: np.ndarray, gt_assignment: np.ndarray) -> LossValue:
    """Mean binary cross-entropy between soft matches and 0/1 ground truth."""
    p = np.asarray(soft_assignment, dtype=np.float64)
    y = np.asarray(gt_assignment, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeMismatch(f"soft shape {p.shape} != gt shape {y.shape}")
    clamped = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    value = float(np.mean(-(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped))))
    grad = (-y / clamped + (1.0 - y) / (1.0 - clamped)) / p.size
    grad = np.where((p > _CLAMP) & (p < 1.0 - _CLAMP), grad, 0.0)
    return LossValue(value, {"soft_assignment": grad})


@dataclass
class RegressorWeights:
    """Two-layer tanh perceptron: 6-value descriptor -> (x, y, z, log_var)."""

    w1: np.ndarray  # (hidden, 6)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (4, hidden)
    b2: np.ndarray  # (4,)

    def __post_init__(self):
        h = self.w1.shape[0]
        if self.w1.shape != (h, 6) or self.b1.shape != (h,):
            raise ShapeMismatch(f"layer-1 shapes {self.w1.shape}, {self.b1.shape}")
        if self.w2.shape != (4, h) or self.b2.shape != (4,):
            raise ShapeMismatch(f"layer-2 shapes {self.w2.shape}, {self.b2.shape}")

    @classmethod
    def initialize(cls, seed: int, hidden: int = 32) -> "RegressorWeights":
        rng = np.random.default_rng(seed)
        s1 = 1.0 / np.sqrt(6.0)
        s2 = 1.0 / np.sqrt(hidden)
        return cls(
            w1=rng.uniform(-s1, s1, size=(hidden, 6)),
            b1=rng.uniform(-s1, s1, size=hidden),
            w2=rng.uniform(-s2, s2, size=(4, hidden)),
            b2=rng.uniform(-s2, s2, size=4),
        )

    def copy(self) -> "RegressorWeights":
        return RegressorWeights(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def box_descriptor(box: BBox2D, intrinsics: PinholeIntrinsics) -> np.ndarray:
    """Normalized box geometry: cx/W, cy/H, w/W, h/H, aspect, bottom/H."""
    W, H = float(intrinsics.width), float(intrinsics.height)
    cx, cy = box.center
    return np.array(
        [
            cx / W,
            cy / H,
            box.width_px / W,
            box.height_px / H,
            box.width_px / box.height_px,
            box.bottom / H,
        ]
    )


def regressor_forward(desc: np.ndarray, w: RegressorWeights) -> tuple[np.ndarray, float]:
    """Deterministic forward pass; returns (position, log_var)."""
    d = np.asarray(desc, dtype=np.float64)
    if d.shape != (6,):
        raise ShapeMismatch(f"descriptor must be a 6-vector, got shape {d.shape}")
    h = np.tanh(w.w1 @ d + w.b1)
    out = w.w2 @ h + w.b2
    return out[:3], float(out[3])


def _forward_batch(X: np.ndarray, w: RegressorWeights):
    H = np.tanh(X @ w.w1.T + w.b1)
    out = H @ w.w2.T + w.b2
    return out[:, :3], out[:, 3], H


def regressor_loss_and_grads(
    X: np.ndarray, targets: np.ndarray, w: RegressorWeights
) -> tuple[float, RegressorWeights]:
    """Mean uncertainty-weighted L1 loss over a batch and its weight gradients."""
    pred, log_var, H = _forward_batch(X, w)
    diff = pred - targets
    inv_var = np.exp(-log_var)
    l1 = np.sum(np.abs(diff), axis=1)
    loss = float(np.mean(l1 * inv_var + log_var))

    n = len(X)
    d_out = np.empty((n, 4))
    d_out[:, :3] = np.sign(diff) * inv_var[:, None]
    d_out[:, 3] = 1.0 - l1 * inv_var
    d_out /= n
    gw2 = d_out.T @ H
    gb2 = d_out.sum(axis=0)
    dH = (d_out @ w.w2) * (1.0 - H * H)
    gw1 = dH.T @ X
    gb1 = dH.sum(axis=0)
    return loss, RegressorWeights(gw1, gb1, gw2, gb2)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 2000
    seed: int = 0
    hidden: int = 32

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")


def train_regressor(
    dataset: list[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig = TrainConfig(),
) -> tuple[RegressorWeights, list[float]]:
    """Full-batch gradient descent on the mean position loss.

    Returns the trained weights and the loss curve (entry 0 is the loss at
    initialization, then one entry per epoch).
    """
    if not dataset:
        raise ValueError("training needs at least one (descriptor, target) pair")
    X = np.array([np.asarray(d, dtype=np.float64) for d, _ in dataset])
    Y = np.array([np.asarray(t, dtype=np.float64) for _, t in dataset])
    w = RegressorWeights.initialize(cfg.seed, cfg.hidden)
    loss, _ = regressor_loss_and_grads(X, Y, w)
    curve = [loss]
    for _ in range(cfg.epochs):
        loss, g = regressor_loss_and_grads(X, Y, w)
        w.w1 -= cfg.learning_rate * g.w1
        w.b1 -= cfg.learning_rate * g.b1
        w.w2 -= cfg.learning_rate * g.w2
        w.b2 -= cfg.learning_rate * g.b2
        loss_after, _ = regressor_loss_and_grads(X, Y, w)
        curve.append(loss_after)
    return w, curve

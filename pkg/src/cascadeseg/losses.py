"""Training losses with per-branch deep supervision.

Cross-entropy is the default; a soft Dice loss on softmax probabilities is
available by configuration. The total loss combines a global term on the
fused logits with weighted auxiliary terms on every branch prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .ops import add_elementwise, scale, softmax_channels
from .tensor import Tensor, record_op

DICE_SMOOTHING = 1.0


@dataclass
class LossConfig:
    loss_kind: str = "cross_entropy"
    aux_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    global_weight: float = 1.0

    def __post_init__(self):
        self.aux_weights = tuple(float(w) for w in self.aux_weights)
        if self.loss_kind not in ("cross_entropy", "soft_dice"):
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}")
        if any(w < 0 for w in self.aux_weights):
            raise ConfigError("aux_weights must be >= 0")
        if self.global_weight <= 0:
            raise ConfigError("global_weight must be > 0")


def _check_labels(pred_shape, labels: np.ndarray, classes: int) -> None:
    expect = (pred_shape[0],) + tuple(pred_shape[2:])
    if labels.shape != expect:
        raise ShapeError(f"labels shape {labels.shape} != expected {expect}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"label values must lie in [0, {classes})")


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over all positions of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    classes = logits.shape[1]
    _check_labels(logits.shape, labels, classes)
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    onehot_idx = np.expand_dims(labels, 1)
    picked = np.take_along_axis(log_probs, onehot_idx, axis=1)
    m = picked.size
    out = Tensor(np.asarray(-picked.sum(dtype=x.dtype) / m))

    def backward_fn(gy):
        p = np.exp(log_probs)
        np.put_along_axis(p, onehot_idx, np.take_along_axis(p, onehot_idx, axis=1) - 1.0,
                          axis=1)
        return (p * (gy / m),)

    return record_op("cross_entropy", (logits,), out, backward_fn, "cross_entropy")


def soft_dice_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """1 - mean over foreground classes of the smoothed Dice of (probs, labels).

    Per class c >= 1: (2*sum(p_c*y_c) + eps) / (sum(p_c) + sum(y_c) + eps),
    eps = 1.0, with sums taken over batch and space jointly.
    """
    labels = np.asarray(labels)
    classes = probs.shape[1]
    if classes < 2:
        raise ShapeError("soft_dice_loss needs at least 2 classes")
    _check_labels(probs.shape, labels, classes)
    p = probs.data
    eps = DICE_SMOOTHING
    fg = range(1, classes)
    y = np.stack([(labels == c) for c in fg], axis=1).astype(p.dtype)
    pf = p[:, 1:]
    inter = (pf * y).sum(axis=tuple(i for i in range(pf.ndim) if i != 1))
    sums_p = pf.sum(axis=tuple(i for i in range(pf.ndim) if i != 1))
    sums_y = y.sum(axis=tuple(i for i in range(y.ndim) if i != 1))
    dice = (2.0 * inter + eps) / (sums_p + sums_y + eps)
    out = Tensor(np.asarray(p.dtype.type(1.0 - dice.mean())))
    n_fg = classes - 1

    def backward_fn(gy):
        gp = np.zeros_like(p)
        denom = sums_p + sums_y + eps
        for j in range(n_fg):
            # d dice_j / d p_j = (2*y*denom - (2*inter+eps)) / denom^2
            num = 2.0 * y[:, j] * denom[j] - (2.0 * inter[j] + eps)
            gp[:, 1 + j] = -(gy / n_fg) * num / (denom[j] ** 2)
        return (gp,)

    return record_op("soft_dice", (probs,), out, backward_fn, "soft_dice")


def _single_loss(logits: Tensor, labels: np.ndarray, kind: str) -> Tensor:
    if kind == "cross_entropy":
        return cross_entropy_loss(logits, labels)
    return soft_dice_loss(softmax_channels(logits), labels)


def loss_components(out, labels: np.ndarray, cfg: LossConfig):
    """(total, global term, per-branch terms) for one network output."""
    if len(cfg.aux_weights) != len(out.branch_logits):
        raise ConfigError(f"aux_weights has {len(cfg.aux_weights)} entries but the "
                          f"network produced {len(out.branch_logits)} branches")
    global_term = _single_loss(out.fused_logits, labels, cfg.loss_kind)
    branch_terms = [_single_loss(bl, labels, cfg.loss_kind)
                    for bl in out.branch_logits]
    total = scale(global_term, cfg.global_weight)
    for w, term in zip(cfg.aux_weights, branch_terms):
        if w != 0.0:
            total = add_elementwise(total, scale(term, w))
    return total, global_term, branch_terms


def total_loss(out, labels: np.ndarray, cfg: LossConfig) -> Tensor:
    """Weighted sum: global_weight * L(fused logits) + sum_i w_i * L(branch_i)."""
    return loss_components(out, labels, cfg)[0]

"""Segmentation losses with analytic gradients at the logits.

All functions take softmax probabilities (M x K), integer targets and a
boolean point mask, and return a :class:`LossValue` whose gradient is taken
with respect to the pre-softmax logits. Points outside the mask get a zero
gradient row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

P_MIN = 1e-12


@dataclass
class LossValue:
    value: float
    grad: np.ndarray
    count: int

    def __add__(self, other: LossValue) -> LossValue:
        return LossValue(self.value + other.value, self.grad + other.grad, max(self.count, other.count))

    def scaled(self, factor: float) -> LossValue:
        return LossValue(factor * self.value, factor * self.grad, self.count)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Chain dL/dp through the softmax to dL/dlogits."""
    return probs * (grad_p - np.sum(grad_p * probs, axis=1, keepdims=True))


def _prepare(probs, targets, mask):
    probs = np.asarray(probs, dtype=np.float64)
    m = len(probs)
    mask = np.ones(m, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if len(mask) != m:
        raise ValueError("mask length must match the number of points")
    if targets is not None:
        targets = np.asarray(targets)
        if len(targets) != m:
            raise ValueError("targets length must match the number of points")
        if mask.any() and targets[mask].max() >= probs.shape[1]:
            raise ValueError("target class index out of range")
    return probs, targets, mask


def _zero(probs) -> LossValue:
    return LossValue(0.0, np.zeros_like(probs), 0)


def cross_entropy(probs, targets, mask=None) -> LossValue:
    probs, targets, mask = _prepare(probs, targets, mask)
    idx = np.flatnonzero(mask)
    if not len(idx):
        return _zero(probs)
    t = targets[idx]
    value = float(-np.mean(np.log(np.clip(probs[idx, t], P_MIN, 1.0))))
    grad = np.zeros_like(probs)
    grad[idx] = probs[idx]
    grad[idx, t] -= 1.0
    grad[idx] /= len(idx)
    return LossValue(value, grad, len(idx))


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    p = len(gt_sorted)
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if p > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_extension(errors: np.ndarray, fg: np.ndarray) -> tuple[float, np.ndarray]:
    """Lovasz-extended Jaccard loss of one class and its gradient w.r.t. `errors`."""
    errors = np.asarray(errors, dtype=np.float64)
    order = np.argsort(-errors, kind="stable")
    g = lovasz_grad(np.asarray(fg, dtype=np.float64)[order])
    grad = np.empty_like(errors)
    grad[order] = g
    return float(errors[order] @ g), grad


def lovasz_softmax(probs, targets, mask=None) -> LossValue:
    """Lovasz-softmax averaged over the classes present among masked targets."""
    probs, targets, mask = _prepare(probs, targets, mask)
    idx = np.flatnonzero(mask)
    if not len(idx):
        return _zero(probs)
    p = probs[idx]
    t = targets[idx]
    present = np.unique(t)
    grad_p = np.zeros_like(p)
    value = 0.0
    for c in present:
        fg = t == c
        err = np.abs(fg - p[:, c])
        v, g = lovasz_extension(err, fg)
        value += v
        # d|fg - p| / dp = -1 on foreground points, +1 elsewhere
        grad_p[:, c] += np.where(fg, -g, g)
    value /= len(present)
    grad_p /= len(present)
    grad = np.zeros_like(probs)
    grad[idx] = softmax_backward(p, grad_p)
    return LossValue(float(value), grad, len(idx))


def labeled_loss(probs, targets, mask=None) -> LossValue:
    """Cross-entropy plus Lovasz-softmax on the same points."""
    return cross_entropy(probs, targets, mask) + lovasz_softmax(probs, targets, mask)


def unlabeled_loss(probs, sources, weights, lambda_u: float) -> LossValue:
    """Weighted sum over pseudo-label sources of the labeled loss, scaled by lambda_u.

    `sources` is a sequence of (pseudo labels, retained mask) pairs and
    `weights` the matching distillation weights.
    """
    probs = np.asarray(probs, dtype=np.float64)
    total = _zero(probs)
    if lambda_u == 0 or not len(sources):
        return total
    if len(weights) != len(sources):
        raise ValueError("one weight per pseudo-label source is required")
    value = 0.0
    grad = np.zeros_like(probs)
    count = 0
    for (labels, mask), w in zip(sources, weights):
        term = labeled_loss(probs, labels, mask)
        value += float(w) * term.value
        grad += float(w) * term.grad
        count = max(count, term.count)
    return LossValue(lambda_u * value, lambda_u * grad, count)


def regularization_loss(probs, mask=None, lambda_reg: float = 0.1) -> LossValue:
    """lambda_reg times the mean cross-entropy of each row against the uniform prior."""
    probs, _, mask = _prepare(probs, None, mask)
    idx = np.flatnonzero(mask)
    if not len(idx):
        return _zero(probs)
    k = probs.shape[1]
    p = probs[idx]
    value = lambda_reg * float(np.mean(-np.log(np.clip(p, P_MIN, 1.0)).sum(axis=1) / k))
    grad = np.zeros_like(probs)
    grad[idx] = lambda_reg * (p - 1.0 / k) / len(idx)
    return LossValue(value, grad, len(idx))

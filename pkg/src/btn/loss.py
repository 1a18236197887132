"""Composite certified-training objective.

For a batch of N (image, density) pairs the objective is

    total = 1/(2N) * sum_j [ kappa * natural_j + (1 - kappa) * certify_j + reg ]

with ``natural_j = ||f(x_j) - l_j||^2``, ``certify_j`` the summed squared
worst-case pixel deviation of the certified output interval, and ``reg`` the
weight-norm penalty. ``reg`` sits inside the per-image sum, so its effective
weight after the 1/(2N) factor is one half.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import weight_norms
from .numerics import IntervalError, as_tensor, check_same_shape, reduce_sum


@dataclass(frozen=True)
class LossWeights:
    kappa: float = 1.0
    lambda_l1: float = 1e-3
    beta_l2: float = 10.0
    norm_case: str = "linf"
    epsilon: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [0, 1], got {self.kappa}")
        if self.lambda_l1 < 0 or self.beta_l2 < 0 or self.epsilon < 0:
            raise ValueError("lambda_l1, beta_l2 and epsilon must be non-negative")
        if self.norm_case not in ("linf", "l2"):
            raise ValueError(f"unknown norm case {self.norm_case!r}")


@dataclass(frozen=True)
class LossBreakdown:
    """Batch-averaged parts; ``total = kappa*natural + (1-kappa)*certify + reg``."""

    natural: float
    certify: float
    reg: float
    total: float


def natural_loss(pred, gt) -> float:
    pred, gt = as_tensor(pred), as_tensor(gt)
    check_same_shape(pred, gt, "prediction and ground truth")
    return reduce_sum((pred - gt) ** 2)


def _worst_deviation(lower, upper, gt):
    """Per-pixel max(|gt - lower|, |upper - gt|) and whether the upper side won."""
    below = np.abs(gt - lower)
    above = np.abs(upper - gt)
    upper_wins = above >= below  # ties go to the upper branch
    return np.where(upper_wins, above, below), upper_wins


def certify_error_loss(lower, upper, gt) -> float:
    lower, upper, gt = as_tensor(lower), as_tensor(upper), as_tensor(gt)
    check_same_shape(lower, upper, "interval bounds")
    check_same_shape(lower, gt, "interval and ground truth")
    if np.any(lower > upper):
        raise IntervalError("certified interval has lower > upper")
    dev, _ = _worst_deviation(lower, upper, gt)
    return reduce_sum(dev**2)


def _reg_terms(model, w: LossWeights):
    """Yield (layer, kind) where kind is 'l1' or 'row_l2' for every affine layer."""
    row_l2_layers = set()
    if w.norm_case == "l2":
        row_l2_layers = {id(layer) for layer in model.first_affine_layers()}
    for layer in model.affine_layers():
        yield layer, ("row_l2" if id(layer) in row_l2_layers else "l1")


def reg_loss(model, w: LossWeights) -> float:
    """lambda * sum |W| over affine layers (biases excluded).

    In the L2 case the first affine layer of every column is instead
    penalised by beta * sum_j ||W_j||_2 over its rows.
    """
    total = 0.0
    for layer, kind in _reg_terms(model, w):
        l1, _, row_l2 = weight_norms(layer)
        total += w.beta_l2 * float(row_l2.sum()) if kind == "row_l2" else w.lambda_l1 * l1
    return total


def reg_grads(model, w: LossWeights) -> dict[str, np.ndarray]:
    grads = {}
    for layer, kind in _reg_terms(model, w):
        role, W = layer.params()[0]
        if kind == "row_l2":
            rows = layer.weight_rows
            norms = np.sqrt((rows**2).sum(axis=1))
            safe = np.where(norms > 0, norms, 1.0)
            g = (w.beta_l2 * rows / safe[:, None]).reshape(W.shape)
        else:
            g = w.lambda_l1 * np.sign(W)
        grads[f"{layer.name}.{role}"] = g
    return grads


def _add(grads, extra, scale=1.0):
    for k, g in extra.items():
        grads[k] = grads[k] + scale * g if k in grads else scale * g


def total_loss(model, images, gts, w: LossWeights):
    """Objective value and exact parameter gradients for one batch.

    When ``kappa == 1`` the certified pass is skipped entirely; the certify
    part is then reported as 0 and contributes no gradient.
    """
    images, gts = as_tensor(images), as_tensor(gts)
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    scale = 1.0 / (2.0 * n)
    certify_on = w.kappa < 1.0

    if certify_on:
        y, lo, up, caches = model.joint_forward(images, w.epsilon, w.norm_case)
    else:
        y, caches = model.forward(images)
    check_same_shape(y, gts, "prediction and ground truth")

    nat_per = [natural_loss(y[j], gts[j]) for j in range(n)]
    gy = (w.kappa * 2.0 * scale) * (y - gts)

    cert_per = [0.0] * n
    if certify_on:
        dev, upper_wins = _worst_deviation(lo, up, gts)
        cert_per = [reduce_sum(dev[j] ** 2) for j in range(n)]
        coef = (1.0 - w.kappa) * 2.0 * scale * dev
        gu = np.where(upper_wins, coef * np.sign(up - gts), 0.0)
        gl = np.where(upper_wins, 0.0, coef * np.sign(lo - gts))
        grads = model.joint_backward(gy, gl, gu, caches, w.epsilon, w.norm_case)
    else:
        _, grads = model.backward(gy, caches, need_input=False)

    reg = reg_loss(model, w)
    _add(grads, reg_grads(model, w), 0.5)

    natural = scale * sum(nat_per)
    certify = scale * sum(cert_per)
    reg_part = 0.5 * reg
    total = w.kappa * natural + (1.0 - w.kappa) * certify + reg_part
    return LossBreakdown(natural, certify, reg_part, total), grads


def loss_value(model, images, gts, w: LossWeights) -> float:
    """Objective value only, through the generic (non-fused) passes."""
    images, gts = as_tensor(images), as_tensor(gts)
    n = images.shape[0]
    scale = 1.0 / (2.0 * n)
    y, _ = model.forward(images)
    total = w.kappa * scale * sum(natural_loss(y[j], gts[j]) for j in range(n))
    if w.kappa < 1.0:
        if w.norm_case == "linf":
            lo, up, _ = model.interval_forward_cached(images - w.epsilon, images + w.epsilon)
        else:
            lo, up, _ = model.l2_forward_cached(images, w.epsilon)
        total += (1.0 - w.kappa) * scale * sum(
            certify_error_loss(lo[j], up[j], gts[j]) for j in range(n)
        )
    return total + 0.5 * reg_loss(model, w)

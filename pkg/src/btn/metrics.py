"""Clean and certified counting metrics over a dataset split.

The ground-truth count of an image is the sum of its ground-truth density
map, so count and pixel metrics compare against the same target.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .bounds import PerturbationSpec, certified_interval
from .model import batch_counts

EVAL_BATCH = 25


@dataclass(frozen=True)
class EvalReport:
    n_images: int
    clean_mae: float
    clean_mse: float
    ct_mae: float
    ct_mse: float
    cp_mae: float
    cp_mse: float
    epsilon: float
    norm_case: str

    def to_dict(self) -> dict:
        return asdict(self)


def _mae_rmse(d) -> tuple[float, float]:
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        raise ValueError("empty dataset")
    return float(np.mean(np.abs(d))), math.sqrt(float(np.mean(d**2)))


def _batches(dataset, batch):
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    for start in range(0, n, batch):
        sub = dataset.samples[start : start + batch]
        yield np.stack([s.image for s in sub]), np.stack([s.gt_density for s in sub])


def gt_counts(dataset) -> np.ndarray:
    return batch_counts(dataset.densities)


def clean_predictions(m, dataset, batch: int = EVAL_BATCH) -> np.ndarray:
    out = []
    for images, _ in _batches(dataset, batch):
        y, _ = m.forward(images)
        out.append(batch_counts(y))
    return np.concatenate(out)


def clean_metrics(m, dataset) -> tuple[float, float]:
    return _mae_rmse(gt_counts(dataset) - clean_predictions(m, dataset))


def certified_deviations(m, dataset, spec: PerturbationSpec, batch: int = EVAL_BATCH):
    """Per-image (tight d_i, pixel s_i, pixel sum of squared maxima, count lo, count up)."""
    tight, pix, pix_sq, c_lo, c_up = [], [], [], [], []
    for images, gts in _batches(dataset, batch):
        lo, up = certified_interval(m, images, spec)
        gt_c = batch_counts(gts)
        lo_c, up_c = batch_counts(lo), batch_counts(up)
        tight.append(np.maximum(np.abs(gt_c - lo_c), np.abs(up_c - gt_c)))
        worst = np.maximum(np.abs(up - gts), np.abs(gts - lo))
        pix.append(batch_counts(worst))
        pix_sq.append(batch_counts(worst**2))
        c_lo.append(lo_c)
        c_up.append(up_c)
    return tuple(np.concatenate(v) for v in (tight, pix, pix_sq, c_lo, c_up))


def certify_tight(m, dataset, spec: PerturbationSpec) -> tuple[float, float]:
    d, *_ = certified_deviations(m, dataset, spec)
    return _mae_rmse(d)


def certify_pixel(m, dataset, spec: PerturbationSpec) -> tuple[float, float]:
    """MAE of per-image summed pixel maxima; the MSE squares each pixel's max
    before summing, then averages over images and takes the root."""
    _, s, s_sq, _, _ = certified_deviations(m, dataset, spec)
    return float(np.mean(s)), math.sqrt(float(np.mean(s_sq)))


def evaluate(m, dataset, spec: PerturbationSpec) -> EvalReport:
    clean_mae, clean_mse = clean_metrics(m, dataset)
    d, s, s_sq, _, _ = certified_deviations(m, dataset, spec)
    ct_mae, ct_mse = _mae_rmse(d)
    return EvalReport(
        n_images=len(dataset),
        clean_mae=clean_mae,
        clean_mse=clean_mse,
        ct_mae=ct_mae,
        ct_mse=ct_mse,
        cp_mae=float(np.mean(s)),
        cp_mse=math.sqrt(float(np.mean(s_sq))),
        epsilon=spec.epsilon,
        norm_case=spec.norm,
    )

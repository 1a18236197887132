"""Perturbation sets, whole-model certification and analytic output bounds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .layers import weight_norms
from .model import MultiColumnModel
from .numerics import IntervalTensor, as_tensor, reduce_sum


@dataclass(frozen=True)
class PerturbationSpec:
    norm: str
    epsilon: float
    clamp_to_unit: bool = False

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}; expected 'linf' or 'l2'")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass(frozen=True)
class CertResult:
    output_interval: IntervalTensor
    count_lower: float
    count_upper: float
    theorem1_bound: Optional[float] = None
    lemma1_first_layer: Optional[IntervalTensor] = None


def input_box(x, spec: PerturbationSpec) -> IntervalTensor:
    """The Linf box [x - eps, x + eps], optionally intersected with [0, 1]."""
    if spec.norm != "linf":
        raise ValueError("input_box covers the Linf case only; use certify_l2 for an L2 ball")
    x = as_tensor(x)
    lo, up = x - spec.epsilon, x + spec.epsilon
    if spec.clamp_to_unit:
        lo, up = np.clip(lo, 0.0, 1.0), np.clip(up, 0.0, 1.0)
    return IntervalTensor(lo, up)


def _result(lo, up, **extra) -> CertResult:
    iv = IntervalTensor(lo, up)
    return CertResult(iv, reduce_sum(lo), reduce_sum(up), **extra)


def certified_interval(m, x, spec: PerturbationSpec):
    """Output (lower, upper) for one image or a batch, without count bookkeeping."""
    x = as_tensor(x)
    if spec.norm == "l2":
        lo, up, _ = m.l2_forward_cached(x, spec.epsilon)
        return lo, up
    if spec.clamp_to_unit:
        box = input_box(x, spec)
        lo, up, _ = m.interval_forward_cached(box.lower, box.upper)
        return lo, up
    if not isinstance(m, MultiColumnModel):
        lo, up, _ = m.interval_forward_cached(x - spec.epsilon, x + spec.epsilon)
        return lo, up
    # The unclamped box is centred on x, so the first affine layer's output
    # interval is its clean output +- eps * |W| 1; this is the training path.
    batched = x if x.ndim == 4 else x[None]
    _, lo, up, _ = m.joint_forward(batched, spec.epsilon, "linf")
    if batched is not x:
        lo, up = lo[0], up[0]
    return lo, up


def certify_linf(m, x, spec: PerturbationSpec) -> CertResult:
    if spec.norm != "linf":
        raise ValueError("certify_linf needs an Linf spec; use certify_l2")
    lo, up = certified_interval(m, x, spec)
    return _result(lo, up, theorem1_bound=norm_duality_bound(m, spec.epsilon))


def lemma1_interval(layer, x, eps: float) -> IntervalTensor:
    """Exact range of one affine layer's outputs over the L2 ball of radius eps."""
    z, _ = layer.forward(as_tensor(x))
    _, _, row_l2 = weight_norms(layer)
    rad = eps * row_l2
    if layer.kind != "dense":
        rad = rad[:, None, None]
    rad = np.broadcast_to(rad, z.shape)
    return IntervalTensor(z - rad, z + rad)


def certify_l2(m, x, spec: PerturbationSpec) -> CertResult:
    """First affine layer per column bounded exactly over the L2 ball, boxes after."""
    if spec.norm != "l2":
        raise ValueError("certify_l2 needs an L2 spec; use certify_linf")
    firsts = m.first_affine_layers()
    lo, up = certified_interval(m, x, spec)
    parts = [lemma1_interval(layer, x, spec.epsilon) for layer in firsts]
    if len(parts) == 1:
        first = parts[0]
    else:
        first = IntervalTensor(
            np.concatenate([p.lower for p in parts], axis=-3),
            np.concatenate([p.upper for p in parts], axis=-3),
        )
    return _result(lo, up, lemma1_first_layer=first)


def certify(m, x, spec: PerturbationSpec) -> CertResult:
    return certify_linf(m, x, spec) if spec.norm == "linf" else certify_l2(m, x, spec)


def _chain_product(layers) -> float:
    prod = 1.0
    for layer in layers:
        if layer.affine:
            prod *= weight_norms(layer)[1]
        # relu and max-pool are non-expansive in the sup norm: factor 1
    return prod


def norm_duality_bound(m, eps1: float) -> float:
    """eps1 times the product of max-row-L1 norms, an Linf-to-Linf gain bound.

    For the multi-column model each column contributes its own product P_c,
    and the fusion layer combines them as max_j sum_c ||W_fusion[j, c]||_1 P_c.
    """
    if eps1 < 0:
        raise ValueError("eps1 must be >= 0")
    if not isinstance(m, MultiColumnModel):
        return eps1 * _chain_product(m.layers)
    col_gain = [_chain_product(col.layers) for col in m.columns]
    rows = np.abs(m.fusion.weight_rows).reshape(m.fusion.kernel.shape[0], -1)
    blocks = np.split(rows, m.channel_splits, axis=1)
    per_out = sum(b.sum(axis=1) * p for b, p in zip(blocks, col_gain))
    return eps1 * float(np.max(per_out))

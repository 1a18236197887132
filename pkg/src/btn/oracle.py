"""Independent checks: sampled attacks, grid enumeration, finite differences.

Nothing here feeds back into certification; these only try to falsify it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bounds import CertResult, PerturbationSpec, certify
from .numerics import IntervalTensor, as_tensor, reduce_sum
from .rng import CounterRNG

ASCENT_STEPS = 20
CHUNK = 64
GRID_MAX_DIMS = 4
GRID_MAX_POINTS = 41


@dataclass
class AttackResult:
    n_samples: int
    empirical_pixel_min: np.ndarray
    empirical_pixel_max: np.ndarray
    worst_count_deviation: float
    worst_input: np.ndarray
    violations: int

    def digest(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "worst_count_deviation": self.worst_count_deviation,
            "violations": self.violations,
            "empirical_count_min": reduce_sum(self.empirical_pixel_min),
            "empirical_count_max": reduce_sum(self.empirical_pixel_max),
        }


def _count_grad(m, xs):
    """Outputs and d(sum of outputs)/d(input) for a batch of inputs."""
    y, caches = m.forward(xs)
    gx, _ = m.backward(np.ones_like(y), caches)
    return y, gx


def _project(delta, spec: PerturbationSpec):
    eps = spec.epsilon
    if spec.norm == "linf":
        return np.clip(delta, -eps, eps)
    flat = delta.reshape(len(delta), -1)
    norms = np.sqrt((flat**2).sum(axis=1))
    scale = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.0), 1.0)
    return (flat * scale[:, None]).reshape(delta.shape)


def _points(x, delta, spec):
    pts = x + delta
    if spec.clamp_to_unit:
        pts = np.clip(pts, 0.0, 1.0)
    return pts


def _uniform(rng: CounterRNG, k: int, shape, spec):
    d = int(np.prod(shape))
    if spec.norm == "linf":
        return rng.uniform(-spec.epsilon, spec.epsilon, k * d).reshape((k,) + shape)
    g = rng.normal(k * d).reshape(k, d)
    g /= np.sqrt((g**2).sum(axis=1))[:, None]
    r = spec.epsilon * rng.random(k) ** (1.0 / d)
    return (g * r[:, None]).reshape((k,) + shape)


def _corners(rng: CounterRNG, k: int, shape, spec):
    d = int(np.prod(shape))
    signs = np.where(rng.random(k * d) < 0.5, -1.0, 1.0).reshape((k,) + shape)
    if spec.norm == "linf":
        return spec.epsilon * signs
    return spec.epsilon * signs / math.sqrt(d)


def _direction(g, spec):
    """Steepest-ascent unit step for the norm: sign for Linf, normalised for L2."""
    if spec.norm == "linf":
        return np.sign(g)
    flat = g.reshape(len(g), -1)
    n = np.sqrt((flat**2).sum(axis=1))
    return (flat / np.where(n > 0, n, 1.0)[:, None]).reshape(g.shape)


def sample_attack(
    m,
    x,
    spec: PerturbationSpec,
    n: int,
    seed: int = 0,
    cert: Optional[CertResult] = None,
    tol: float = 1e-9,
) -> AttackResult:
    """Search the perturbation set for outputs outside the certified interval.

    The budget of ``n`` draws is spent as: the two gradient-sign corners of
    the count, ascent runs (20 projected steps of eps/10, half maximising and
    half minimising the count, every iterate recorded), random sign corners,
    and uniform draws from the set.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = as_tensor(x)
    cert = cert if cert is not None else certify(m, x, spec)
    lo, up = cert.output_interval.lower, cert.output_interval.upper
    shape = x.shape

    if spec.epsilon == 0:
        # The set is the single point x.
        y, _ = m.forward(x[None])
        viol = int(np.any((y[0] < lo - tol) | (y[0] > up + tol)))
        return AttackResult(n, y[0].copy(), y[0].copy(), 0.0, x.copy(), viol * n)

    rng = CounterRNG.from_seed(seed)
    base_y, g0 = _count_grad(m, x[None])
    base_count = reduce_sum(base_y[0])

    pmin = np.full(lo.shape, np.inf)
    pmax = np.full(lo.shape, -np.inf)
    state = {"viol": 0, "worst": -1.0, "worst_x": x.copy(), "seen": 0}

    def record(pts, ys):
        pmin[...] = np.minimum(pmin, ys.min(axis=0))
        pmax[...] = np.maximum(pmax, ys.max(axis=0))
        bad = np.any(((ys < lo - tol) | (ys > up + tol)).reshape(len(ys), -1), axis=1)
        state["viol"] += int(bad.sum())
        dev = np.abs(np.array([reduce_sum(y) for y in ys]) - base_count)
        i = int(np.argmax(dev))
        if dev[i] > state["worst"]:
            state["worst"], state["worst_x"] = float(dev[i]), pts[i].copy()
        state["seen"] += len(ys)

    def evaluate(deltas):
        for s in range(0, len(deltas), CHUNK):
            pts = _points(x, deltas[s : s + CHUNK], spec)
            ys, _ = m.forward(pts)
            record(pts, ys)

    budget = n
    # gradient-sign corners of the count
    ones = (1,) * len(shape)
    d_sign = _project(spec.epsilon * _direction(g0, spec) * np.array([1.0, -1.0]).reshape((2,) + ones), spec)
    take = min(budget, 2)
    evaluate(d_sign[:take])
    budget -= take

    # projected ascent from uniform starts; every iterate is recorded and
    # costs one draw of the budget
    per_run = ASCENT_STEPS + 1
    runs = min(budget // per_run, max(2, n // (4 * per_run)))
    runs -= runs % 2
    if runs:
        step = spec.epsilon / 10.0
        delta = _uniform(rng, runs, shape, spec)
        sign = np.where(np.arange(runs) % 2 == 0, 1.0, -1.0).reshape((runs,) + ones)
        for _ in range(ASCENT_STEPS):
            pts = _points(x, delta, spec)
            ys, g = _count_grad(m, pts)
            record(pts, ys)
            delta = _project(delta + step * sign * _direction(g, spec), spec)
        pts = _points(x, delta, spec)
        record(pts, m.forward(pts)[0])
        budget -= runs * per_run

    n_corner = budget // 2
    if n_corner:
        evaluate(_corners(rng, n_corner, shape, spec))
    if budget - n_corner:
        evaluate(_uniform(rng, budget - n_corner, shape, spec))

    return AttackResult(state["seen"], pmin, pmax, state["worst"], state["worst_x"], state["viol"])


def grid_oracle(m, box: IntervalTensor, resolution: int):
    """Elementwise min/max of outputs over a dense grid spanning ``box``."""
    lo, up = as_tensor(box.lower), as_tensor(box.upper)
    d = lo.size
    if d > GRID_MAX_DIMS:
        raise ValueError(f"grid oracle refuses {d} input dims (max {GRID_MAX_DIMS}): combinatorial blowup")
    if not 1 <= resolution <= GRID_MAX_POINTS:
        raise ValueError(f"resolution must be in [1, {GRID_MAX_POINTS}]")
    axes = [np.linspace(a, b, resolution) for a, b in zip(lo.ravel(), up.ravel())]
    pts = np.array(list(itertools.product(*axes))).reshape((-1,) + lo.shape)
    ys, _ = m.forward(pts)
    return ys.min(axis=0), ys.max(axis=0)


def finite_diff_grad(
    loss_closure: Callable[[], float],
    params,
    h: float = 1e-5,
    subset=None,
):
    """Central differences of ``loss_closure`` w.r.t. arrays in ``params``.

    ``params`` is one array or a list of arrays, perturbed in place and
    restored. With ``subset`` (a list of ``(param index, flat index)``) only
    those entries are estimated and a 1-D array is returned; otherwise a
    list of full-shape gradients (or one array) is returned.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    single = isinstance(params, np.ndarray)
    plist = [params] if single else list(params)

    def at(p, i, v):
        flat = p.reshape(-1)
        old = flat[i]
        flat[i] = v
        val = loss_closure()
        flat[i] = old
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite loss {val!r} during finite differences")
        return val

    def one(pi, i):
        p = plist[pi]
        x0 = p.reshape(-1)[i]
        return (at(p, i, x0 + h) - at(p, i, x0 - h)) / (2.0 * h)

    if subset is not None:
        return np.array([one(pi, i) for pi, i in subset])
    out = []
    for pi, p in enumerate(plist):
        g = np.zeros(p.shape)
        gf = g.reshape(-1)
        for i in range(p.size):
            gf[i] = one(pi, i)
        out.append(g)
    return out[0] if single else out


@dataclass
class GradCheck:
    max_rel_error: float
    n_checked: int
    n_refined: int  # coordinates re-evaluated at h/10 because h straddled a kink


def rel_error(a, b, floor: float = 1e-7):
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(model, images, gts, weights, n_check=None, seed=0, h=1e-5, tol=1e-4) -> GradCheck:
    """Compare total_loss gradients with central differences of the loss value.

    Central differences are only valid where the loss is smooth over
    [theta - h, theta + h]. ReLU and max-pool make it piecewise smooth, so a
    coordinate that fails at ``h`` is re-evaluated once at ``h / 10``; the
    number of such coordinates is reported rather than hidden.
    """
    from .loss import loss_value, total_loss

    _, grads = total_loss(model, images, gts, weights)
    params = {f"{n}.{r}": p for n, r, p in model.parameters()}
    keys = list(params)
    index = [(ki, i) for ki, k in enumerate(keys) for i in range(params[k].size)]
    if n_check is not None and n_check < len(index):
        pick = CounterRNG.from_seed(seed).permutation(len(index))[:n_check]
        index = [index[i] for i in sorted(pick)]
    plist = [params[k] for k in keys]

    def closure():
        return loss_value(model, images, gts, weights)

    ana = np.array([grads[keys[ki]].reshape(-1)[i] for ki, i in index])
    num = finite_diff_grad(closure, plist, h, index)
    err = rel_error(ana, num)
    bad = np.flatnonzero(err >= tol)
    if bad.size:
        redo = finite_diff_grad(closure, plist, h / 10.0, [index[i] for i in bad])
        err[bad] = rel_error(ana[bad], redo)
    return GradCheck(float(err.max()) if err.size else 0.0, len(index), int(bad.size))

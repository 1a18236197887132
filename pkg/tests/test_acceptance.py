"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The trend criteria (8-10) train several micro models on the desk-scale
synthetic task; those runs are shared across tests through session fixtures
and take most of the suite's wall time. Deselect them with ``-m "not slow"``.
"""

import statistics
import time

import numpy as np
import pytest

from btn.bounds import PerturbationSpec, certified_interval, lemma1_interval, norm_duality_bound
from btn.config import ModelConfig, RunConfig, SceneConfig, TrainConfig
from btn.datagen import generate
from btn.layers import Dense, ReLU
from btn.loss import LossWeights
from btn.metrics import evaluate
from btn.model import Sequential, build_mcnn_micro
from btn.oracle import gradient_check, sample_attack
from btn.trainer import new_state, train

LINF_GRID = (1 / 255, 3 / 255, 5 / 255)
L2_GRID = (0.5, 1.0, 2.0)
SEEDS = (0, 1, 2)

# desk-scale schedule: 10 warmup, 30 ramp, 40 final epochs
SCHEDULE = dict(total_epochs=80, warmup_epochs=10, ramp_epochs=30, optimizer="adam")
BTN = dict(SCHEDULE)
BASELINE = dict(SCHEDULE, kappa_end=1.0, lambda_l1=0.0)
NO_SMOOTH = dict(SCHEDULE, lambda_l1=0.0)
BTN_L2 = dict(SCHEDULE, norm_case="l2", epsilon_target=0.5)


# -- shared training runs -------------------------------------------------------


@pytest.fixture(scope="session")
def desk_data():
    scene = SceneConfig()
    return generate(scene, 200, stream=0), generate(scene, 50, stream=1)


class Runs:
    """Trains each (recipe, seed) once per session and remembers wall time."""

    def __init__(self, data):
        self.data = data
        self.models = {}
        self.seconds = {}

    def get(self, name, recipe, seed):
        key = (name, seed)
        if key not in self.models:
            cfg = RunConfig(model=ModelConfig(seed=7 + seed), train=TrainConfig(**recipe, seed=seed))
            t0 = time.perf_counter()
            state = train(new_state(cfg), *self.data)
            self.seconds[key] = time.perf_counter() - t0
            self.models[key] = state.model
        return self.models[key]


@pytest.fixture(scope="session")
def runs(desk_data):
    return Runs(desk_data)


def _ct(model, ds, norm, eps):
    return evaluate(model, ds, PerturbationSpec(norm, eps))


# -- 1. soundness ----------------------------------------------------------------


@pytest.mark.slow
def test_c01_soundness(runs, desk_data, criterion):
    _, test = desk_data
    models = {"btn": runs.get("btn", BTN, 0), "baseline": runs.get("baseline", BASELINE, 0)}
    t0 = time.perf_counter()
    total = checked = 0
    for m in models.values():
        # each epsilon is attacked on a different test image
        for i, eps in enumerate(LINF_GRID):
            res = sample_attack(m, test.samples[i].image, PerturbationSpec("linf", eps), 1000, seed=i, tol=1e-9)
            total += res.violations
            checked += res.n_samples
    secs = time.perf_counter() - t0
    ok = total == 0 and secs < 120
    criterion(1, ok, f"{total} violations in {checked} samples (2 models x 3 eps/image pairs), {secs:.0f}s (budget 120s)")
    assert ok


# -- 2. affine tightness ----------------------------------------------------------


def test_c02_affine_tightness(criterion):
    r = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n_in, n_out = (int(v) for v in r.integers(1, 13, size=2))
        W, b = r.normal(size=(n_out, n_in)), r.normal(size=n_out)
        x, eps = r.normal(size=n_in), float(r.uniform(0.01, 1.0))
        lo, up = certified_interval(Sequential([Dense(W, b)]), x, PerturbationSpec("linf", eps))
        corners = np.array(np.meshgrid(*[(-1.0, 1.0)] * n_in, indexing="ij")).reshape(n_in, -1)
        ys = W @ (x[:, None] + eps * corners) + b[:, None]
        worst = max(worst, np.abs(lo - ys.min(axis=1)).max(), np.abs(up - ys.max(axis=1)).max())
    ok = worst <= 1e-12
    criterion(2, ok, f"max |IBP - corner extrema| = {worst:.2e} over 100 layers (tol 1e-12)")
    assert ok


# -- 3. zero-epsilon collapse ---------------------------------------------------------


def test_c03_zero_eps_collapse(criterion):
    m = build_mcnn_micro(ModelConfig(seed=3))
    ds = generate(SceneConfig(seed=3), 6)
    width = 0.0
    gaps = []
    for norm in ("linf", "l2"):
        lo, up = certified_interval(m, ds.images, PerturbationSpec(norm, 0.0))
        width = max(width, float((up - lo).max()))
        rep = _ct(m, ds, norm, 0.0)
        y, _ = m.forward(ds.images)
        pix = np.abs(y - ds.densities).reshape(len(ds), -1).sum(axis=1)
        gaps += [
            abs(rep.ct_mae - rep.clean_mae),
            abs(rep.ct_mse - rep.clean_mse),
            abs(rep.cp_mae - pix.mean()),
            abs(rep.cp_mse - np.sqrt((np.abs(y - ds.densities) ** 2).reshape(len(ds), -1).sum(axis=1).mean())),
        ]
    ok = width <= 1e-12 and max(gaps) <= 1e-9
    criterion(3, ok, f"width {width:.1e} (tol 1e-12), metric gap {max(gaps):.1e} (tol 1e-9)")
    assert ok


# -- 4. monotone nesting ------------------------------------------------------------------


def test_c04_monotone_nesting(criterion):
    m = build_mcnn_micro(ModelConfig(seed=4))
    ds = generate(SceneConfig(seed=4), 6)
    ivs = [certified_interval(m, ds.images, PerturbationSpec("linf", e)) for e in LINF_GRID]
    nested = all(
        np.all(a_lo >= b_lo) and np.all(a_up <= b_up) for (a_lo, a_up), (b_lo, b_up) in zip(ivs, ivs[1:])
    )
    reps = [_ct(m, ds, "linf", e) for e in LINF_GRID]
    keys = ("ct_mae", "ct_mse", "cp_mae", "cp_mse")
    rising = all(getattr(a, k) <= getattr(b, k) for a, b in zip(reps, reps[1:]) for k in keys)
    ok = nested and rising
    cts = ", ".join(f"{r.ct_mae:.3f}" for r in reps)
    criterion(4, ok, f"nested={nested}, metrics non-decreasing={rising} (ct MAE {cts})")
    assert ok


# -- 5. norm-duality dominance ----------------------------------------------------------------


def _random_net(r):
    depth = int(r.integers(1, 5))
    dims = [int(r.integers(1, 11)) for _ in range(depth + 1)]
    layers = []
    for i in range(depth):
        layers.append(Dense(r.normal(size=(dims[i + 1], dims[i])), r.normal(size=dims[i + 1])))
        if i < depth - 1:
            layers.append(ReLU())
    return Sequential(layers), dims[0]


def test_c05_theorem1_dominance(criterion):
    r = np.random.default_rng(5)
    width_ratio = dev_ratio = 0.0
    for _ in range(100):
        m, d = _random_net(r)
        x, eps = r.normal(size=d), float(r.uniform(0.01, 0.5))
        bound = norm_duality_bound(m, eps)
        lo, up = certified_interval(m, x, PerturbationSpec("linf", eps))
        width_ratio = max(width_ratio, float((up - lo).max()) / (2 * bound))
        y, _ = m.forward(x[None])
        ys, _ = m.forward(x + r.uniform(-eps, eps, size=(10_000, d)))
        dev_ratio = max(dev_ratio, float(np.abs(ys - y).max()) / bound)
    ok = width_ratio <= 1 + 1e-12 and dev_ratio <= 1.0
    criterion(5, ok, f"max width/(2 bound) = {width_ratio:.3f}, max sampled deviation/bound = {dev_ratio:.3f}")
    assert ok


# -- 6. L2 first-layer tightness -------------------------------------------------------------------


def test_c06_lemma1_tightness(criterion):
    r = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        n_in, n_out = (int(v) for v in r.integers(1, 13, size=2))
        W, b = r.normal(size=(n_out, n_in)), r.normal(size=n_out)
        layer = Dense(W, b)
        x, eps = r.normal(size=n_in), float(r.uniform(0.05, 2.0))
        iv = lemma1_interval(layer, x, eps)
        norms = np.linalg.norm(W, axis=1)
        for j in range(n_out):
            delta = eps * W[j] / norms[j]
            hi, lo = W[j] @ (x + delta) + b[j], W[j] @ (x - delta) + b[j]
            worst = max(worst, abs(hi - iv.upper[j]) / abs(iv.upper[j]), abs(lo - iv.lower[j]) / abs(iv.lower[j]))
            # the attained deviation is the bound itself
            worst = max(worst, abs((hi - (W[j] @ x + b[j])) - eps * norms[j]) / (eps * norms[j]))
    ok = worst <= 1e-6
    criterion(6, ok, f"max rel error at delta* = {worst:.1e} over 100 layers (tol 1e-6)")
    assert ok


# -- 7. gradient oracle --------------------------------------------------------------------------------


def test_c07_gradient_oracle(criterion):
    m = build_mcnn_micro(ModelConfig(seed=11))
    ds = generate(SceneConfig(seed=11), 2)
    t0 = time.perf_counter()
    details, ok = [], True
    for norm, eps in (("linf", 2 / 255), ("l2", 0.3)):
        w = LossWeights(kappa=0.5, lambda_l1=1e-3, beta_l2=10.0, norm_case=norm, epsilon=eps)
        gc = gradient_check(m, ds.images, ds.densities, w, n_check=200, seed=7)
        ok &= gc.max_rel_error < 1e-4
        details.append(f"{norm}: {gc.max_rel_error:.1e} ({gc.n_refined} refined at h/10)")
    secs = time.perf_counter() - t0
    ok &= secs < 60
    criterion(7, ok, f"{'; '.join(details)}; 200 of {sum(p.size for _, _, p in m.parameters())} params, {secs:.0f}s")
    assert ok


# -- 8-10. trend reproduction ---------------------------------------------------------------------------


def _per_seed(reports):
    return " ".join(f"{r.clean_mae:.2f}/{r.ct_mae:.2f}" for r in reports)


@pytest.mark.slow
def test_c08_certified_vs_clean_training(runs, desk_data, criterion):
    _, test = desk_data
    t0 = time.perf_counter()
    btn = [_ct(runs.get("btn", BTN, s), test, "linf", LINF_GRID[0]) for s in SEEDS]
    base = [_ct(runs.get("baseline", BASELINE, s), test, "linf", LINF_GRID[0]) for s in SEEDS]
    secs = sum(v for (name, _), v in runs.seconds.items() if name in ("btn", "baseline"))
    secs += time.perf_counter() - t0
    ct_b, ct_0 = statistics.median(r.ct_mae for r in btn), statistics.median(r.ct_mae for r in base)
    mae_b, mae_0 = statistics.median(r.clean_mae for r in btn), statistics.median(r.clean_mae for r in base)
    tighten, inflate = ct_0 / ct_b, mae_b / mae_0 - 1.0
    ok = tighten >= 3.0 and inflate <= 0.5
    criterion(
        8,
        ok,
        f"ct MAE@1/255 {ct_0:.3f} -> {ct_b:.3f} ({tighten:.2f}x, need 3x); "
        f"clean MAE {mae_0:.3f} -> {mae_b:.3f} ({inflate:+.0%}, limit +50%); 6 runs {secs:.0f}s; "
        f"per seed clean/ct baseline {_per_seed(base)}, certified {_per_seed(btn)}",
    )
    assert ok


@pytest.mark.slow
def test_c09_smooth_regularization_ablation(runs, desk_data, criterion):
    _, test = desk_data
    eps = LINF_GRID[1]
    with_reg = statistics.median(_ct(runs.get("btn", BTN, s), test, "linf", eps).ct_mae for s in SEEDS)
    without = statistics.median(_ct(runs.get("no_smooth", NO_SMOOTH, s), test, "linf", eps).ct_mae for s in SEEDS)
    ok = without >= with_reg
    criterion(9, ok, f"ct MAE@3/255 median: lambda=0 {without:.3f} vs lambda=1e-3 {with_reg:.3f}")
    assert ok


@pytest.mark.slow
def test_c10_l2_trend(runs, desk_data, criterion):
    _, test = desk_data
    cert = [_ct(runs.get("btn_l2", BTN_L2, 0), test, "l2", e).ct_mae for e in L2_GRID]
    base = _ct(runs.get("baseline", BASELINE, 0), test, "l2", L2_GRID[0]).ct_mae
    finite = all(np.isfinite(cert))
    grows = all(a < b for a, b in zip(cert, cert[1:]))
    ratio = base / cert[0]
    ok = finite and grows and ratio >= 10.0
    grid = ", ".join(f"{e}: {c:.3f}" for e, c in zip(L2_GRID, cert))
    criterion(10, ok, f"certified ct MAE ({grid}); baseline@0.5 {base:.3f} ({ratio:.1f}x, need 10x)")
    assert ok


# -- 11. determinism ---------------------------------------------------------------------------------------


def test_c11_determinism(criterion, tmp_path):
    import json

    from btn import cli

    cfg = {
        "model": {"input_shape": [1, 32, 32]},
        "train": {"total_epochs": 3, "warmup_epochs": 1, "ramp_epochs": 1, "seed": 21},
        "data": {"scene": {"canvas": [32, 32], "count_range": [2, 8], "seed": 21}, "n_train": 8, "n_test": 4},
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert cli.main(["generate-data", "--config", str(tmp_path / "cfg.json"), "--out", str(d / "data")]) == 0
        assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(d / "data"), "--out", str(d / "run")]) == 0
        args = ["certify", "--ckpt", str(d / "run" / "final.btnc"), "--data", str(d / "data")]
        assert cli.main(args + ["--eps", "1/255,3/255,5/255", "--out", str(d / "report.json")]) == 0
        outputs.append(((d / "run" / "epochs.csv").read_bytes(), (d / "report.json").read_bytes()))
    (csv_a, rep_a), (csv_b, rep_b) = outputs
    ok = csv_a == csv_b and rep_a == rep_b
    criterion(11, ok, f"epoch CSV identical={csv_a == csv_b}, report JSON identical={rep_a == rep_b}")
    assert ok

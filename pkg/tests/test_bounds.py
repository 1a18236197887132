import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btn.bounds import (
    PerturbationSpec,
    certify_l2,
    certify_linf,
    input_box,
    norm_duality_bound,
)
from btn.layers import Conv2d, Dense, MaxPool2d, ReLU
from btn.model import Sequential, UnsupportedArchitectureError, predicted_count
from btn.oracle import sample_attack

from reference import mlp_forward


def random_mlp(r, depth=None, max_dim=8):
    depth = depth or int(r.integers(1, 4))
    dims = [int(r.integers(1, max_dim + 1)) for _ in range(depth + 1)]
    layers, ref = [], []
    for i in range(depth):
        W = r.normal(size=(dims[i + 1], dims[i]))
        b = r.normal(size=dims[i + 1])
        layers.append(Dense(W, b))
        ref.append(("dense", W, b))
        if i < depth - 1:
            layers.append(ReLU())
            ref.append(("relu",))
    return Sequential(layers), ref, dims[0]


class TestInputBox:
    def test_basic(self):
        iv = input_box(np.array([0.5]), PerturbationSpec("linf", 0.1))
        assert iv.lower[0] == pytest.approx(0.4) and iv.upper[0] == pytest.approx(0.6)

    def test_zero_eps(self):
        x = np.array([0.3, 0.7])
        iv = input_box(x, PerturbationSpec("linf", 0.0))
        assert np.array_equal(iv.lower, x) and np.array_equal(iv.upper, x)

    def test_clamp(self):
        iv = input_box(np.array([0.01]), PerturbationSpec("linf", 0.1, clamp_to_unit=True))
        assert iv.lower[0] == 0.0 and iv.upper[0] == pytest.approx(0.11)

    def test_l2_spec_redirected(self):
        with pytest.raises(ValueError, match="certify_l2"):
            input_box(np.zeros(2), PerturbationSpec("l2", 0.1))

    def test_negative_eps_rejected(self):
        with pytest.raises(ValueError):
            PerturbationSpec("linf", -0.1)


class TestCertifyLinf:
    def test_zero_eps_collapses_to_clean(self, micro, rng):
        x = rng.uniform(size=(1, 64, 64))
        res = certify_linf(micro, x, PerturbationSpec("linf", 0.0))
        clean = predicted_count(micro.forward(x)[0])
        assert abs(res.count_lower - clean) <= 1e-9 and abs(res.count_upper - clean) <= 1e-9
        assert (res.output_interval.upper - res.output_interval.lower).max() <= 1e-12

    def test_count_fields(self, micro, rng):
        res = certify_linf(micro, rng.uniform(size=(1, 64, 64)), PerturbationSpec("linf", 2 / 255))
        assert res.count_lower == pytest.approx(res.output_interval.lower.sum(), abs=1e-9)
        assert res.count_upper == pytest.approx(res.output_interval.upper.sum(), abs=1e-9)
        assert res.count_lower <= res.count_upper
        assert res.theorem1_bound is not None and res.lemma1_first_layer is None

    def test_contains_sampled_outputs(self, micro, rng):
        x = rng.uniform(size=(1, 64, 64))
        spec = PerturbationSpec("linf", 1 / 255)
        res = certify_linf(micro, x, spec)
        att = sample_attack(micro, x, spec, n=1000, seed=3, cert=res)
        assert att.violations == 0

    def test_clamped_box_is_tighter(self, micro, rng):
        x = rng.uniform(size=(1, 64, 64))
        x[0, :8] = 0.0
        free = certify_linf(micro, x, PerturbationSpec("linf", 3 / 255))
        clamped = certify_linf(micro, x, PerturbationSpec("linf", 3 / 255, clamp_to_unit=True))
        assert np.all(clamped.output_interval.lower >= free.output_interval.lower - 1e-12)
        assert np.all(clamped.output_interval.upper <= free.output_interval.upper + 1e-12)


class TestCertifyL2:
    def test_zero_eps_collapses(self, micro, rng):
        x = rng.uniform(size=(1, 64, 64))
        res = certify_l2(micro, x, PerturbationSpec("l2", 0.0))
        y, _ = micro.forward(x)
        assert np.abs(res.output_interval.lower - y).max() <= 1e-12
        assert np.abs(res.output_interval.upper - y).max() <= 1e-12

    def test_single_dense_layer(self):
        m = Sequential([Dense(np.array([[3.0, 4.0]]), np.array([0.0]))])
        res = certify_l2(m, np.array([1.0, 1.0]), PerturbationSpec("l2", 0.5))
        assert res.output_interval.lower.tolist() == [4.5]
        assert res.output_interval.upper.tolist() == [9.5]
        assert res.lemma1_first_layer.lower.tolist() == [4.5]

    def test_non_affine_first_layer(self):
        m = Sequential([ReLU(), Dense(np.eye(2))])
        with pytest.raises(UnsupportedArchitectureError):
            certify_l2(m, np.ones(2), PerturbationSpec("l2", 0.1))

    def test_lemma1_interval_shape_multicolumn(self, micro, rng):
        res = certify_l2(micro, rng.uniform(size=(1, 64, 64)), PerturbationSpec("l2", 0.5))
        n_first = sum(col.layers[0].kernel.shape[0] for col in micro.columns)
        assert res.lemma1_first_layer.lower.shape == (n_first, 64, 64)

    def test_l2_sampled_soundness(self, micro, rng):
        x = rng.uniform(size=(1, 64, 64))
        spec = PerturbationSpec("l2", 0.5)
        att = sample_attack(micro, x, spec, n=300, seed=1)
        assert att.violations == 0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 6), st.floats(0.01, 2.0), st.integers(0, 2**32 - 1))
    def test_lemma1_tightness(self, n_in, n_out, eps, seed):
        r = np.random.default_rng(seed)
        W, b, x = r.normal(size=(n_out, n_in)), r.normal(size=n_out), r.normal(size=n_in)
        layer = Dense(W, b)
        res = certify_l2(Sequential([layer]), x, PerturbationSpec("l2", eps))
        z = W @ x + b
        for j in range(n_out):
            delta = eps * W[j] / np.linalg.norm(W[j])
            attained = W[j] @ (x + delta) + b[j] - z[j]
            bound = res.output_interval.upper[j] - z[j]
            assert attained == pytest.approx(bound, rel=1e-6)


class TestNormDuality:
    def test_single_layer(self):
        m = Sequential([Dense(np.array([[1.0, 2.0], [3.0, -4.0]]))])
        assert norm_duality_bound(m, 0.5) == 3.5

    def test_zero_eps(self, micro):
        assert norm_duality_bound(micro, 0.0) == 0.0

    def test_maxpool_factor_one(self):
        conv = Conv2d(np.full((1, 1, 3, 3), 0.5), padding=1)
        with_pool = Sequential([conv, ReLU(), MaxPool2d(2, 2)])
        assert norm_duality_bound(with_pool, 0.1) == pytest.approx(0.1 * 4.5)

    def test_multicolumn_dominates_sampled_deviation(self, micro, rng):
        x = rng.uniform(size=(1, 64, 64))
        eps = 1 / 255
        bound = norm_duality_bound(micro, eps)
        y, _ = micro.forward(x)
        xs = x + rng.uniform(-eps, eps, size=(200, 1, 64, 64))
        ys, _ = micro.forward(xs)
        assert np.abs(ys - y).max() <= bound
        res = certify_linf(micro, x, PerturbationSpec("linf", eps))
        w = res.output_interval.upper - res.output_interval.lower
        assert w.max() <= 2 * bound + 1e-12

    def test_dominance_random_chains(self):
        for seed in range(100):
            r = np.random.default_rng(seed)
            m, _, d = random_mlp(r)
            x = r.normal(size=d)
            eps = float(r.uniform(0.01, 0.5))
            res = certify_linf(m, x, PerturbationSpec("linf", eps))
            w = res.output_interval.upper - res.output_interval.lower
            assert np.all(w <= 2 * norm_duality_bound(m, eps) * (1 + 1e-12))

    def test_sampled_deviation_three_layer_chain(self):
        r = np.random.default_rng(5)
        m, ref, d = random_mlp(r, depth=3)
        x = r.normal(size=d)
        eps = 0.2
        y = mlp_forward(ref, x)
        worst = max(np.abs(mlp_forward(ref, x + r.uniform(-eps, eps, size=d)) - y).max() for _ in range(10_000))
        assert worst <= norm_duality_bound(m, eps)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headsplat import LossWeights, few_to_many_split, l1_loss, psnr, ssim, total_loss

from conftest import relative_error


class TestL1:
    def test_identity(self):
        a = np.random.default_rng(0).random((8, 8, 3))
        v, g = l1_loss(a, a)
        assert v == 0.0
        assert np.all(g == 0)

    def test_constant_offset(self):
        b = np.random.default_rng(1).random((8, 8, 3))
        v, _ = l1_loss(b + 0.5, b)
        assert np.isclose(v, 0.5)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        a = rng.random((8, 8))
        b = rng.random((8, 8))
        _, g = l1_loss(a, b)
        h = 1e-7
        fd = np.zeros_like(a)
        for i in range(8):
            for j in range(8):
                ap = a.copy()
                ap[i, j] += h
                am = a.copy()
                am[i, j] -= h
                fd[i, j] = (l1_loss(ap, b)[0] - l1_loss(am, b)[0]) / (2 * h)
        assert relative_error(g, fd, floor=1e-8) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsim:
    def test_identity_is_one(self):
        a = np.random.default_rng(3).random((16, 16, 3))
        v, g = ssim(a, a)
        assert v == pytest.approx(1.0, abs=1e-12)

    def test_inverted_checkerboard_negative(self):
        x = (np.indices((32, 32)).sum(axis=0) % 2).astype(float)
        a = np.dstack([x] * 3)
        v, _ = ssim(a, 1.0 - a)
        assert v < 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        a = rng.random((14, 14))
        b = rng.random((14, 14))
        _, g = ssim(a, b)
        h = 1e-4
        fd = np.zeros_like(a)
        for i in range(14):
            for j in range(14):
                ap = a.copy()
                ap[i, j] += h
                am = a.copy()
                am[i, j] -= h
                fd[i, j] = (ssim(ap, b)[0] - ssim(am, b)[0]) / (2 * h)
        assert relative_error(g, fd, floor=1e-6) < 1e-3

    def test_small_image_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)), window=11)


class TestPsnr:
    def test_closed_form(self):
        a = np.zeros((8, 8))
        b = np.full((8, 8), 0.1)  # MSE = 0.01
        assert psnr(a, b) == pytest.approx(20.0)

    def test_equal_images_inf(self):
        a = np.random.default_rng(5).random((8, 8))
        assert psnr(a, a) == math.inf

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
        expected = 10 * math.log10(1.0 / np.mean((a - b) ** 2))
        assert psnr(a, b) == pytest.approx(expected, rel=0, abs=0)


class TestTotalLoss:
    def test_identical_pairs_zero(self):
        a = np.random.default_rng(7).random((16, 16, 3))
        v, grads = total_loss([(a, a.copy()), (a, a.copy())])
        assert v == pytest.approx(0.0, abs=1e-12)
        assert all(np.allclose(g, 0) for g in grads)

    def test_weight_isolation_reduces_to_l1(self):
        rng = np.random.default_rng(8)
        target, rendered = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        v, grads = total_loss([(target, rendered)], LossWeights(l1=1.0, ssim=0.0))
        lv, lg = l1_loss(rendered, target)
        assert v == pytest.approx(lv, abs=1e-15)
        assert np.allclose(grads[0], lg)

    def test_paper_weight_recombination(self):
        rng = np.random.default_rng(9)
        target, rendered = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        v, _ = total_loss([(target, rendered)], LossWeights(l1=0.8, ssim=0.1))
        expected = 0.8 * l1_loss(rendered, target)[0] + 0.1 * (1.0 - ssim(rendered, target)[0])
        assert abs(v - expected) < 1e-9

    def test_linear_in_weights(self):
        rng = np.random.default_rng(10)
        target, rendered = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        v1, _ = total_loss([(target, rendered)], LossWeights(l1=0.4, ssim=0.05))
        v2, _ = total_loss([(target, rendered)], LossWeights(l1=0.8, ssim=0.1))
        assert v2 == pytest.approx(2.0 * v1, rel=1e-12)

    def test_pluggable_slots(self):
        rng = np.random.default_rng(11)
        target, rendered = rng.random((16, 16, 3)), rng.random((16, 16, 3))

        def fake_perceptual(t, r):
            return 2.0, np.ones_like(r)

        v0, _ = total_loss([(target, rendered)], LossWeights(l1=0.0, ssim=0.0, perceptual=0.5))
        assert v0 == 0.0  # no callback, slot contributes nothing
        v1, g1 = total_loss(
            [(target, rendered)],
            LossWeights(l1=0.0, ssim=0.0, perceptual=0.5),
            perceptual_fn=fake_perceptual,
        )
        assert v1 == pytest.approx(1.0)
        assert np.allclose(g1[0], 0.5)

    def test_empty_pairs_rejected(self):
        with pytest.raises(ValueError):
            total_loss([])

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(l1=-0.1)


class TestFewToManySplit:
    def test_sizes_and_disjointness(self):
        cond, recon = few_to_many_split(10, 1, 8, seed=0)
        assert len(cond) == 1 and len(recon) == 8
        assert set(cond).isdisjoint(recon)

    def test_forced_partition(self):
        cond, recon = few_to_many_split(2, 1, 1, seed=3)
        assert sorted([*cond, *recon]) == [0, 1]

    def test_deterministic(self):
        assert np.array_equal(few_to_many_split(20, 4, 8, 7)[0], few_to_many_split(20, 4, 8, 7)[0])

    def test_uniform_conditioning_frequency(self):
        n, S, R = 12, 4, 8
        counts = np.zeros(n)
        trials = 1000
        for seed in range(trials):
            cond, _ = few_to_many_split(n, S, R, seed)
            counts[cond] += 1
        freq = counts / trials
        assert np.max(np.abs(freq - S / n)) < 0.05

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            few_to_many_split(10, 4, 3, 0)  # R < S
        with pytest.raises(ValueError):
            few_to_many_split(10, 4, 8, 0)  # S + R > n
        with pytest.raises(ValueError):
            few_to_many_split(10, 0, 5, 0)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(2, 200), st.data())
    def test_property_disjoint_and_complete(self, n, data):
        S = data.draw(st.integers(1, n // 2))
        R = data.draw(st.integers(S, n - S))
        seed = data.draw(st.integers(0, 2**31 - 1))
        cond, recon = few_to_many_split(n, S, R, seed)
        assert len(cond) == S and len(recon) == R
        assert set(cond).isdisjoint(recon)
        assert set(cond) | set(recon) <= set(range(n))

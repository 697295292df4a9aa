import numpy as np
import pytest

from taskdiff import linop
from taskdiff.oracle import dense_build


def grid(r, c):
    return linop.GridShape(r, c)


class TestGridShape:
    def test_n(self):
        assert grid(3, 5).n == 15

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            grid(0, 4)


class TestMaskOperator:
    def test_diagonal_projection(self):
        op = linop.mask_operator(grid(2, 2), [[1, 0], [0, 1]])
        out = op.apply(np.array([1.0, 2.0, 3.0, 4.0]))
        np.testing.assert_array_equal(out, [1.0, 0.0, 0.0, 4.0])

    def test_full_mask_is_identity(self):
        op = linop.mask_operator(grid(3, 3), np.ones((3, 3)))
        x = np.arange(9.0)
        np.testing.assert_array_equal(op.apply(x), x)

    def test_adjoint_probes(self):
        rng = np.random.default_rng(0)
        mask = rng.random((16, 16)) > 0.4
        op = linop.mask_operator(grid(16, 16), mask)
        worst = 0.0
        for _ in range(100):
            u = rng.standard_normal(256)
            w = rng.standard_normal(256)
            worst = max(worst, abs(np.dot(op.apply(u), w) - np.dot(u, op.adjoint_apply(w))))
        assert worst < 1e-12

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        mask = rng.random((8, 8)) > 0.5
        op = linop.mask_operator(grid(8, 8), mask)
        twice = linop.compose(op, op)
        x = rng.standard_normal(64)
        np.testing.assert_allclose(twice.apply(x), op.apply(x), atol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            linop.mask_operator(grid(4, 4), np.ones((3, 4)))


class TestBlurOperator:
    def test_identity_kernel(self):
        op = linop.blur_operator(grid(5, 7), [[1.0]])
        x = np.random.default_rng(2).standard_normal(35)
        np.testing.assert_allclose(op.apply(x), x, atol=1e-15)

    def test_constant_preserved_by_normalized_kernel(self):
        kern = linop.gaussian_kernel(5, 1.3)
        op = linop.blur_operator(grid(12, 9), kern)
        x = np.full(108, 3.25)
        np.testing.assert_allclose(op.apply(x), x, rtol=1e-13)

    def test_adjoint_matches_dense_transpose(self):
        rng = np.random.default_rng(3)
        kern = rng.standard_normal((3, 5))
        op = linop.blur_operator(grid(8, 8), kern)
        dense = dense_build(op)
        w = rng.standard_normal(64)
        np.testing.assert_allclose(op.adjoint_apply(w), dense.T @ w, atol=1e-12)

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            linop.blur_operator(grid(4, 4), np.ones((2, 3)))


class TestRadonOperator:
    def test_single_pixel_ray(self):
        # One angle at 0 degrees through the center of a one-pixel image: the
        # quadrature recovers (value) x (chord length 2) up to its own O(h)
        # boundary error, two cells' worth at most.
        op = linop.radon_operator(grid(1, 1), 1, 1, 180.0)
        val = op.apply(np.array([2.5]))
        assert val.shape == (1,)
        assert abs(val[0] - 2.5 * 2.0) < 2.5 * 2.0 * op._h

    def test_rotation_permutes_sinogram(self):
        rng = np.random.default_rng(4)
        n_angles = 8
        op = linop.radon_operator(grid(8, 8), n_angles, 11, 180.0)
        img = rng.standard_normal((8, 8))
        sino = op.apply(img.ravel()).reshape(n_angles, 11)
        # A quarter turn of the image shifts the angle index by 90 degrees
        # (n_angles/2 rows over a 180-degree span), with a detector flip at
        # the wraparound where the ray direction negates.
        rot = np.rot90(img, k=1)
        sino_rot = op.apply(rot.ravel()).reshape(n_angles, 11)
        shift = n_angles // 2
        for ia in range(n_angles):
            ja = ia + shift
            if ja < n_angles:
                expected = sino[ja]
            else:
                expected = sino[ja - n_angles][::-1]
            np.testing.assert_allclose(sino_rot[ia], expected, atol=1e-10)

    def test_adjoint_probes(self):
        op = linop.radon_operator(grid(12, 12), 6, 16, 90.0)
        report = linop.validate_adjoint(op, trials=100, tol=1e-10)
        assert report.passed, report

    def test_rejects_bad_span(self):
        with pytest.raises(ValueError):
            linop.radon_operator(grid(4, 4), 4, 4, 200.0)


class TestCompose:
    def test_identity_compose(self):
        rng = np.random.default_rng(5)
        op = linop.blur_operator(grid(6, 6), linop.gaussian_kernel(3, 1.0))
        both = linop.compose(linop.identity(36), op)
        x = rng.standard_normal(36)
        np.testing.assert_allclose(both.apply(x), op.apply(x), atol=0)

    def test_scale_adjoint(self):
        rng = np.random.default_rng(6)
        op = linop.mask_operator(grid(4, 4), rng.random((4, 4)) > 0.5)
        doubled = linop.scale(2.0, op)
        w = rng.standard_normal(16)
        np.testing.assert_allclose(doubled.adjoint_apply(w), 2.0 * op.adjoint_apply(w), atol=0)

    def test_normal_operator_is_spd(self):
        rng = np.random.default_rng(7)
        op = linop.radon_operator(grid(6, 6), 4, 8, 120.0)
        gram = linop.compose(_AdjointView(op), op)
        dense = dense_build(gram)
        np.testing.assert_allclose(dense, dense.T, atol=1e-12)
        u = rng.standard_normal(36)
        assert np.dot(u, gram.apply(u)) >= -1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            linop.compose(linop.identity(4), linop.identity(5))


class _AdjointView(linop.LinearMap):
    def __init__(self, op):
        super().__init__(op.codomain_dim, op.domain_dim)
        self.op = op

    def _apply(self, x):
        return self.op.adjoint_apply(x)

    def _adjoint(self, w):
        return self.op.apply(w)


class TestValidateAdjoint:
    def test_mask_passes_tightly(self):
        op = linop.mask_operator(grid(8, 8), np.random.default_rng(8).random((8, 8)) > 0.3)
        report = linop.validate_adjoint(op, trials=100, tol=1e-14)
        assert report.passed

    def test_blur_passes(self):
        op = linop.blur_operator(grid(32, 32), linop.gaussian_kernel(5, 1.5))
        report = linop.validate_adjoint(op, trials=50, tol=1e-12)
        assert report.passed

    def test_wrong_adjoint_fails(self):
        kern = np.array([[0.0, 0.2, 0.0], [0.1, 0.5, 0.05], [0.0, 0.15, 0.0]])
        broken = linop.WrongAdjointMap(linop.blur_operator(grid(8, 8), kern))
        report = linop.validate_adjoint(broken, trials=20, tol=1e-10)
        assert not report.passed
        assert report.max_defect > 1e-3


class TestDenseAgreement:
    @pytest.mark.parametrize("make", [
        lambda: linop.mask_operator(grid(8, 8), np.random.default_rng(9).random((8, 8)) > 0.5),
        lambda: linop.blur_operator(grid(8, 8), linop.gaussian_kernel(3, 0.8)),
        lambda: linop.radon_operator(grid(8, 8), 4, 8, 180.0),
    ])
    def test_dense_materialization_matches_apply(self, make):
        op = make()
        dense = dense_build(op)
        rng = np.random.default_rng(10)
        for _ in range(5):
            x = rng.standard_normal(op.domain_dim)
            np.testing.assert_allclose(op.apply(x), dense @ x, atol=1e-12)

    def test_batched_apply_matches_loop(self):
        op = linop.blur_operator(grid(8, 8), linop.gaussian_kernel(3, 0.8))
        rng = np.random.default_rng(11)
        X = rng.standard_normal((4, 64))
        batch = op.apply(X)
        rows = np.stack([op.apply(x) for x in X])
        np.testing.assert_array_equal(batch, rows)


class TestCountingWrapper:
    def test_counts_batch_rows(self):
        op = linop.CountingLinearMap(linop.identity(3))
        op.apply(np.ones(3))
        op.apply(np.ones((5, 3)))
        op.adjoint_apply(np.ones(3))
        assert op.counter.forward_calls == 6
        assert op.counter.adjoint_calls == 1

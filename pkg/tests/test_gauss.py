import numpy as np
import pytest

from taskdiff import gauss
from taskdiff.oracle import dense_build


class TestRngStream:
    def test_repeatable(self):
        a = gauss.RngStream(42, 7).generator().standard_normal(16)
        b = gauss.RngStream(42, 7).generator().standard_normal(16)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = gauss.RngStream(42, 7).generator().standard_normal(16)
        b = gauss.RngStream(42, 8).generator().standard_normal(16)
        assert np.abs(a - b).max() > 1e-3

    def test_stream_independence_correlation(self):
        # Cross-stream correlation of long draws should sit at the MC floor.
        n = 20000
        a = gauss.RngStream(1, 0).generator().standard_normal(n)
        b = gauss.RngStream(1, 1).generator().standard_normal(n)
        corr = np.dot(a, b) / n
        assert abs(corr) < 4.0 / np.sqrt(n)


def _cov_checks(cov, rng, tol=1e-10):
    v = rng.standard_normal(cov.dim)
    w = rng.standard_normal(cov.dim)
    # self-adjoint
    assert abs(np.dot(cov.apply(v), w) - np.dot(v, cov.apply(w))) < tol * (
        np.linalg.norm(cov.apply(v)) * np.linalg.norm(w) + 1
    )
    # positive definite
    assert np.dot(v, cov.apply(v)) > 0
    # solve inverts apply
    np.testing.assert_allclose(cov.apply(cov.solve(v)), v, atol=1e-9 * np.linalg.norm(v))
    # factor consistency: sqrt . sqrt = apply for the symmetric factors here
    np.testing.assert_allclose(cov.sqrt_apply(cov.sqrt_apply(v)), cov.apply(v),
                               atol=1e-9 * np.linalg.norm(cov.apply(v)) + 1e-12)


class TestSpectralCovariance:
    def test_flat_spectrum_is_scaled_identity(self):
        cov = gauss.spectral_covariance((4, 4), np.full((4, 4), 2.5))
        x = np.random.default_rng(0).standard_normal(16)
        np.testing.assert_allclose(cov.apply(x), 2.5 * x, atol=1e-12)
        assert cov.scalar_variance == pytest.approx(2.5)

    def test_trace_is_spectrum_sum(self):
        rng = np.random.default_rng(1)
        base = rng.random((6, 6)) + 0.5
        spec = 0.5 * (base + base[::-1][:, ::-1])  # conjugate-symmetric layout
        cov = gauss.spectral_covariance((6, 6), spec)
        dense = dense_build(cov)
        assert cov.trace == pytest.approx(spec.sum(), rel=1e-12)
        assert np.trace(dense) == pytest.approx(cov.trace, rel=1e-10)

    def test_apply_solve_roundtrip(self):
        cov = gauss.sq_exp_covariance((8, 8), lengthscale=0.2)
        rng = np.random.default_rng(2)
        v = rng.standard_normal(64)
        np.testing.assert_allclose(cov.solve(cov.apply(v)), v, atol=1e-10)

    def test_invariants(self):
        cov = gauss.sq_exp_covariance((8, 8), lengthscale=0.25, amplitude=2.0)
        _cov_checks(cov, np.random.default_rng(3))

    def test_rejects_nonpositive_spectrum(self):
        spec = np.ones((4, 4))
        spec[0, 0] = 0.0
        with pytest.raises(ValueError):
            gauss.spectral_covariance((4, 4), spec)


class TestSqExpCovariance:
    def test_kernel_entries_match_dense(self):
        # Covariance between two pixels matches the kernel up to the wrap
        # images and the jitter floor.
        ls, amp = 0.15, 1.3
        cov = gauss.sq_exp_covariance((32, 32), ls, amp)
        dense = dense_build(cov)
        idx = lambda i, j: i * 32 + j
        p, q = (4, 7), (9, 19)
        d2 = ((p[0] - q[0]) / 32) ** 2 + ((p[1] - q[1]) / 32) ** 2
        expected = amp * np.exp(-d2 / (2 * ls**2))
        # bound the wrap contribution by the nearest image distance
        dx = min(abs(p[1] - q[1]), 32 - abs(p[1] - q[1])) / 32
        dy = min(abs(p[0] - q[0]), 32 - abs(p[0] - q[0])) / 32
        wrap_bound = 8 * amp * np.exp(-((1 - max(dx, dy)) ** 2) / (2 * ls**2)) + 1e-8 * amp
        got = dense[idx(*p), idx(*q)]
        assert abs(got - expected) <= wrap_bound + 1e-10

    def test_short_lengthscale_is_near_diagonal(self):
        cov = gauss.sq_exp_covariance((8, 8), lengthscale=0.01, amplitude=1.0)
        dense = dense_build(cov)
        off = dense - np.diag(np.diag(dense))
        assert np.abs(np.diag(dense) - 1.0).max() < 1e-6
        assert np.abs(off).max() < 1e-6

    def test_pixel_variance_monte_carlo(self):
        cov = gauss.sq_exp_covariance((64, 64), lengthscale=0.1, amplitude=1.0)
        g = gauss.RngStream(5, 0).generator()
        draws = np.stack([gauss.sample_gaussian(cov, g) for _ in range(10_000)])
        var = draws[:, 1234].var(ddof=1)
        assert abs(var - 1.0) < 0.1

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            gauss.sq_exp_covariance((4, 4), lengthscale=-1.0)


class TestDenseCovariance:
    def test_invariants(self):
        rng = np.random.default_rng(4)
        M = rng.standard_normal((12, 12))
        cov = gauss.dense_covariance(M @ M.T / 12 + np.eye(12))
        _cov_checks(cov, rng)

    def test_rejects_indefinite(self):
        M = np.diag([1.0, -0.5, 2.0])
        with pytest.raises(ValueError):
            gauss.dense_covariance(M)


class TestSampleGaussian:
    def test_identity_covariance_variance(self):
        cov = gauss.scalar_covariance(10, 1.0)
        g = gauss.RngStream(6, 0).generator()
        draws = np.stack([gauss.sample_gaussian(cov, g) for _ in range(10_000)])
        flat = draws.ravel()
        assert abs(flat.var(ddof=1) - 1.0) < 3.0 / np.sqrt(flat.size)

    def test_deterministic_for_fixed_stream(self):
        cov = gauss.scalar_covariance(8, 2.0)
        a = gauss.sample_gaussian(cov, gauss.RngStream(7, 3))
        b = gauss.sample_gaussian(cov, gauss.RngStream(7, 3))
        np.testing.assert_array_equal(a, b)

    def test_empirical_covariance_matches_dense(self):
        rng = np.random.default_rng(8)
        M = rng.standard_normal((4, 4))
        target = M @ M.T / 4 + np.eye(4)
        cov = gauss.dense_covariance(target)
        g = gauss.RngStream(8, 0).generator()
        draws = np.stack([gauss.sample_gaussian(cov, g) for _ in range(10_000)])
        emp = np.cov(draws.T)
        n = draws.shape[0]
        for i in range(4):
            for j in range(4):
                se = np.sqrt((target[i, i] * target[j, j] + target[i, j] ** 2) / n)
                assert abs(emp[i, j] - target[i, j]) < 5 * se

    def test_empirical_covariance_frobenius_shrinks(self):
        rng = np.random.default_rng(9)
        M = rng.standard_normal((6, 6))
        target = M @ M.T / 6 + np.eye(6)
        cov = gauss.dense_covariance(target)
        g = gauss.RngStream(9, 0).generator()
        errs = []
        for n in (500, 8000):
            draws = np.stack([gauss.sample_gaussian(cov, g) for _ in range(n)])
            errs.append(np.linalg.norm(np.cov(draws.T) - target))
        assert errs[1] < errs[0]


class TestCgSolve:
    def test_identity_one_iteration(self):
        b = np.array([1.0, -2.0, 3.0])
        res = gauss.cg_solve(lambda v: v, b, tol=1e-12)
        np.testing.assert_allclose(res.x, b, atol=1e-14)
        assert res.iterations == 1
        assert res.converged

    def test_two_by_two_hand_solution(self):
        A = np.array([[4.0, 1.0], [1.0, 3.0]])
        res = gauss.cg_solve(lambda v: A @ v, np.array([1.0, 2.0]), tol=1e-14)
        np.testing.assert_allclose(res.x, [1.0 / 11.0, 7.0 / 11.0], atol=1e-12)

    def test_random_spd_against_dense_solve(self):
        rng = np.random.default_rng(10)
        M = rng.standard_normal((50, 50))
        A = M @ M.T / 50 + np.eye(50)
        b = rng.standard_normal(50)
        res = gauss.cg_solve(lambda v: A @ v, b, tol=1e-10, max_iter=500)
        assert res.converged
        np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-7)

    def test_energy_norm_monotone(self):
        rng = np.random.default_rng(11)
        M = rng.standard_normal((30, 30))
        A = M @ M.T / 30 + np.eye(30)
        b = rng.standard_normal(30)
        xstar = np.linalg.solve(A, b)
        errs = []
        x_prev = np.zeros(30)
        for k in range(1, 12):
            res = gauss.cg_solve(lambda v: A @ v, b, tol=1e-16, max_iter=k)
            e = res.x - xstar
            errs.append(np.dot(e, A @ e))
            x_prev = res.x
        assert all(b <= a * (1 + 1e-12) for a, b in zip(errs, errs[1:]))

    def test_reports_nonconvergence(self):
        rng = np.random.default_rng(12)
        M = rng.standard_normal((40, 40))
        A = M @ M.T / 40 + 1e-4 * np.eye(40)
        res = gauss.cg_solve(lambda v: A @ v, rng.standard_normal(40), tol=1e-14, max_iter=2)
        assert not res.converged
        assert res.residual > 1e-14

    def test_breakdown_raises(self):
        with pytest.raises(gauss.CGBreakdownError):
            gauss.cg_solve(lambda v: np.full_like(v, np.nan), np.ones(3))

    def test_preconditioner_speedup(self):
        rng = np.random.default_rng(13)
        d = np.geomspace(1.0, 1e6, 60)
        A = np.diag(d)
        b = rng.standard_normal(60)
        plain = gauss.cg_solve(lambda v: A @ v, b, tol=1e-10, max_iter=2000)
        prec = gauss.cg_solve(lambda v: A @ v, b, tol=1e-10, max_iter=2000,
                              preconditioner=lambda r: r / d)
        assert prec.converged
        assert prec.iterations < plain.iterations

    def test_batch_matches_single(self):
        rng = np.random.default_rng(14)
        M = rng.standard_normal((20, 20))
        A = M @ M.T / 20 + np.eye(20)
        B = rng.standard_normal((5, 20))
        X = gauss.cg_solve_batch(lambda V: V @ A.T, B, tol=1e-12)
        for i in range(5):
            np.testing.assert_allclose(X[i], np.linalg.solve(A, B[i]), atol=1e-9)

    def test_batch_rows_independent_of_composition(self):
        rng = np.random.default_rng(15)
        M = rng.standard_normal((16, 16))
        A = M @ M.T / 16 + np.eye(16)
        B = rng.standard_normal((6, 16))
        full = gauss.cg_solve_batch(lambda V: V @ A.T, B, tol=1e-10)
        sub = gauss.cg_solve_batch(lambda V: V @ A.T, B[2:5], tol=1e-10)
        np.testing.assert_array_equal(full[2:5], sub)

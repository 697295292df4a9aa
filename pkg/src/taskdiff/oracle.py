"""Exact Gaussian posterior, dense brute-force validators, ensemble statistics.

Everything here is an oracle: dense materialization is allowed but guarded so
it can never silently run at production scale.  The dense conditional-score
route below is derived from the diffused-posterior density directly and
shares no code with the conjugacy-based score models, giving two independent
derivations to cross-check.
"""

from dataclasses import dataclass, field

import numpy as np

from .gauss import CovarianceOp, GaussianPrior, _as_generator, sample_gaussian
from .linop import LinearMap
from .scores import gaussian_posterior_moments

DENSE_GUARD = 1_000_000
DENSE_SCORE_GUARD = 64
DENSE_STD_GUARD = 2048


def dense_build(op, guard: int = DENSE_GUARD) -> np.ndarray:
    """Materialize an operator by applying it to the canonical basis.

    Hard-errors above ``guard`` entries: oracles must never silently run at
    production scale.
    """
    if isinstance(op, CovarianceOp):
        n = m = op.dim
    else:
        n, m = op.domain_dim, op.codomain_dim
    if n * m > guard:
        raise ValueError(f"dense guard: {n} x {m} operator exceeds {guard} entries")
    return np.asarray(op.apply(np.eye(n))).T


@dataclass
class GaussianPosterior:
    """Exact posterior moments plus a matrix-free sampler."""

    mean: np.ndarray
    covariance_action: object
    sampler: object

    def sample(self, rng):
        return self.sampler(rng)


def exact_posterior(prior: GaussianPrior, A: LinearMap, Gamma: CovarianceOp, y,
                    cg_tol: float = 1e-8) -> GaussianPosterior:
    """Conjugate Gaussian posterior, all solves in measurement space.

    Sampling uses the residual-correction trick: a prior draw plus the
    Kalman-type update computed against a perturbed measurement.
    """
    y = np.asarray(y, dtype=np.float64)
    S0 = prior.cov
    mean, data_solve = gaussian_posterior_moments(A, prior, Gamma, y, cg_tol=cg_tol)

    def cov_action(v):
        sv = S0.apply(np.asarray(v, dtype=np.float64))
        return sv - S0.apply(A.adjoint_apply(data_solve(A.apply(sv))))

    def draw(rng):
        g = _as_generator(rng)
        x = prior.sample(g)
        eps = sample_gaussian(Gamma, g)
        update = S0.apply(A.adjoint_apply(data_solve(y - A.apply(x) - eps)))
        return x + update

    return GaussianPosterior(mean=mean, covariance_action=cov_action, sampler=draw)


def posterior_std_dense(prior: GaussianPrior, A: LinearMap, Gamma: CovarianceOp,
                        guard: int = DENSE_STD_GUARD) -> np.ndarray:
    """Per-coordinate exact posterior standard deviation via dense assembly."""
    n = prior.dim
    if n > guard:
        raise ValueError(f"dense guard: posterior std assembly limited to n <= {guard}")
    S0 = dense_build(prior.cov, guard=guard * guard)
    Ad = dense_build(A, guard=guard * guard)
    Gd = dense_build(Gamma, guard=guard * guard)
    data_cov = Ad @ S0 @ Ad.T + Gd
    gain = np.linalg.solve(data_cov, Ad @ S0)
    post_cov = S0 - S0 @ Ad.T @ gain
    return np.sqrt(np.clip(np.diag(post_cov), 0.0, None))


@dataclass
class DenseGaussianProblem:
    """Dense snapshot (A, C, Gamma, S0, m0) of a linear Gaussian problem."""

    A: np.ndarray
    C: np.ndarray
    Gamma: np.ndarray
    S0: np.ndarray
    m0: np.ndarray

    @classmethod
    def from_operators(cls, A, C, Gamma, prior: GaussianPrior) -> "DenseGaussianProblem":
        n = prior.dim
        if n > DENSE_SCORE_GUARD:
            raise ValueError(f"dense guard: conditional-score oracle limited to n <= {DENSE_SCORE_GUARD}")
        return cls(
            A=dense_build(A),
            C=dense_build(C),
            Gamma=dense_build(Gamma),
            S0=dense_build(prior.cov),
            m0=prior.mean_vector(),
        )


def dense_conditional_score(problem: DenseGaussianProblem, t: float, x, y) -> np.ndarray:
    """Ground-truth weighted conditional score by direct dense differentiation.

    Differentiates the diffused-posterior log density written as a data-misfit
    term plus the convolved-prior density evaluated through the affine mean
    transform, then applies the noising covariance.  No conjugacy shortcut is
    taken, so this is independent of the score-model code path.
    """
    A, C, Gamma, S0, m0 = problem.A, problem.C, problem.Gamma, problem.S0, problem.m0
    n = S0.shape[0]
    if n > DENSE_SCORE_GUARD:
        raise ValueError(f"dense guard: n={n} exceeds {DENSE_SCORE_GUARD}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a = np.expm1(t)
    root = np.exp(0.5 * t)
    Ct = a * A @ C @ A.T + Gamma
    Ct_inv = np.linalg.inv(Ct)
    resid = y - root * A @ x
    m_t = root * x + a * C @ A.T @ Ct_inv @ resid
    Sigma_t = a * C - a * a * C @ A.T @ Ct_inv @ A @ C
    # Gradient of -0.5 ||y - e^{t/2} A x||^2 in the data-covariance norm.
    grad_misfit = root * A.T @ Ct_inv @ resid
    # Chain rule through the mean transform into the convolved prior.
    jac_mean = root * (np.eye(n) - a * C @ A.T @ Ct_inv @ A)
    grad_mixture = -np.linalg.solve(S0 + Sigma_t, m_t - m0)
    return C @ (grad_misfit + jac_mean.T @ grad_mixture)


@dataclass
class StatsReport:
    """Pixel-averaged ensemble statistics in both bias conventions."""

    bias: float
    std: float
    per_pixel_bias: np.ndarray
    per_pixel_std: np.ndarray
    wall_time: float = 0.0
    bias_vs_posterior_mean: float | None = None
    per_pixel_bias_vs_posterior_mean: np.ndarray | None = None


def ensemble_stats(samples, truth=None, posterior_mean=None, wall_time: float = 0.0) -> StatsReport:
    """Per-pixel |ensemble mean - reference| and ensemble std, pixel-averaged.

    ``truth`` is the ground-truth image (the paper-parity convention, which
    conflates posterior spread with estimator error); ``posterior_mean`` the
    exact posterior mean (the statistically honest one).  Either or both may
    be given; the headline ``bias`` uses the ground truth when available.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError("need a nonempty (n_samples, n) ensemble")
    if truth is None and posterior_mean is None:
        raise ValueError("need a ground truth and/or an exact posterior mean")
    mean = samples.mean(axis=0)
    std = samples.std(axis=0, ddof=1) if samples.shape[0] > 1 else np.zeros_like(mean)
    primary = truth if truth is not None else posterior_mean
    per_bias = np.abs(mean - np.asarray(primary, dtype=np.float64))
    report = StatsReport(
        bias=float(per_bias.mean()),
        std=float(std.mean()),
        per_pixel_bias=per_bias,
        per_pixel_std=std,
        wall_time=wall_time,
    )
    if posterior_mean is not None:
        per_pm = np.abs(mean - np.asarray(posterior_mean, dtype=np.float64))
        report.bias_vs_posterior_mean = float(per_pm.mean())
        report.per_pixel_bias_vs_posterior_mean = per_pm
    return report


# ---------------------------------------------------------------------------
# Dense identity suite.
# ---------------------------------------------------------------------------


@dataclass
class IdentityResult:
    name: str
    max_defect: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_defect < self.tol


@dataclass
class IdentityReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def by_name(self, name: str) -> IdentityResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def lines(self):
        return [
            f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28s} max defect {r.max_defect:.3e} (tol {r.tol:.1e})"
            for r in self.results
        ]


def _random_spd(g, n, scale=1.0):
    W = g.standard_normal((n, n))
    return scale * (W @ W.T / n + np.eye(n))


def _rel(err, ref):
    return err / max(ref, np.finfo(float).tiny)


def identity_suite(dims=(4, 8, 16), m_dims=(2, 4, 8), trials: int = 100, tol: float = 1e-8,
                   times=(0.01, 0.1, 1.0, 5.0), rng=None, corrupt: str | None = None) -> IdentityReport:
    """Dense verification of the operator-family identities on random instances.

    Checks, per draw of dense SPD (C, Gamma) and random A at each time:
    the whitened inverse formula, the solve-free state-map inverse, the
    covariance-shuffle identity, the mixture-precision formula, the
    mean-transform factorization, and the mixture trace bound.
    ``corrupt`` deliberately breaks the construction for negative controls:
    ``state_map_sign`` flips the state-map correction, ``adjoint`` replaces
    the true adjoint with a wrong one.
    """
    g = _as_generator(rng) if rng is not None else np.random.default_rng(0)
    defects = {}

    def note(name, value):
        defects[name] = max(defects.get(name, 0.0), value)

    for trial in range(trials):
        n = int(g.choice(dims))
        m = int(g.choice(m_dims))
        t = float(g.choice(times))
        a = np.expm1(t)
        A = g.standard_normal((m, n))
        At = A.T if corrupt != "adjoint" else np.roll(A.T, 1, axis=0)
        C = _random_spd(g, n)
        Gamma = _random_spd(g, m)
        Gi = np.linalg.inv(Gamma)
        Ct = a * A @ C @ At + Gamma
        Ct_inv = np.linalg.inv(Ct)
        Ch = np.linalg.cholesky(C)  # lower factor; C = Ch Ch^T
        eye_n = np.eye(n)

        # Whitened inverse: (a I - a^2 L^T A^T Ct^{-1} A L) (I/a + L^T A^T G^{-1} A L) = I
        xi = a * eye_n - a * a * Ch.T @ At @ Ct_inv @ A @ Ch
        xi_inv = eye_n / a + Ch.T @ At @ Gi @ A @ Ch
        note("whitened_inverse", _rel(np.abs(xi @ xi_inv - eye_n).max(), 1.0))

        # Solve-free inverse of the normalized state map.
        left = eye_n - a * C @ At @ Ct_inv @ A
        right = eye_n + a * C @ At @ Gi @ A
        note("state_map_inverse", _rel(np.abs(left @ right - eye_n).max(), 1.0))

        Sigma = a * C - a * a * C @ At @ Ct_inv @ A @ C

        # Covariance shuffle: a C A^T Ct^{-1} = Sigma A^T Gamma^{-1}.
        lhs = a * C @ At @ Ct_inv
        rhs = Sigma @ At @ Gi
        note("cov_shuffle", _rel(np.abs(lhs - rhs).max(), np.abs(lhs).max()))

        # Mixture precision: Sigma^{-1} = A^T G^{-1} A + C^{-1}/a.
        prec = At @ Gi @ A + np.linalg.inv(C) / a
        note("mixture_precision", _rel(np.abs(np.linalg.inv(Sigma) - prec).max(), np.abs(prec).max()))

        # Mean-transform factorization: m_t(x, y) = state_map(t) shifted_state(x, y).
        sign = -1.0 if corrupt == "state_map_sign" else 1.0
        Rt = a * eye_n + sign * (-(a * a)) * C @ At @ Ct_inv @ A
        lam = 1.0 / (2.0 * np.sinh(0.5 * t))
        x = g.standard_normal(n)
        y = g.standard_normal(m)
        root = np.exp(0.5 * t)
        m_t = root * x + a * C @ At @ Ct_inv @ (y - root * A @ x)
        xi_state = C @ At @ Gi @ y + lam * x
        note("mean_factorization", _rel(np.linalg.norm(Rt @ xi_state - m_t), np.linalg.norm(m_t)))

        # Trace bound: 0 < tr Sigma <= a tr C, equality iff A = 0.
        tr_sigma = np.trace(Sigma)
        bound = a * np.trace(C)
        viol = 0.0
        if not (tr_sigma > 0.0):
            viol = 1.0
        if tr_sigma > bound * (1 + 1e-12):
            viol = max(viol, _rel(tr_sigma - bound, bound))
        # strictness: A != 0 must lose trace
        if np.abs(A).max() > 0 and not (tr_sigma < bound):
            viol = max(viol, 1.0)
        tr_sigma0 = np.trace(a * C)  # A = 0 reduction
        viol = max(viol, _rel(abs(tr_sigma0 - bound), bound))
        note("trace_bound", viol)

    report = IdentityReport()
    for name, defect in defects.items():
        report.results.append(IdentityResult(name=name, max_defect=defect, tol=tol))
    return report


# ---------------------------------------------------------------------------
# Two-sample energy distance with a permutation test.
# ---------------------------------------------------------------------------


def energy_distance(X, Y) -> float:
    """Sample energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'|."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    dxy = np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=2).mean()
    dxx = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2).mean()
    dyy = np.linalg.norm(Y[:, None, :] - Y[None, :, :], axis=2).mean()
    return 2.0 * dxy - dxx - dyy


def energy_distance_test(X, Y, n_perms: int = 199, rng=None):
    """Permutation p-value for the two-sample energy statistic."""
    g = _as_generator(rng) if rng is not None else np.random.default_rng(1)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    nx = X.shape[0]
    pooled = np.vstack([X, Y])
    total = pooled.shape[0]
    D = np.linalg.norm(pooled[:, None, :] - pooled[None, :, :], axis=2)

    def stat(ix, iy):
        return (2.0 * D[np.ix_(ix, iy)].mean()
                - D[np.ix_(ix, ix)].mean()
                - D[np.ix_(iy, iy)].mean())

    observed = stat(np.arange(nx), np.arange(nx, total))
    count = 0
    for _ in range(n_perms):
        perm = g.permutation(total)
        if stat(perm[:nx], perm[nx:]) >= observed:
            count += 1
    pvalue = (count + 1) / (n_perms + 1)
    return observed, pvalue

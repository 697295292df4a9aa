"""Score models: the evaluation interface and closed-form Gaussian realizations.

All scores here follow the weighted convention: a score is the noising
covariance applied to the log-density gradient of the relevant marginal.
Times are effective times throughout (see diffusion module docstring).

The Gaussian closed forms reduce every evaluation to one SPD solve:

* task-dependent score   r(zeta, t) = M_t^{-1} (C^{-1} zeta + S0^{-1} m0),
  with  M_t = (e^t - 1)^{-1} C^{-1} + A* Gamma^{-1} A + S0^{-1};
* diffused-Gaussian score s(x, t) = -K_t^{-1} P (x - e^{-t/2} m),
  for a base N(m, P^{-1}) diffused by the noising process, with
  K_t = e^{-t} C^{-1} + (1 - e^{-t}) P  (P the base precision action);
* mixture score  s_mix(z, t) = -S0^{1/2} (I + S0^{1/2} Q_t S0^{1/2})^{-1}
  S0^{-1/2} (z - m0),  Q_t = A* Gamma^{-1} A + (e^t - 1)^{-1} C^{-1}.

When the covariances share a spectral basis and no forward map enters, the
solves collapse to exact diagonal divisions.
"""

import numpy as np

from .gauss import (CovarianceOp, GaussianPrior, SpectralCovariance, _as_generator,
                    cg_solve, cg_solve_batch)
from .linop import LinearMap


class ScoreModel:
    """Deterministic map (state, effective time) -> score-like vector."""

    name = "score"

    def evaluate(self, zeta, t: float):
        raise NotImplementedError

    def evaluate_batch(self, Z, t: float):
        Z = np.asarray(Z, dtype=np.float64)
        return np.stack([self.evaluate(z, t) for z in Z])

    def describe(self) -> str:
        return self.name


class CallableScoreModel(ScoreModel):
    """Adapter for plugging an arbitrary (zeta, t) -> vector callable."""

    def __init__(self, fn, name="callable"):
        self._fn = fn
        self.name = name

    def evaluate(self, zeta, t: float):
        return np.asarray(self._fn(np.asarray(zeta, dtype=np.float64), t), dtype=np.float64)


class ScaledScoreModel(ScoreModel):
    """c times another model; handy for loss-landscape sweeps."""

    def __init__(self, c: float, base: ScoreModel):
        self.c = float(c)
        self.base = base
        self.name = f"{c:g}*{base.name}"

    def evaluate(self, zeta, t: float):
        return self.c * self.base.evaluate(zeta, t)

    def evaluate_batch(self, Z, t: float):
        return self.c * self.base.evaluate_batch(Z, t)


def _normal_action(A: LinearMap | None, Gamma: CovarianceOp | None):
    if A is None:
        return None

    def act(v):
        return A.adjoint_apply(Gamma.solve(A.apply(v)))

    return act


def _normal_diag_mean(A, Gamma, dim, probes: int = 8) -> float:
    """Hutchinson estimate of tr(A* Gamma^{-1} A) / n with a fixed probe seed."""
    if A is None:
        return 0.0
    g = np.random.default_rng(20240211)
    act = _normal_action(A, Gamma)
    total = 0.0
    for _ in range(probes):
        v = g.choice([-1.0, 1.0], size=dim)
        total += float(np.dot(v, act(v)))
    return max(total / (probes * dim), 0.0)


def _shared_spectral(*ops):
    keys = {op.basis_key for op in ops}
    if len(keys) == 1 and None not in keys:
        return True
    return False


class _TimeIndexedSpd:
    """Action  c_cov C^{-1} + c_prior S0^{-1} + c_normal A* Gamma^{-1} A  with solves."""

    def __init__(self, C, S0, A, Gamma, cg_tol):
        self.C = C
        self.S0 = S0
        self.normal = _normal_action(A, Gamma)
        self.cg_tol = float(cg_tol)
        self.dim = C.dim
        covs = [C] + ([S0] if S0 is not None else [])
        self._fused = isinstance(C, SpectralCovariance) and _shared_spectral(*covs)
        self._diag_mean = _normal_diag_mean(A, Gamma, self.dim)
        self._pure_spectral = self._fused and self.normal is None

    def _coefs_spectrum(self, c_cov, c_prior):
        spec = c_cov / self.C.spectrum
        if self.S0 is not None and c_prior != 0.0:
            spec = spec + c_prior / self.S0.spectrum
        return spec

    def action(self, c_cov, c_prior, c_normal):
        if self._fused:
            spec = self._coefs_spectrum(c_cov, c_prior)

            def act(v):
                out = self.C.filter_with(spec, v)
                if self.normal is not None and c_normal != 0.0:
                    out = out + c_normal * self.normal(v)
                return out

            return act

        def act(v):
            out = c_cov * self.C.solve(v)
            if self.S0 is not None and c_prior != 0.0:
                out = out + c_prior * self.S0.solve(v)
            if self.normal is not None and c_normal != 0.0:
                out = out + c_normal * self.normal(v)
            return out

        return act

    def preconditioner(self, c_cov, c_prior, c_normal):
        if not self._fused:
            return None
        spec = self._coefs_spectrum(c_cov, c_prior) + c_normal * self._diag_mean

        def prec(v):
            return self.C.filter_with(1.0 / spec, v)

        return prec

    def solve(self, c_cov, c_prior, c_normal, rhs):
        rhs = np.asarray(rhs, dtype=np.float64)
        if self._pure_spectral or (self._fused and c_normal == 0.0):
            spec = self._coefs_spectrum(c_cov, c_prior)
            return self.C.filter_with(1.0 / spec, rhs)
        act = self.action(c_cov, c_prior, c_normal)
        prec = self.preconditioner(c_cov, c_prior, c_normal)
        if rhs.ndim == 2:
            return cg_solve_batch(act, rhs, tol=self.cg_tol, preconditioner=prec)
        res = cg_solve(act, rhs, tol=self.cg_tol, preconditioner=prec)
        if not res.converged:
            raise RuntimeError(f"score solve did not converge (residual {res.residual:.2e})")
        return res.x


class GaussianTaskScore(ScoreModel):
    """Closed-form task-dependent score for a Gaussian prior.

    Stands in for a trained model: its internal forward-map applications are
    the offline analogue of network weights and are deliberately not routed
    through the sampling bundle's call counter.
    """

    name = "gaussian-task-score"

    def __init__(self, A: LinearMap | None, C: CovarianceOp, Gamma: CovarianceOp | None,
                 prior: GaussianPrior, cg_tol: float = 1e-8):
        if prior.dim != C.dim:
            raise ValueError("prior and noising covariance dimensions differ")
        self.C = C
        self.prior = prior
        self._spd = _TimeIndexedSpd(C, prior.cov, A, Gamma, cg_tol)

    def _rhs(self, Z):
        rhs = self.C.solve(Z)
        if self.prior.mean is not None:
            rhs = rhs + self.prior.cov.solve(self.prior.mean)
        return rhs

    def evaluate(self, zeta, t: float):
        return self.evaluate_batch(np.asarray(zeta, dtype=np.float64)[None, :], t)[0]

    def evaluate_batch(self, Z, t: float):
        a = float(np.expm1(t))
        if a <= 0:
            raise ValueError("task score requires t > 0")
        Z = np.asarray(Z, dtype=np.float64)
        return self._spd.solve(1.0 / a, 1.0, 1.0, self._rhs(Z))


def gaussian_task_score(A, C, Gamma, prior: GaussianPrior, cg_tol: float = 1e-8) -> GaussianTaskScore:
    return GaussianTaskScore(A, C, Gamma, prior, cg_tol=cg_tol)


class GaussianMixtureScore(ScoreModel):
    """Closed-form score of the prior-plus-mixture-noise process."""

    name = "gaussian-mixture-score"

    def __init__(self, A, C, Gamma, prior: GaussianPrior, cg_tol: float = 1e-8):
        self.prior = prior
        self.C = C
        self._spd = _TimeIndexedSpd(C, None, A, Gamma, cg_tol)
        self._S0 = prior.cov

    def evaluate(self, z, t: float):
        return self.evaluate_batch(np.asarray(z, dtype=np.float64)[None, :], t)[0]

    def evaluate_batch(self, Z, t: float):
        a = float(np.expm1(t))
        if a <= 0:
            raise ValueError("mixture score requires t > 0")
        Z = np.asarray(Z, dtype=np.float64)
        if self.prior.mean is not None:
            Z = Z - self.prior.mean
        # -(I + S0 Q_t)^{-1} (z - m0), symmetrized through S0^{1/2}.
        w = self._S0.isqrt_apply(Z)
        qt = self._spd.action(1.0 / a, 0.0, 1.0)

        def act(v):
            return v + self._S0.sqrt_apply(qt(self._S0.sqrt_apply(v)))

        if Z.ndim == 2:
            u = cg_solve_batch(act, w, tol=self._spd.cg_tol)
        else:
            u = cg_solve(act, w, tol=self._spd.cg_tol).x
        return -self._S0.sqrt_apply(u)


def gaussian_mixture_score(A, C, Gamma, prior: GaussianPrior, cg_tol: float = 1e-8) -> GaussianMixtureScore:
    return GaussianMixtureScore(A, C, Gamma, prior, cg_tol=cg_tol)


class GaussianDiffusedScore(ScoreModel):
    """Weighted score of a diffused Gaussian N(m, P^{-1}): the prior-score and
    exact-conditional-score realization.

    ``evaluate(x, t) = -K_t^{-1} P (x - e^{-t/2} m)`` with
    ``K_t = e^{-t} C^{-1} + (1 - e^{-t}) P``.  Affine in x, with exact
    Jacobian actions for guidance methods that differentiate through the
    denoiser.
    """

    def __init__(self, C: CovarianceOp, base_prior: GaussianPrior, A=None, Gamma=None,
                 base_mean=None, cg_tol: float = 1e-8, name="gaussian-diffused-score"):
        self.C = C
        self.base_cov = base_prior.cov
        self.base_mean = base_mean if base_mean is not None else base_prior.mean
        self.name = name
        self._spd = _TimeIndexedSpd(C, base_prior.cov, A, Gamma, cg_tol)
        self._normal = _normal_action(A, Gamma)

    def _precision(self, V):
        out = self.base_cov.solve(V)
        if self._normal is not None:
            out = out + self._normal(V)
        return out

    def evaluate(self, x, t: float):
        return self.evaluate_batch(np.asarray(x, dtype=np.float64)[None, :], t)[0]

    def evaluate_batch(self, X, t: float):
        X = np.asarray(X, dtype=np.float64)
        if self.base_mean is not None:
            X = X - np.exp(-0.5 * t) * self.base_mean
        return -self._solve_kt(t, self._precision(X))

    def _solve_kt(self, t: float, rhs):
        decay = float(np.exp(-t))
        grow = float(-np.expm1(-t))  # 1 - e^{-t}
        return self._spd.solve(decay, grow, grow, rhs)

    def jacobian_apply(self, v, t: float):
        v = np.asarray(v, dtype=np.float64)
        return -self._solve_kt(t, self._precision(v))

    def jacobian_adjoint_apply(self, v, t: float):
        v = np.asarray(v, dtype=np.float64)
        return -self._precision(self._solve_kt(t, v))


def gaussian_prior_score(prior: GaussianPrior, C: CovarianceOp,
                         cg_tol: float = 1e-8) -> GaussianDiffusedScore:
    """Weighted score of the diffused prior marginal."""
    return GaussianDiffusedScore(C, prior, cg_tol=cg_tol, name="gaussian-prior-score")


def gaussian_posterior_moments(A: LinearMap, prior: GaussianPrior, Gamma: CovarianceOp,
                               y, cg_tol: float = 1e-8):
    """Posterior mean via the measurement-space solve; returns (mean, data_solve).

    mean = m0 + S0 A* (A S0 A* + Gamma)^{-1} (y - A m0); the returned
    ``data_solve`` applies (A S0 A* + Gamma)^{-1} and is reused by samplers.
    """
    y = np.asarray(y, dtype=np.float64)
    S0 = prior.cov

    def data_action(w):
        return A.apply(S0.apply(A.adjoint_apply(w))) + Gamma.apply(w)

    def data_solve(w):
        w = np.asarray(w, dtype=np.float64)
        if w.ndim == 2:
            return cg_solve_batch(data_action, w, tol=cg_tol, preconditioner=Gamma.solve)
        res = cg_solve(data_action, w, tol=cg_tol, preconditioner=Gamma.solve)
        if not res.converged:
            raise RuntimeError("posterior data solve did not converge")
        return res.x

    resid = y - (A.apply(prior.mean) if prior.mean is not None else np.zeros(A.codomain_dim))
    mean = S0.apply(A.adjoint_apply(data_solve(resid)))
    if prior.mean is not None:
        mean = mean + prior.mean
    return mean, data_solve


def gaussian_conditional_score_exact(A: LinearMap, C: CovarianceOp, Gamma: CovarianceOp,
                                     prior: GaussianPrior, y,
                                     cg_tol: float = 1e-8) -> GaussianDiffusedScore:
    """Exact conditional score: the diffused-posterior score for Gaussian priors.

    The posterior is Gaussian with precision S0^{-1} + A* Gamma^{-1} A and the
    mean solved once from the measurement, so this is the diffused-Gaussian
    score of the posterior.  Derived by conjugacy, independently of the
    task-score identity, which makes the two usable as mutual cross-checks.
    """
    mean, _ = gaussian_posterior_moments(A, prior, Gamma, y, cg_tol=cg_tol)
    return GaussianDiffusedScore(C, prior, A=A, Gamma=Gamma, base_mean=mean,
                                 cg_tol=cg_tol, name="gaussian-conditional-score")


def x0_hat(score: ScoreModel, x, t: float):
    """Denoised state estimate e^{t/2} (x + (1 - e^{-t}) score(x, t))."""
    x = np.asarray(x, dtype=np.float64)
    return np.exp(0.5 * t) * (x + (-np.expm1(-t)) * score.evaluate(x, t))


class TabulatedLinearScore(ScoreModel):
    """File-backed affine score: one least-squares-fitted map per time node.

    The reference "trainable" model: r(zeta, t) = W_k zeta + b_k where k is
    the nearest tabulated node to t.  Serialization: one ASCII header line
    ``TASKSCORE-LINEAR 1 <n> <k>\\n``, then k node times, then per node the
    row-major n x n matrix followed by the length-n intercept, all
    little-endian float64.
    """

    MAGIC = b"TASKSCORE-LINEAR"
    name = "tabulated-linear-score"

    def __init__(self, times, matrices, biases):
        self.times = np.asarray(times, dtype=np.float64)
        self.matrices = np.asarray(matrices, dtype=np.float64)
        self.biases = np.asarray(biases, dtype=np.float64)
        k = self.times.size
        if self.matrices.shape[0] != k or self.biases.shape[0] != k:
            raise ValueError("node count mismatch between times and tables")
        if self.matrices.shape[1] != self.matrices.shape[2]:
            raise ValueError("per-node maps must be square")

    @property
    def dim(self) -> int:
        return self.matrices.shape[1]

    def _node(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def evaluate(self, zeta, t: float):
        k = self._node(t)
        return self.matrices[k] @ np.asarray(zeta, dtype=np.float64) + self.biases[k]

    def evaluate_batch(self, Z, t: float):
        k = self._node(t)
        return np.asarray(Z, dtype=np.float64) @ self.matrices[k].T + self.biases[k]

    def save(self, path):
        n, k = self.dim, self.times.size
        with open(path, "wb") as fh:
            fh.write(self.MAGIC + f" 1 {n} {k}\n".encode("ascii"))
            fh.write(self.times.astype("<f8").tobytes())
            for i in range(k):
                fh.write(np.ascontiguousarray(self.matrices[i], dtype="<f8").tobytes())
                fh.write(self.biases[i].astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TabulatedLinearScore":
        with open(path, "rb") as fh:
            header = fh.readline().split()
            if len(header) != 4 or header[0] != cls.MAGIC or header[1] != b"1":
                raise ValueError(f"not a tabulated score file: {path}")
            n, k = int(header[2]), int(header[3])
            times = np.frombuffer(fh.read(8 * k), dtype="<f8")
            mats = np.empty((k, n, n))
            biases = np.empty((k, n))
            for i in range(k):
                mats[i] = np.frombuffer(fh.read(8 * n * n), dtype="<f8").reshape(n, n)
                biases[i] = np.frombuffer(fh.read(8 * n), dtype="<f8")
        return cls(times, mats, biases)

    @classmethod
    def fit(cls, ops, prior: GaussianPrior, times, n_samples: int, rng,
            ridge: float = 1e-8) -> "TabulatedLinearScore":
        """Least-squares fit of (zeta -> x0) on fresh training pairs per node.

        ``times`` are effective times.  Desk-scale only: the design matrix is
        dense in the state dimension.
        """
        from .diffusion import training_batch_sample

        g = _as_generator(rng)
        times = np.asarray(times, dtype=np.float64)
        n = prior.dim
        mats = np.empty((times.size, n, n))
        biases = np.empty((times.size, n))
        for i, t in enumerate(times):
            x0s = np.stack([prior.sample(g) for _ in range(n_samples)])
            batch = training_batch_sample(ops, x0s, np.full(n_samples, float(t)), g)
            design = np.hstack([batch.zeta, np.ones((n_samples, 1))])
            gram = design.T @ design + ridge * np.eye(n + 1)
            coef = np.linalg.solve(gram, design.T @ batch.x0)
            mats[i] = coef[:n].T
            biases[i] = coef[n]
        return cls(times, mats, biases)

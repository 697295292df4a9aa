"""The task-dependent operator family and the exact conditional-score transform.

For a forward map A, noising covariance C and noise covariance Gamma, the
family consists of (all at diffusion time t > 0, with a = e^t - 1):

    data_cov(t)      = a A C A* + Gamma                  (measurement space)
    mixture_cov(t)   = a C - a^2 C A* data_cov(t)^{-1} A C
    state_map(t)     = a I - a^2 C A* data_cov(t)^{-1} A
    state_map_inv(t) = (1/a) I + C A* Gamma^{-1} A       (solve-free)

``mixture_cov = state_map . C`` and the conditional score of the posterior
equals ``lam(t) * (r(shift + lam(t) x, t) - e^{t/2} x)`` where r is the
task-dependent score and ``shift = C A* Gamma^{-1} y`` is computed once per
measurement.  After that, evaluating the conditional score applies no forward
operators besides whatever r uses internally.
"""

import numpy as np

from .gauss import CovarianceOp, cg_solve, cg_solve_batch
from .linop import CountingLinearMap, LinearMap, OpCounter


def lambda_weight(t: float) -> float:
    """Scalar score weight 1 / (e^{t/2} - e^{-t/2}); defined for t > 0."""
    if t <= 0:
        raise ValueError(f"time weight requires t > 0, got {t}")
    return 1.0 / (2.0 * np.sinh(0.5 * t))


def _growth(t: float) -> float:
    # a = e^t - 1, the variance growth factor of the unit-speed noising process
    if t <= 0:
        raise ValueError(f"operator family requires t > 0, got {t}")
    return float(np.expm1(t))


class TaskOperators:
    """Bundle (A, C, Gamma) with the time-indexed operator family actions.

    The forward map is wrapped with a call counter: every ``apply`` /
    ``adjoint_apply`` issued through this bundle is tallied, which is how the
    sampling manifests audit that the online phase stays forward-map free.
    Immutable once a measurement is attached; attach via ``set_measurement``
    which returns a new bundle sharing the same counter.
    """

    def __init__(self, A: LinearMap, C: CovarianceOp, Gamma: CovarianceOp,
                 cg_tol: float = 1e-8, _shared=None):
        if C.dim != A.domain_dim:
            raise ValueError(f"noising covariance dim {C.dim} != operator domain {A.domain_dim}")
        if Gamma.dim != A.codomain_dim:
            raise ValueError(f"noise covariance dim {Gamma.dim} != operator codomain {A.codomain_dim}")
        if _shared is not None:
            self.A = _shared
        else:
            self.A = A if isinstance(A, CountingLinearMap) else CountingLinearMap(A, OpCounter())
        self.C = C
        self.Gamma = Gamma
        self.cg_tol = float(cg_tol)
        self.measurement = None
        self.measurement_shift = None
        self.shift_data_ratio = None
        # Family-action tallies used by the construction audits.
        self.family_counts = {
            "data_cov_solves": 0,
            "mixture_cov_applies": 0,
            "state_map_applies": 0,
            "state_map_inverse_applies": 0,
            "mean_transform_evals": 0,
        }

    @property
    def counter(self) -> OpCounter:
        return self.A.counter

    @property
    def domain_dim(self) -> int:
        return self.A.domain_dim

    @property
    def codomain_dim(self) -> int:
        return self.A.codomain_dim

    # -- operator family -----------------------------------------------------

    def data_cov_action(self, t: float):
        a = _growth(t)

        def action(w):
            return a * self.A.apply(self.C.apply(self.A.adjoint_apply(w))) + self.Gamma.apply(w)

        return action

    def solve_data_cov(self, t: float, w, tol: float | None = None):
        """Apply data_cov(t)^{-1} by preconditioned CG (Gamma as preconditioner).

        Accepts a single vector or a (batch, m) stack of right-hand sides.
        """
        tol = self.cg_tol if tol is None else tol
        w = np.asarray(w, dtype=np.float64)
        action = self.data_cov_action(t)
        if w.ndim == 2:
            x = cg_solve_batch(action, w, tol=tol, preconditioner=self.Gamma.solve)
            resid = np.linalg.norm(action(x) - w, axis=1)
            bad = resid > 10.0 * tol * np.maximum(np.linalg.norm(w, axis=1), np.finfo(float).tiny)
            if bad.any():
                raise RuntimeError(
                    f"data-covariance batch solve did not converge for {int(bad.sum())} "
                    f"right-hand sides (t={t:g})"
                )
            self.family_counts["data_cov_solves"] += w.shape[0]
            return x
        res = cg_solve(action, w, tol=tol, preconditioner=self.Gamma.solve)
        if not res.converged:
            raise RuntimeError(
                f"data-covariance solve did not converge: residual {res.residual:.2e} "
                f"after {res.iterations} iterations (t={t:g})"
            )
        self.family_counts["data_cov_solves"] += 1
        return res.x

    def apply_mixture_cov(self, t: float, v, tol: float | None = None):
        """Apply mixture_cov(t) = a C - a^2 C A* data_cov(t)^{-1} A C."""
        a = _growth(t)
        cv = self.C.apply(np.asarray(v, dtype=np.float64))
        z = self.solve_data_cov(t, self.A.apply(cv), tol=tol)
        self.family_counts["mixture_cov_applies"] += 1
        return a * cv - a * a * self.C.apply(self.A.adjoint_apply(z))

    def apply_state_map(self, t: float, v, tol: float | None = None):
        """Apply state_map(t) = a I - a^2 C A* data_cov(t)^{-1} A (one solve)."""
        a = _growth(t)
        v = np.asarray(v, dtype=np.float64)
        z = self.solve_data_cov(t, self.A.apply(v), tol=tol)
        self.family_counts["state_map_applies"] += 1
        return a * v - a * a * self.C.apply(self.A.adjoint_apply(z))

    def apply_state_map_inverse(self, t: float, v):
        """Apply state_map(t)^{-1} = (1/a) I + C A* Gamma^{-1} A; solve-free."""
        a = _growth(t)
        v = np.asarray(v, dtype=np.float64)
        self.family_counts["state_map_inverse_applies"] += 1
        return v / a + self.C.apply(self.A.adjoint_apply(self.Gamma.solve(self.A.apply(v))))

    # -- measurement conditioning ---------------------------------------------

    def set_measurement(self, y) -> "TaskOperators":
        """Attach a measurement; returns a new bundle with the cached shift.

        Costs exactly one adjoint application (the shift C A* Gamma^{-1} y)
        and one forward application (a data-scale diagnostic recorded in
        manifests); the subsequent sampling phase applies neither.
        """
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.codomain_dim,):
            raise ValueError(f"measurement shape {y.shape} != ({self.codomain_dim},)")
        out = TaskOperators(self.A.op, self.C, self.Gamma, cg_tol=self.cg_tol, _shared=self.A)
        out.measurement = y.copy()
        out.measurement_shift = self.C.apply(self.A.adjoint_apply(self.Gamma.solve(y)))
        ynorm = np.linalg.norm(y)
        pred = np.linalg.norm(self.A.apply(out.measurement_shift))
        out.shift_data_ratio = float(pred / ynorm) if ynorm > 0 else 0.0
        return out

    def shifted_state(self, t: float, x):
        """shift + lam(t) x; the only place the measurement enters online."""
        if self.measurement_shift is None:
            raise RuntimeError("no measurement attached; call set_measurement first")
        return self.measurement_shift + lambda_weight(t) * np.asarray(x, dtype=np.float64)

    def mean_transform(self, t: float, x, y, tol: float | None = None):
        """e^{t/2} x + a C A* data_cov(t)^{-1} (y - e^{t/2} A x).

        Direct evaluation with one data-covariance solve; a test/oracle path,
        never used by the online sampler.
        """
        a = _growth(t)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        root = np.exp(0.5 * t)
        z = self.solve_data_cov(t, y - root * self.A.apply(x), tol=tol)
        self.family_counts["mean_transform_evals"] += 1
        return root * x + a * self.C.apply(self.A.adjoint_apply(z))

    def conditional_score(self, t: float, x, r_model):
        """Exact conditional score lam(t) * (r(shift + lam(t) x, t) - e^{t/2} x).

        Accepts a single state or a (batch, n) stack.
        """
        if self.measurement_shift is None:
            raise RuntimeError("no measurement attached; call set_measurement first")
        lam = lambda_weight(t)
        x = np.asarray(x, dtype=np.float64)
        zeta = self.measurement_shift + lam * x
        if x.ndim == 2:
            pred = r_model.evaluate_batch(zeta, t)
        else:
            pred = r_model.evaluate(zeta, t)
        return lam * (pred - np.exp(0.5 * t) * x)

    def reset_counters(self):
        self.A.counter.reset()
        for k in self.family_counts:
            self.family_counts[k] = 0

    def snapshot_counters(self):
        snap = dict(self.family_counts)
        snap.update(self.A.counter.snapshot())
        return snap

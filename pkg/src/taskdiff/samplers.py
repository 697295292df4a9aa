"""Reverse-time Euler-Maruyama integration and the five drift assemblers.

The reverse process is integrated from t = T down to t = delta on the
schedule's uniform physical grid.  With effective times tau_k = tau(t_k) and
step sizes d_k = tau_k - tau_{k+1} > 0, one step of the backward equation is

    x <- x + d_k * (x / 2 + s(x, tau_k)) + sqrt(d_k) C^{1/2} xi_k,

which is the time-changed reversal of the noising process with the drift
frozen at the current grid node; the noise increment variance matches the
time change exactly, so refining the grid refines the same Brownian path.
Initialization draws from N(0, (1 - e^{-tau(T)}) C), the marginal of the
noising process at the final time.

Paths are integrated in row batches: every drift maps a (batch, n) stack to
a (batch, n) stack at a shared time, and all reductions are row-local, so a
path's trajectory is bit-identical whether it runs alone or inside any batch.
Each path draws noise from its own counter-based stream, which makes
ensembles reproducible for any worker count or chunking.

Sampling-phase forward-map usage is audited through the operator bundle's
call counter; score-model internals (the stand-ins for trained networks) are
outside that budget by construction.
"""

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diffusion import Schedule
from .gauss import CovarianceOp, RngStream, _as_generator, cg_solve_batch
from .scores import ScoreModel
from .taskops import TaskOperators

METHODS = ("ucos", "conditional", "sde_ald", "dps", "proj")

# method_params keys each method consumes (cg_tol is accepted everywhere).
_METHOD_PARAM_KEYS = {
    "ucos": set(),
    "conditional": set(),
    "sde_ald": {"gamma_band", "gamma_bracket_decades", "gamma_max_bisect"},
    "dps": {"xi"},
    "proj": {"lambda_mix"},
}

MAX_PATH_ATTEMPTS = 5
# Redraw streams live far above the primary per-path stream ids.
_REDRAW_STRIDE = 2**32


class PathBlowupError(RuntimeError):
    """A sampling path left the space of finite vectors."""


class EnsembleFailure(RuntimeError):
    """More than the tolerated fraction of paths blew up."""


@dataclass
class SamplerConfig:
    method: str
    schedule: Schedule
    ensemble_size: int = 1
    seed: int = 0
    method_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        allowed = _METHOD_PARAM_KEYS[self.method] | {"cg_tol"}
        extra = set(self.method_params) - allowed
        if extra:
            raise ValueError(f"method {self.method!r} does not take params {sorted(extra)}")


@dataclass
class Ensemble:
    samples: np.ndarray          # (ensemble_size, n)
    method: str
    wall_time: float
    seed: int = 0
    counters: dict = field(default_factory=dict)
    n_redrawn: int = 0
    n_failed: int = 0

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise ValueError("samples must be (ensemble_size, n)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("ensemble contains non-finite samples")


def initial_state_batch(sched: Schedule, C: CovarianceOp, gens) -> np.ndarray:
    """Rows drawn from the noising marginal at the final time, one per stream."""
    tau_final = sched.effective_time(sched.t_final)
    Z = np.stack([g.standard_normal(C.dim) for g in gens])
    return np.sqrt(-np.expm1(-tau_final)) * C.sqrt_apply(Z)


def reverse_em_batch(score_fn, sched: Schedule, C: CovarianceOp, rngs,
                     pre_step=None, initials=None, noise_increments=None,
                     raise_on_blowup: bool = False):
    """Integrate a batch of reverse paths; returns (states, blown) at t = delta.

    ``score_fn(X, tau)`` maps (batch, n) stacks at effective time tau.  Rows
    that go non-finite are flagged in ``blown`` and carried along (they stay
    row-local); with ``raise_on_blowup`` the first such row aborts instead.
    For coupled refinement studies pass shared ``initials`` and per-step
    colored ``noise_increments`` of shape (n_steps, batch, n).
    """
    gens = [_as_generator(r) for r in rngs]
    taus = sched.effective_grid()
    n = C.dim
    if initials is None:
        X = initial_state_batch(sched, C, gens)
    else:
        X = np.array(initials, dtype=np.float64, copy=True)
    nb = X.shape[0]
    blown = np.zeros(nb, dtype=bool)
    for k in range(sched.n_steps):
        tau = float(taus[k])
        d = float(taus[k] - taus[k + 1])
        if pre_step is not None:
            X = pre_step(X, tau)
        S = score_fn(X, tau)
        if noise_increments is not None:
            noise = noise_increments[k]
        else:
            Z = np.stack([g.standard_normal(n) for g in gens])
            noise = np.sqrt(d) * C.sqrt_apply(Z)
        X = X + d * (0.5 * X + S) + noise
        bad = ~np.isfinite(X).all(axis=1)
        new_bad = bad & ~blown
        if new_bad.any():
            blown |= new_bad
            if raise_on_blowup:
                raise PathBlowupError(
                    f"non-finite state after step {k + 1} (t={tau:g}, "
                    f"row {int(np.argmax(new_bad))})"
                )
    return X, blown


def reverse_em(score_fn, sched: Schedule, C: CovarianceOp, rng,
               pre_step=None, initial=None, noise_increments=None) -> np.ndarray:
    """Integrate one reverse path; raises PathBlowupError on divergence."""
    initials = None if initial is None else np.asarray(initial, dtype=np.float64)[None, :]
    incs = None
    if noise_increments is not None:
        incs = np.asarray(noise_increments, dtype=np.float64)[:, None, :]
    X, _ = reverse_em_batch(score_fn, sched, C, [rng], pre_step=pre_step,
                            initials=initials, noise_increments=incs,
                            raise_on_blowup=True)
    return X[0]


# ---------------------------------------------------------------------------
# Drift assemblers.  Each returns a batched score function (X, tau) -> (B, n).
# ---------------------------------------------------------------------------


def ucos_drift(ops: TaskOperators, r_model: ScoreModel):
    """Conditional score via the task-score transform; forward-map free online."""
    if ops.measurement_shift is None:
        raise RuntimeError("attach a measurement before building the drift")

    def score_fn(X, tau):
        return ops.conditional_score(tau, X, r_model)

    return score_fn


def conditional_drift(score_model: ScoreModel):
    """Direct conditional score (exact Gaussian or amortized model)."""

    def score_fn(X, tau):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            return score_model.evaluate_batch(X, tau)
        return score_model.evaluate(X, tau)

    return score_fn


def sde_ald_drift(ops: TaskOperators, prior_score: ScoreModel, y,
                  gamma_band: float = 0.05, gamma_bracket_decades: float = 6.0,
                  gamma_max_bisect: int = 40):
    """Prior score plus scaled data-residual guidance, norm-matched per step.

    Requires scalar noise covariance.  The guidance weight gamma is found by
    per-row bisection in log space so that the guidance norm matches the
    prior-score norm within ``gamma_band``; rows with no admissible gamma in
    the bracket fall back to the noise variance itself.
    """
    sigma2 = ops.Gamma.scalar_variance
    if sigma2 is None:
        raise ValueError("this guidance assumes noise covariance sigma^2 I")
    y = np.asarray(y, dtype=np.float64)
    lo0 = 1e-6 * sigma2 * 10.0 ** max(0.0, 6.0 - gamma_bracket_decades)
    hi0 = 1e6 * sigma2 * 10.0 ** min(0.0, gamma_bracket_decades - 6.0)

    def score_fn(X, tau):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        S = prior_score.evaluate_batch(X, tau)
        resid = y - ops.A.apply(X)
        pull = ops.A.adjoint_apply(resid)
        ns = np.linalg.norm(S, axis=1)
        na = np.linalg.norm(pull, axis=1)
        ok = (ns > 0) & (na > 0)
        # ||pull|| / (sigma^2 + gamma) decreases in gamma; match it to ||s||.
        nsafe = np.where(ok, ns, 1.0)
        feasible = ok & (na / (sigma2 + lo0) >= nsafe * (1.0 - gamma_band)) \
            & (na / (sigma2 + hi0) <= nsafe * (1.0 + gamma_band))
        lo = np.full(X.shape[0], lo0)
        hi = np.full(X.shape[0], hi0)
        gamma = np.sqrt(lo * hi)
        for _ in range(gamma_max_bisect):
            ratio = na / (sigma2 + gamma)
            done = np.abs(ratio - nsafe) <= gamma_band * nsafe
            if np.all(done | ~feasible):
                break
            lo = np.where(~done & (ratio > nsafe), gamma, lo)
            hi = np.where(~done & (ratio <= nsafe), gamma, hi)
            gamma = np.where(done, gamma, np.sqrt(lo * hi))
        gamma = np.where(feasible, gamma, sigma2)
        coef = np.where(ok, 1.0 / (sigma2 + gamma), 0.0)
        out = S + coef[:, None] * pull
        return out[0] if single else out

    return score_fn


def dps_drift(ops: TaskOperators, prior_score, y, xi: float = 1.0):
    """Prior score plus the residual-normalized denoiser-pullback guidance.

    The denoised estimate is affine in the state for Gaussian scores, so the
    gradient is assembled with the exact Jacobian adjoint; no automatic
    differentiation is involved (a neural score would need Jacobian-vector
    products instead).
    """
    if not hasattr(prior_score, "jacobian_adjoint_apply"):
        raise ValueError("this guidance needs a score model with an exact Jacobian adjoint")
    y = np.asarray(y, dtype=np.float64)

    def score_fn(X, tau):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        S = prior_score.evaluate_batch(X, tau)
        root = np.exp(0.5 * tau)
        grow = -np.expm1(-tau)
        xhat = root * (X + grow * S)
        resid = y - ops.A.apply(xhat)
        nr = np.linalg.norm(resid, axis=1)
        pull = ops.A.adjoint_apply(resid)
        jpull = root * (pull + grow * prior_score.jacobian_adjoint_apply(pull, tau))
        coef = np.where(nr > 0, 2.0 * xi / np.where(nr > 0, nr, 1.0), 0.0)
        out = S + coef[:, None] * jpull
        return out[0] if single else out

    return score_fn


def proj_step(ops: TaskOperators, x_prime, y, tau: float, lambda_mix: float,
              cg_tol: float = 1e-8):
    """Data-consistency step (lam A*A + (1-lam) I)^{-1} ((1-lam) x' + lam A* y_tau).

    The time-t measurement target is y scaled by e^{-tau/2}, matching the
    contraction of the state marginal.  Solved by CG started at x', whose
    lam -> 1 limit overwrites the forward map's range components and keeps
    the rest of x'.
    """
    if not 0.0 <= lambda_mix <= 1.0:
        raise ValueError("lambda_mix must lie in [0, 1]")
    X = np.asarray(x_prime, dtype=np.float64)
    if lambda_mix == 0.0:
        return X.copy()
    single = X.ndim == 1
    if single:
        X = X[None, :]
    y_tau = np.exp(-0.5 * tau) * np.asarray(y, dtype=np.float64)

    def action(V):
        return lambda_mix * ops.A.adjoint_apply(ops.A.apply(V)) + (1.0 - lambda_mix) * V

    rhs = (1.0 - lambda_mix) * X + lambda_mix * ops.A.adjoint_apply(
        np.broadcast_to(y_tau, (X.shape[0], y_tau.shape[0]))
    )
    out = cg_solve_batch(action, rhs, tol=cg_tol, x0=X)
    return out[0] if single else out


def proj_pre_step(ops: TaskOperators, y, lambda_mix: float, cg_tol: float = 1e-8):
    def pre(X, tau):
        return proj_step(ops, X, y, tau, lambda_mix, cg_tol=cg_tol)

    return pre


# ---------------------------------------------------------------------------
# Ensemble runner.
# ---------------------------------------------------------------------------


@dataclass
class PathKit:
    """Everything one worker needs to integrate paths."""

    score_fn: object
    sched: Schedule
    C: CovarianceOp
    pre_step: object = None
    ops: TaskOperators | None = None
    setup_counts: dict = field(default_factory=dict)


def run_path(kit: PathKit, seed: int, path_index: int):
    """One path with blowup redraws; returns (sample or None, attempts used)."""
    for attempt in range(MAX_PATH_ATTEMPTS):
        stream = RngStream(seed, path_index + attempt * _REDRAW_STRIDE)
        try:
            x = reverse_em(kit.score_fn, kit.sched, kit.C, stream, pre_step=kit.pre_step)
            return x, attempt
        except PathBlowupError:
            continue
    return None, MAX_PATH_ATTEMPTS


def _run_chunk(provider, config: SamplerConfig, indices):
    kit = provider.build(config)
    if kit.ops is not None:
        kit.ops.reset_counters()
    streams = [RngStream(config.seed, i) for i in indices]
    X, blown = reverse_em_batch(kit.score_fn, kit.sched, kit.C, streams,
                                pre_step=kit.pre_step)
    samples, redraws, failed = {}, 0, []
    for row, i in enumerate(indices):
        if not blown[row] and np.all(np.isfinite(X[row])):
            samples[i] = X[row]
            continue
        # Redraw this path alone on its reserved streams.
        recovered = False
        for attempt in range(1, MAX_PATH_ATTEMPTS):
            redraws += 1
            stream = RngStream(config.seed, i + attempt * _REDRAW_STRIDE)
            Xr, blown_r = reverse_em_batch(kit.score_fn, kit.sched, kit.C, [stream],
                                           pre_step=kit.pre_step)
            if not blown_r[0] and np.all(np.isfinite(Xr[0])):
                samples[i] = Xr[0]
                recovered = True
                break
        if not recovered:
            failed.append(i)
    stepping = kit.ops.snapshot_counters() if kit.ops is not None else {}
    return samples, redraws, failed, stepping, kit.setup_counts


def run_ensemble(config: SamplerConfig, provider, workers: int | None = None,
                 max_failed_fraction: float = 0.01) -> Ensemble:
    """Integrate ``config.ensemble_size`` independent paths.

    ``provider.build(config)`` must return a :class:`PathKit`; with more than
    one worker it is called once per worker process, so it must be picklable
    and deterministic.  Path i always uses the RNG stream (seed, i) and its
    trajectory does not depend on which batch or worker it lands in, so the
    ensemble is bit-identical for any worker count.
    """
    if workers is None:
        workers = default_workers()
    n = config.ensemble_size
    t0 = time.perf_counter()
    indices = list(range(n))
    if workers <= 1 or n == 1:
        parts = [_run_chunk(provider, config, indices)]
    else:
        workers = min(workers, n)
        chunks = [indices[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk,
                                  [provider] * len(chunks),
                                  [config] * len(chunks),
                                  chunks))
    samples, redraws, failed = {}, 0, []
    stepping_total: dict = {}
    setup_counts: dict = {}
    for part_samples, part_redraws, part_failed, stepping, setup in parts:
        samples.update(part_samples)
        redraws += part_redraws
        failed.extend(part_failed)
        for k, v in stepping.items():
            stepping_total[k] = stepping_total.get(k, 0) + v
        setup_counts = setup or setup_counts
    if len(failed) > max_failed_fraction * n:
        raise EnsembleFailure(
            f"{len(failed)}/{n} paths failed after {MAX_PATH_ATTEMPTS} attempts each"
        )
    kept = sorted(samples)
    arr = np.stack([samples[i] for i in kept])
    wall = time.perf_counter() - t0
    counters = {"setup": setup_counts, "stepping": stepping_total}
    return Ensemble(samples=arr, method=config.method, wall_time=wall, seed=config.seed,
                    counters=counters, n_redrawn=redraws, n_failed=len(failed))


def default_workers() -> int:
    """Worker count: TASKDIFF_THREADS if set, else the logical core count."""
    env = os.environ.get("TASKDIFF_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1

"""Forward noising process, time schedule, training pairs, and the two losses.

Time convention: every closed-form identity in this package is written for
the unit-speed noising process.  A non-constant speed beta(t) enters only
through the time change tau(t) = integral of beta, so samplers and loss
estimators draw physical times from [delta, T] and hand *effective* times
tau(t) to operators, score models and weights.  With beta constant at 1 the
two coincide.
"""

from dataclasses import dataclass, field

import numpy as np

from .gauss import CovarianceOp, _as_generator
from .taskops import TaskOperators, lambda_weight


@dataclass(frozen=True)
class Schedule:
    """Integration window [delta, T], step count, and linear speed function.

    beta(t) = beta_min + t * (beta_max - beta_min); the effective time is its
    integral tau(t) = beta_min t + (beta_max - beta_min) t^2 / 2, strictly
    increasing, with tau = t when beta is identically one.
    """

    t_final: float = 1.0
    delta: float = 5e-3
    n_steps: int = 1000
    beta_min: float = 1.0
    beta_max: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.delta < self.t_final:
            raise ValueError(f"need 0 < delta < T, got delta={self.delta}, T={self.t_final}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.beta_min <= 0 or self.beta(self.t_final) <= 0:
            raise ValueError("speed function must stay positive on [0, T]")

    def beta(self, t: float) -> float:
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def effective_time(self, t) -> float:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < -1e-12) or np.any(t > self.t_final + 1e-12):
            raise ValueError(f"time {t} outside [0, {self.t_final}]")
        tau = self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
        return float(tau) if tau.ndim == 0 else tau

    def grid(self) -> np.ndarray:
        """Physical times from T down to delta, n_steps intervals."""
        return np.linspace(self.t_final, self.delta, self.n_steps + 1)

    def effective_grid(self) -> np.ndarray:
        return self.effective_time(self.grid())


def ou_transition_sample(x0, t: float, C: CovarianceOp, rng):
    """Draw from the noising transition N(e^{-t/2} x0, (1 - e^{-t}) C).

    ``t`` is an effective time (see module docstring); t = 0 returns x0.
    """
    if t < 0:
        raise ValueError("transition time must be nonnegative")
    x0 = np.asarray(x0, dtype=np.float64)
    if t == 0.0:
        return x0.copy()
    g = _as_generator(rng)
    z = C.sqrt_apply(g.standard_normal(x0.shape))
    return np.exp(-0.5 * t) * x0 + np.sqrt(-np.expm1(-t)) * z


@dataclass(frozen=True)
class TrainingPair:
    """One offline training sample: prior draw x0, transformed state zeta, time."""

    x0: np.ndarray
    zeta: np.ndarray
    t: float


@dataclass
class TrainingBatch:
    """Column-stacked training pairs; times may differ per row."""

    x0: np.ndarray      # (batch, n)
    zeta: np.ndarray    # (batch, n)
    t: np.ndarray       # (batch,)

    def __len__(self):
        return self.x0.shape[0]

    def pairs(self):
        return [TrainingPair(self.x0[i], self.zeta[i], float(self.t[i])) for i in range(len(self))]


def _zeta_from_x0(ops: TaskOperators, x0, t, g) -> np.ndarray:
    # zeta | x0 = (1/a) x0 + C A* Gamma^{-1} A x0
    #             + a^{-1/2} C^{1/2} z1 + C A* Gamma^{-1/2} z2,  a = e^t - 1.
    # Only raw forward/adjoint/covariance actions: no family solves appear,
    # which is the whole point of the offline construction.
    a = np.expm1(t)
    z1 = g.standard_normal(x0.shape)
    z2 = g.standard_normal(x0.shape[:-1] + (ops.codomain_dim,))
    drift_part = x0 / a[..., None] + ops.C.apply(ops.A.adjoint_apply(ops.Gamma.solve(ops.A.apply(x0))))
    noise_part = ops.C.sqrt_apply(z1) / np.sqrt(a)[..., None]
    noise_part = noise_part + ops.C.apply(ops.A.adjoint_apply(ops.Gamma.isqrt_apply(z2)))
    return drift_part + noise_part


def training_pair_sample(ops: TaskOperators, prior_sampler, t: float, rng) -> TrainingPair:
    """Draw one (x0, zeta, t) with zeta | x0 following the offline identity.

    ``t`` is an effective time and must be positive.  ``prior_sampler`` maps a
    numpy Generator to one prior draw.
    """
    if t <= 0:
        raise ValueError("training pairs require t > 0")
    g = _as_generator(rng)
    x0 = np.asarray(prior_sampler(g), dtype=np.float64)
    zeta = _zeta_from_x0(ops, x0[None, :], np.array([t]), g)[0]
    return TrainingPair(x0=x0, zeta=zeta, t=float(t))


def training_batch_sample(ops: TaskOperators, x0s, ts, rng) -> TrainingBatch:
    """Vectorized training pairs for given prior draws and per-row times."""
    x0s = np.asarray(x0s, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    if np.any(ts <= 0):
        raise ValueError("training pairs require t > 0")
    g = _as_generator(rng)
    zeta = _zeta_from_x0(ops, x0s, ts, g)
    return TrainingBatch(x0=x0s, zeta=zeta, t=ts)


def _as_batch_of_pairs(pairs) -> TrainingBatch:
    if isinstance(pairs, TrainingBatch):
        return pairs
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty training batch")
    return TrainingBatch(
        x0=np.stack([p.x0 for p in pairs]),
        zeta=np.stack([p.zeta for p in pairs]),
        t=np.array([p.t for p in pairs]),
    )


def _check_times(batch: TrainingBatch, sched: Schedule | None):
    if sched is None:
        return
    lo = sched.effective_time(sched.delta)
    hi = sched.effective_time(sched.t_final)
    if np.any(batch.t < lo - 1e-12) or np.any(batch.t > hi + 1e-12):
        raise ValueError(f"pair times outside effective window [{lo:g}, {hi:g}]")


def denoising_loss_samples(r_model, pairs) -> np.ndarray:
    """Per-sample lam(t)^2 ||r(zeta, t) - x0||^2 contributions."""
    batch = _as_batch_of_pairs(pairs)
    out = np.empty(len(batch))
    for t in np.unique(batch.t):
        idx = np.where(batch.t == t)[0]
        pred = r_model.evaluate_batch(batch.zeta[idx], float(t))
        lam = lambda_weight(float(t))
        out[idx] = lam * lam * np.sum((pred - batch.x0[idx]) ** 2, axis=1)
    return out


def dsm_loss(r_model, pairs, sched: Schedule | None = None) -> float:
    """Denoising objective: mean of lam(t)^2 ||r(zeta, t) - x0||^2."""
    batch = _as_batch_of_pairs(pairs)
    _check_times(batch, sched)
    return float(denoising_loss_samples(r_model, batch).mean())


def sample_loss_times(sched: Schedule, n: int, g, stratified: bool = True) -> np.ndarray:
    """Physical training times in [delta, T]; stratified by default."""
    if stratified:
        u = (np.arange(n) + g.random(n)) / n
    else:
        u = g.random(n)
    return sched.delta + u * (sched.t_final - sched.delta)


def matching_loss_samples(r_model, mixture_score, ops: TaskOperators, batch: TrainingBatch,
                          tol: float | None = None) -> np.ndarray:
    """Per-sample lam^2 ||s_mix(x_t) + x_t - r(zeta, t)||^2 contributions.

    Reconstructs x_t = state_map(t) zeta per time group (one batched solve per
    group) and evaluates the closed-form mixture score there.
    """
    out = np.empty(len(batch))
    for t in np.unique(batch.t):
        idx = np.where(batch.t == t)[0]
        tf = float(t)
        xt = ops.apply_state_map(tf, batch.zeta[idx], tol=tol)
        smix = mixture_score.evaluate_batch(xt, tf)
        pred = r_model.evaluate_batch(batch.zeta[idx], tf)
        lam = lambda_weight(tf)
        out[idx] = lam * lam * np.sum((smix + xt - pred) ** 2, axis=1)
    return out


def sm_loss_gaussian(r_model, ops: TaskOperators, prior, n_mc: int, sched: Schedule,
                     rng, n_time_nodes: int = 32, stratified: bool = True):
    """Monte Carlo score-matching objective for a Gaussian prior.

    Returns ``(loss, standard_error)``.  Times are sampled on [delta, T]
    (stratified across ``n_time_nodes`` groups unless disabled) and mapped to
    effective times; within a group the pairs are vectorized.
    """
    from .scores import gaussian_mixture_score

    g = _as_generator(rng)
    smix = gaussian_mixture_score(ops.A.op, ops.C, ops.Gamma, prior, cg_tol=ops.cg_tol)
    n_time_nodes = min(n_time_nodes, n_mc)
    t_phys = sample_loss_times(sched, n_time_nodes, g, stratified=stratified)
    per_node = [n_mc // n_time_nodes + (1 if i < n_mc % n_time_nodes else 0)
                for i in range(n_time_nodes)]
    vals = []
    for tp, cnt in zip(t_phys, per_node):
        if cnt == 0:
            continue
        tau = sched.effective_time(tp)
        x0s = np.stack([prior.sample(g) for _ in range(cnt)])
        batch = training_batch_sample(ops, x0s, np.full(cnt, tau), g)
        vals.append(matching_loss_samples(r_model, smix, ops, batch))
    vals = np.concatenate(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))

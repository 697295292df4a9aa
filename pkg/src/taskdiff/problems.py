"""Problem configurations: operators, priors and schedules from flat configs.

A :class:`Problem` is a picklable value object; the operators and covariances
it describes are built on demand (and rebuilt inside worker processes), so
ensembles stay deterministic for any worker count.
"""

import configparser
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import linop
from .diffusion import Schedule
from .gauss import GaussianPrior, scalar_covariance, sq_exp_covariance
from .samplers import PathKit, SamplerConfig, conditional_drift, dps_drift, proj_pre_step, \
    sde_ald_drift, ucos_drift
from .scores import gaussian_conditional_score_exact, gaussian_prior_score, gaussian_task_score

KINDS = ("inpainting", "ct", "deblur", "custom")

# section -> key -> (parser, default, description); the single source for
# config files, the generated reference page and make-problem defaults.
CONFIG_KEYS = {
    "problem": {
        "kind": (str, "inpainting", "problem family: inpainting | ct | deblur | custom"),
        "rows": (int, 64, "image rows"),
        "cols": (int, 64, "image cols"),
        "seed": (int, 1, "base seed for truth synthesis and sampling streams"),
        "mask_height": (int, 20, "inpainting: height of the centered unobserved block"),
        "mask_width": (int, 20, "inpainting: width of the centered unobserved block"),
        "kernel_size": (int, 9, "deblur: odd side length of the convolution stencil"),
        "kernel_sigma": (float, 2.0, "deblur: stencil width in pixels"),
        "n_angles": (int, 8, "ct: number of projection angles"),
        "n_detectors": (int, 32, "ct: detector bins per angle"),
        "span_degrees": (float, 45.0, "ct: angular span of the acquisition in degrees"),
        "custom_operator": (str, "identity", "custom: identity | broken-adjoint (validation control)"),
    },
    "prior": {
        "kind": (str, "sq_exp", "prior covariance family: sq_exp | white"),
        "lengthscale": (float, 0.15, "sq_exp correlation length, fraction of the domain width"),
        "amplitude": (float, 1.0, "pointwise prior variance"),
        "mean": (float, 0.0, "constant prior mean level"),
        "noising": (str, "prior", "noising covariance: prior (same as the prior) | white"),
    },
    "noise": {
        "sigma": (float, 0.05, "measurement noise standard deviation"),
    },
    "schedule": {
        "t_final": (float, 1.0, "diffusion horizon T"),
        "delta": (float, 0.005, "early-time truncation delta"),
        "n_steps": (int, 1000, "uniform reverse integration steps"),
        "beta_min": (float, 0.05, "speed function value at t = 0"),
        "beta_max": (float, 10.0, "speed function value at t = 1"),
    },
    "solver": {
        "cg_tol": (float, 1e-8, "relative tolerance of all inner conjugate-gradient solves"),
    },
    "sampler": {
        "dps_xi": (float, 1.0, "guidance strength for the denoiser-pullback method"),
        "proj_lambda": (float, 0.1, "data-consistency mixing weight for the projection method"),
    },
}


class ConfigError(ValueError):
    """Malformed or inconsistent problem configuration."""


@dataclass(frozen=True)
class Problem:
    kind: str = "inpainting"
    rows: int = 64
    cols: int = 64
    seed: int = 1
    mask_height: int = 20
    mask_width: int = 20
    kernel_size: int = 9
    kernel_sigma: float = 2.0
    n_angles: int = 8
    n_detectors: int = 32
    span_degrees: float = 45.0
    custom_operator: str = "identity"
    prior_kind: str = "sq_exp"
    lengthscale: float = 0.15
    amplitude: float = 1.0
    prior_mean: float = 0.0
    noising: str = "prior"
    noise_sigma: float = 0.05
    schedule: Schedule = field(default_factory=Schedule)
    cg_tol: float = 1e-8
    dps_xi: float = 1.0
    proj_lambda: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown problem kind {self.kind!r}")
        if self.prior_kind not in ("sq_exp", "white"):
            raise ConfigError(f"unknown prior kind {self.prior_kind!r}")
        if self.noising not in ("prior", "white"):
            raise ConfigError(f"unknown noising choice {self.noising!r}")
        if self.noise_sigma <= 0:
            raise ConfigError("noise sigma must be positive")
        if self.kind == "inpainting":
            if not (0 <= self.mask_height <= self.rows and 0 <= self.mask_width <= self.cols):
                raise ConfigError("mask block does not fit the grid")

    # -- geometry and operators ----------------------------------------------

    @property
    def shape(self) -> linop.GridShape:
        return linop.GridShape(self.rows, self.cols)

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def mask_array(self) -> np.ndarray:
        """Inpainting observation mask: zero on the centered hidden block."""
        mask = np.ones((self.rows, self.cols))
        r0 = (self.rows - self.mask_height) // 2
        c0 = (self.cols - self.mask_width) // 2
        mask[r0 : r0 + self.mask_height, c0 : c0 + self.mask_width] = 0.0
        return mask

    def forward_map(self) -> linop.LinearMap:
        if self.kind == "inpainting":
            return linop.mask_operator(self.shape, self.mask_array())
        if self.kind == "deblur":
            kern = linop.gaussian_kernel(self.kernel_size, self.kernel_sigma)
            return linop.blur_operator(self.shape, kern)
        if self.kind == "ct":
            return linop.radon_operator(self.shape, self.n_angles, self.n_detectors,
                                        self.span_degrees)
        if self.custom_operator == "identity":
            return linop.identity(self.n)
        if self.custom_operator == "broken-adjoint":
            kern = np.array([[0.0, 0.2, 0.0], [0.1, 0.5, 0.05], [0.0, 0.15, 0.0]])
            return linop.WrongAdjointMap(linop.blur_operator(self.shape, kern))
        raise ConfigError(f"unknown custom operator {self.custom_operator!r}")

    @property
    def m(self) -> int:
        if self.kind == "ct":
            return self.n_angles * self.n_detectors
        return self.n

    def measurement_grid_shape(self):
        if self.kind == "ct":
            return (self.n_angles, self.n_detectors)
        return (self.rows, self.cols)

    # -- statistics ------------------------------------------------------------

    def prior(self) -> GaussianPrior:
        if self.prior_kind == "sq_exp":
            cov = sq_exp_covariance(self.shape, self.lengthscale, self.amplitude)
        else:
            cov = scalar_covariance(self.n, self.amplitude)
        mean = None
        if self.prior_mean != 0.0:
            mean = np.full(self.n, self.prior_mean)
        return GaussianPrior(cov, mean=mean)

    def noising_cov(self):
        if self.noising == "prior":
            return self.prior().cov
        return scalar_covariance(self.n, 1.0)

    def noise_cov(self):
        return scalar_covariance(self.m, self.noise_sigma**2)

    def task_operators(self):
        from .taskops import TaskOperators

        return TaskOperators(self.forward_map(), self.noising_cov(), self.noise_cov(),
                             cg_tol=self.cg_tol)

    def synthesize(self, rng):
        """Ground truth from the prior and a noisy measurement of it."""
        from .gauss import sample_gaussian

        g = rng.generator() if hasattr(rng, "generator") else rng
        truth = self.prior().sample(g)
        A = self.forward_map()
        y = A.apply(truth) + sample_gaussian(self.noise_cov(), g)
        return truth, y


@dataclass(frozen=True)
class SamplingJob:
    """Picklable provider building per-worker path kits for run_ensemble."""

    problem: Problem
    y: np.ndarray

    def build(self, config: SamplerConfig) -> PathKit:
        prob = self.problem
        params = dict(config.method_params)
        cg_tol = params.pop("cg_tol", prob.cg_tol)
        A = prob.forward_map()
        C = prob.noising_cov()
        Gamma = prob.noise_cov()
        prior = prob.prior()
        ops = prob.task_operators()
        ops.reset_counters()
        ops = ops.set_measurement(self.y)
        setup_counts = ops.snapshot_counters()
        setup_counts["shift_data_ratio"] = ops.shift_data_ratio
        ops.reset_counters()
        pre_step = None
        if config.method == "ucos":
            r_model = gaussian_task_score(A, C, Gamma, prior, cg_tol=cg_tol)
            score_fn = ucos_drift(ops, r_model)
        elif config.method == "conditional":
            model = gaussian_conditional_score_exact(A, C, Gamma, prior, self.y, cg_tol=cg_tol)
            score_fn = conditional_drift(model)
        elif config.method == "sde_ald":
            prior_score = gaussian_prior_score(prior, C, cg_tol=cg_tol)
            score_fn = sde_ald_drift(ops, prior_score, self.y, **params)
        elif config.method == "dps":
            prior_score = gaussian_prior_score(prior, C, cg_tol=cg_tol)
            score_fn = dps_drift(ops, prior_score, self.y, xi=params.get("xi", prob.dps_xi))
        elif config.method == "proj":
            prior_score = gaussian_prior_score(prior, C, cg_tol=cg_tol)
            score_fn = conditional_drift(prior_score)
            pre_step = proj_pre_step(ops, self.y, params.get("lambda_mix", prob.proj_lambda),
                                     cg_tol=cg_tol)
        else:  # pragma: no cover - SamplerConfig already validates
            raise ConfigError(f"unknown method {config.method!r}")
        return PathKit(score_fn=score_fn, sched=config.schedule, C=C, pre_step=pre_step,
                       ops=ops, setup_counts=setup_counts)


# ---------------------------------------------------------------------------
# Flat key = value config files (configparser syntax, sections, no nesting).
# ---------------------------------------------------------------------------


def default_problem(kind: str, **overrides) -> Problem:
    """The documented defaults for a problem kind, with keyword overrides."""
    base = {
        "inpainting": {},
        "ct": {"rows": 32, "cols": 32, "n_angles": 8, "n_detectors": 32,
               "span_degrees": 45.0, "noising": "prior"},
        "deblur": {"rows": 32, "cols": 32, "kernel_size": 9, "kernel_sigma": 2.0},
        "custom": {"rows": 16, "cols": 16},
    }
    if kind not in base:
        raise ConfigError(f"unknown problem kind {kind!r}")
    fields = dict(base[kind])
    fields.update(overrides)
    return Problem(kind=kind, **fields)


_FIELD_BY_KEY = {
    ("problem", "kind"): "kind",
    ("problem", "rows"): "rows",
    ("problem", "cols"): "cols",
    ("problem", "seed"): "seed",
    ("problem", "mask_height"): "mask_height",
    ("problem", "mask_width"): "mask_width",
    ("problem", "kernel_size"): "kernel_size",
    ("problem", "kernel_sigma"): "kernel_sigma",
    ("problem", "n_angles"): "n_angles",
    ("problem", "n_detectors"): "n_detectors",
    ("problem", "span_degrees"): "span_degrees",
    ("problem", "custom_operator"): "custom_operator",
    ("prior", "kind"): "prior_kind",
    ("prior", "lengthscale"): "lengthscale",
    ("prior", "amplitude"): "amplitude",
    ("prior", "mean"): "prior_mean",
    ("prior", "noising"): "noising",
    ("noise", "sigma"): "noise_sigma",
    ("solver", "cg_tol"): "cg_tol",
    ("sampler", "dps_xi"): "dps_xi",
    ("sampler", "proj_lambda"): "proj_lambda",
}

_SCHEDULE_BY_KEY = {
    "t_final": "t_final",
    "delta": "delta",
    "n_steps": "n_steps",
    "beta_min": "beta_min",
    "beta_max": "beta_max",
}


def problem_to_config_text(problem: Problem, comments: bool = True) -> str:
    """Render a problem as a flat key = value file with documented keys."""
    out = io.StringIO()
    for section, keys in CONFIG_KEYS.items():
        out.write(f"[{section}]\n")
        for key, (parse, _default, doc) in keys.items():
            if section == "schedule":
                value = getattr(problem.schedule, _SCHEDULE_BY_KEY[key])
            else:
                value = getattr(problem, _FIELD_BY_KEY[(section, key)])
            if comments:
                out.write(f"# {doc}\n")
            out.write(f"{key} = {value}\n")
        out.write("\n")
    return out.getvalue()


def problem_from_config_text(text: str) -> Problem:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    fields = {}
    sched_fields = {}
    for section in parser.sections():
        if section not in CONFIG_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in CONFIG_KEYS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            parse = CONFIG_KEYS[section][key][0]
            try:
                value = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
            if section == "schedule":
                sched_fields[_SCHEDULE_BY_KEY[key]] = value
            else:
                fields[_FIELD_BY_KEY[(section, key)]] = value
    try:
        schedule = Schedule(**sched_fields)
        return Problem(schedule=schedule, **fields)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_problem(path) -> Problem:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return problem_from_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def config_reference_text() -> str:
    out = io.StringIO()
    out.write("Configuration keys (flat key = value, INI sections)\n\n")
    for section, keys in CONFIG_KEYS.items():
        out.write(f"[{section}]\n")
        for key, (_parse, default, doc) in keys.items():
            out.write(f"  {key:<16s} default {default!r:<12} {doc}\n")
        out.write("\n")
    return out.getvalue()

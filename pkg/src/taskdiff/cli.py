"""Command-line surface: validate, sample, bench-inpainting, convergence,
make-problem, stats, config-reference.

Exit codes: 0 ok, 1 configuration error, 2 validation failure, 3 sampling
failure.  Worker processes default to the logical core count; override with
--threads or the TASKDIFF_THREADS environment variable.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import gridio, linop, oracle, problems
from .diffusion import Schedule
from .gauss import RngStream
from .samplers import EnsembleFailure, SamplerConfig, default_workers, run_ensemble
from .scores import gaussian_task_score

# Reserved RNG stream blocks, far above per-path stream ids.
TRUTH_STREAM = 2**44
NOISE_STREAM = 2**44 + 1
EXACT_BASE = 2**45

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VALIDATION = 2
EXIT_SAMPLING = 3


def _load(path) -> problems.Problem:
    return problems.load_problem(path)


def _config_text(path) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _sampler_config(problem: problems.Problem, method: str, n: int,
                    n_steps: int | None = None) -> SamplerConfig:
    sched = problem.schedule
    if n_steps is not None:
        sched = Schedule(t_final=sched.t_final, delta=sched.delta, n_steps=n_steps,
                         beta_min=sched.beta_min, beta_max=sched.beta_max)
    params: dict = {}
    if method == "dps":
        params["xi"] = problem.dps_xi
    elif method == "proj":
        params["lambda_mix"] = problem.proj_lambda
    return SamplerConfig(method=method, schedule=sched, ensemble_size=n,
                         seed=problem.seed, method_params=params)


def _counters_row(ens):
    setup = ens.counters.get("setup", {})
    step = ens.counters.get("stepping", {})
    return {
        "forward_calls_setup": setup.get("forward_calls", 0),
        "adjoint_calls_setup": setup.get("adjoint_calls", 0),
        "forward_calls_stepping": step.get("forward_calls", 0),
        "adjoint_calls_stepping": step.get("adjoint_calls", 0),
    }


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        problem = _load(args.config)
        A = problem.forward_map()
    except problems.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = []
    adj = linop.validate_adjoint(A, trials=args.trials, tol=1e-10,
                                 rng=np.random.default_rng(problem.seed))
    rows.append(("forward_map_adjoint", adj.max_defect, adj.tol, adj.passed))
    print(f"{'PASS' if adj.passed else 'FAIL'}  forward_map_adjoint          "
          f"max defect {adj.max_defect:.3e} (tol {adj.tol:.1e})")
    suite = oracle.identity_suite(trials=args.trials, tol=1e-8,
                                  rng=np.random.default_rng(problem.seed + 1))
    for line in suite.lines():
        print(line)
    for r in suite.results:
        rows.append((r.name, r.max_defect, r.tol, r.passed))
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        gridio.write_csv(args.out, ["check", "max_defect", "tol", "passed"],
                         [(n, f"{d:.6e}", f"{t:.1e}", int(p)) for n, d, t, p in rows])
    ok = adj.passed and suite.passed
    print("validation:", "OK" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def cmd_sample(args) -> int:
    try:
        problem = _load(args.config)
        cfg_text = _config_text(args.config)
    except problems.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        y_grid = gridio.read_grid(args.measurement)
    except (OSError, ValueError) as exc:
        print(f"config error: cannot read measurement: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if y_grid.shape != problem.measurement_grid_shape():
        print(f"config error: measurement shape {y_grid.shape} != "
              f"{problem.measurement_grid_shape()}", file=sys.stderr)
        return EXIT_CONFIG
    cfg_hash = gridio.config_hash(cfg_text)
    os.makedirs(args.out, exist_ok=True)
    try:
        gridio.check_overwrite(args.out, cfg_hash, args.force)
    except FileExistsError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    n = args.n if args.n else 10
    config = _sampler_config(problem, args.method, n)
    job = problems.SamplingJob(problem=problem, y=y_grid.ravel())
    try:
        ens = run_ensemble(config, job, workers=args.threads)
    except EnsembleFailure as exc:
        print(f"sampling failure: {exc}", file=sys.stderr)
        return EXIT_SAMPLING
    for i, sample in enumerate(ens.samples):
        gridio.write_grid(os.path.join(args.out, f"sample_{i:04d}.grid"),
                          sample.reshape(problem.rows, problem.cols))
    manifest = {
        "method": args.method,
        "seed": problem.seed,
        "config_hash": cfg_hash,
        "csv_schema": gridio.CSV_SCHEMA_VERSION,
        "ensemble_size": int(ens.samples.shape[0]),
        "wall_time_s": ens.wall_time,
        "operator_calls": ens.counters,
        "n_redrawn": ens.n_redrawn,
        "n_failed": ens.n_failed,
        "defaults": {
            "prior_lengthscale": problem.lengthscale,
            "prior_amplitude": problem.amplitude,
            "noise_sigma": problem.noise_sigma,
        },
    }
    gridio.write_manifest(os.path.join(args.out, "manifest.json"), manifest)
    print(f"wrote {ens.samples.shape[0]} samples to {args.out} "
          f"({ens.wall_time:.1f}s, counters {ens.counters})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-inpainting
# ---------------------------------------------------------------------------


def run_inpainting_bench(problem: problems.Problem, n: int, workers: int | None = None,
                         methods=("sde_ald", "dps", "proj", "conditional", "ucos"),
                         n_steps: int | None = None, progress=print):
    """Ground-truth synthesis, all samplers plus the exact posterior, stats rows.

    Returns (rows, extras) where rows are CSV-ready dicts (both bias
    conventions) and extras carries the grids and the exact-posterior report.
    """
    truth, y = problem.synthesize(RngStream(problem.seed, TRUTH_STREAM))
    prior = problem.prior()
    A = problem.forward_map()
    Gamma = problem.noise_cov()
    post = oracle.exact_posterior(prior, A, Gamma, y, cg_tol=problem.cg_tol)

    t0 = time.perf_counter()
    exact_draws = np.stack([
        post.sample(RngStream(problem.seed, EXACT_BASE + i)) for i in range(n)
    ])
    wall_true = time.perf_counter() - t0
    rows = []
    reports = {}
    rep = oracle.ensemble_stats(exact_draws, truth=truth, posterior_mean=post.mean,
                                wall_time=wall_true)
    reports["true"] = rep
    rows.append({
        "method": "true",
        "bias_vs_truth": rep.bias,
        "std": rep.std,
        "bias_vs_posterior_mean": rep.bias_vs_posterior_mean,
        "wall_time_s": rep.wall_time,
        "n_samples": n,
        "n_redrawn": 0,
        "n_failed": 0,
        "forward_calls_setup": "",
        "adjoint_calls_setup": "",
        "forward_calls_stepping": "",
        "adjoint_calls_stepping": "",
    })
    job = problems.SamplingJob(problem=problem, y=y)
    for method in methods:
        config = _sampler_config(problem, method, n, n_steps=n_steps)
        progress(f"  running {method} (N={n}, steps={config.schedule.n_steps}) ...")
        ens = run_ensemble(config, job, workers=workers)
        rep = oracle.ensemble_stats(ens.samples, truth=truth, posterior_mean=post.mean,
                                    wall_time=ens.wall_time)
        reports[method] = rep
        row = {
            "method": method,
            "bias_vs_truth": rep.bias,
            "std": rep.std,
            "bias_vs_posterior_mean": rep.bias_vs_posterior_mean,
            "wall_time_s": ens.wall_time,
            "n_samples": int(ens.samples.shape[0]),
            "n_redrawn": ens.n_redrawn,
            "n_failed": ens.n_failed,
        }
        row.update(_counters_row(ens))
        rows.append(row)
        progress(f"    bias {rep.bias:.4f}  std {rep.std:.4f}  "
                 f"({ens.wall_time:.1f}s, stepping counters "
                 f"{ens.counters.get('stepping', {})})")
    extras = {"truth": truth, "y": y, "posterior_mean": post.mean, "reports": reports}
    return rows, extras


def cmd_bench_inpainting(args) -> int:
    try:
        problem = _load(args.config)
        cfg_text = _config_text(args.config)
    except problems.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if problem.kind != "inpainting":
        print("config error: bench-inpainting needs an inpainting problem", file=sys.stderr)
        return EXIT_CONFIG
    n = args.n if args.n else (50 if args.quick else 1000)
    os.makedirs(args.out, exist_ok=True)
    try:
        rows, extras = run_inpainting_bench(problem, n, workers=args.threads)
    except EnsembleFailure as exc:
        print(f"sampling failure: {exc}", file=sys.stderr)
        return EXIT_SAMPLING
    gridio.write_stats_csv(os.path.join(args.out, "bench.csv"), rows)
    gridio.write_grid(os.path.join(args.out, "truth.grid"),
                      extras["truth"].reshape(problem.rows, problem.cols))
    gridio.write_grid(os.path.join(args.out, "measurement.grid"),
                      extras["y"].reshape(problem.measurement_grid_shape()))
    gridio.write_grid(os.path.join(args.out, "posterior_mean.grid"),
                      extras["posterior_mean"].reshape(problem.rows, problem.cols))
    manifest = {
        "config_hash": gridio.config_hash(cfg_text),
        "csv_schema": gridio.CSV_SCHEMA_VERSION,
        "ensemble_size": n,
        "defaults": {
            "prior_lengthscale": problem.lengthscale,
            "prior_amplitude": problem.amplitude,
            "noise_sigma": problem.noise_sigma,
            "mask_block": [problem.mask_height, problem.mask_width],
        },
    }
    gridio.write_manifest(os.path.join(args.out, "manifest.json"), manifest)
    by_method = {r["method"]: r for r in rows}
    if by_method["ucos"]["std"] > by_method["conditional"]["std"] * 1.05:
        print("note: method std ordering ucos <= conditional violated (soft check)")
    ratio_b = by_method["ucos"]["bias_vs_truth"] / by_method["true"]["bias_vs_truth"]
    ratio_s = by_method["ucos"]["std"] / by_method["true"]["std"]
    print(f"ucos/true ratios: bias {ratio_b:.3f}, std {ratio_s:.3f}")
    print(f"wrote {os.path.join(args.out, 'bench.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# convergence
# ---------------------------------------------------------------------------


def coupled_step_study(problem: problems.Problem, ladder, n_paths: int = 32,
                       refine: int = 4, seed_block: int = 2**46):
    """Strong error against a finer reference under shared Brownian paths.

    All grids must nest inside the reference grid (ladder entries divide
    refine * max(ladder)); the coarse noise increment over an interval is the
    sum of the fine increments it contains.
    """
    from .samplers import reverse_em

    ladder = sorted(int(k) for k in ladder)
    ref_steps = refine * max(ladder)
    for k in ladder:
        if ref_steps % k != 0:
            raise ValueError(f"ladder entry {k} does not divide reference {ref_steps}")
    truth, y = problem.synthesize(RngStream(problem.seed, TRUTH_STREAM))
    job = problems.SamplingJob(problem=problem, y=y)
    base = problem.schedule

    def sched_with(steps):
        return Schedule(t_final=base.t_final, delta=base.delta, n_steps=steps,
                        beta_min=base.beta_min, beta_max=base.beta_max)

    kit = job.build(SamplerConfig(method="ucos", schedule=sched_with(ref_steps),
                                  seed=problem.seed))
    C = kit.C
    errors = {k: [] for k in ladder}
    for p in range(n_paths):
        g = RngStream(problem.seed, seed_block + p).generator()
        sched_ref = sched_with(ref_steps)
        taus = sched_ref.effective_grid()
        dref = taus[:-1] - taus[1:]
        fine = np.sqrt(dref)[:, None] * C.sqrt_apply(
            g.standard_normal((ref_steps, problem.n))
        )
        init = np.sqrt(-np.expm1(-sched_ref.effective_time(sched_ref.t_final))) * \
            C.sqrt_apply(g.standard_normal(problem.n))
        x_ref = reverse_em(kit.score_fn, sched_ref, C, g, initial=init,
                           noise_increments=fine)
        for k in ladder:
            group = ref_steps // k
            coarse = fine.reshape(k, group, problem.n).sum(axis=1)
            x_k = reverse_em(kit.score_fn, sched_with(k), C, g, initial=init,
                             noise_increments=coarse)
            errors[k].append(float(np.sum((x_k - x_ref) ** 2)))
    dts = np.array([(base.t_final - base.delta) / k for k in ladder])
    strong = np.array([np.sqrt(np.mean(errors[k])) for k in ladder])
    slope = float(np.polyfit(np.log(dts), np.log(strong), 1)[0])
    return dts, strong, slope


def horizon_sweep(problem: problems.Problem, t_values, n_paths: int = 128,
                  n_steps: int = 200, workers: int | None = None):
    """Ensemble-mean error against the exact posterior mean as T grows."""
    truth, y = problem.synthesize(RngStream(problem.seed, TRUTH_STREAM))
    prior = problem.prior()
    post = oracle.exact_posterior(prior, problem.forward_map(), problem.noise_cov(), y,
                                  cg_tol=problem.cg_tol)
    job = problems.SamplingJob(problem=problem, y=y)
    base = problem.schedule
    errs = []
    for T in t_values:
        sched = Schedule(t_final=float(T), delta=base.delta, n_steps=n_steps,
                         beta_min=base.beta_min, beta_max=base.beta_max)
        config = SamplerConfig(method="ucos", schedule=sched, ensemble_size=n_paths,
                               seed=problem.seed)
        ens = run_ensemble(config, job, workers=workers)
        errs.append(float(np.linalg.norm(ens.samples.mean(axis=0) - post.mean)))
    return np.asarray(t_values, dtype=float), np.array(errs)


def truncation_sweep(problem: problems.Problem, delta_values, n_paths: int = 128,
                     n_steps: int = 200, workers: int | None = None):
    """Moment-error growth as the early-time truncation delta increases."""
    truth, y = problem.synthesize(RngStream(problem.seed, TRUTH_STREAM))
    prior = problem.prior()
    post = oracle.exact_posterior(prior, problem.forward_map(), problem.noise_cov(), y,
                                  cg_tol=problem.cg_tol)
    post_std = oracle.posterior_std_dense(prior, problem.forward_map(), problem.noise_cov())
    job = problems.SamplingJob(problem=problem, y=y)
    base = problem.schedule
    errs = []
    for d in delta_values:
        sched = Schedule(t_final=base.t_final, delta=float(d), n_steps=n_steps,
                         beta_min=base.beta_min, beta_max=base.beta_max)
        config = SamplerConfig(method="ucos", schedule=sched, ensemble_size=n_paths,
                               seed=problem.seed)
        ens = run_ensemble(config, job, workers=workers)
        m = ens.samples.mean(axis=0)
        s = ens.samples.std(axis=0, ddof=1)
        errs.append(float(np.mean((m - post.mean) ** 2 + (s - post_std) ** 2)))
    return np.asarray(delta_values, dtype=float), np.array(errs)


def cmd_convergence(args) -> int:
    try:
        problem = _load(args.config)
    except problems.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    ladder = [int(k) for k in args.ladder.split(",")]
    dts, strong, slope = coupled_step_study(problem, ladder, n_paths=args.paths)
    gridio.write_csv(os.path.join(args.out, "step_ladder.csv"),
                     ["dt", "strong_error"], list(zip(dts, strong)))
    print(f"step ladder: log-log slope {slope:.3f}")
    if args.t_sweep:
        ts, errs = horizon_sweep(problem, [float(v) for v in args.t_sweep.split(",")],
                                 n_paths=args.paths, workers=args.threads)
        gridio.write_csv(os.path.join(args.out, "horizon_sweep.csv"),
                         ["t_final", "mean_error"], list(zip(ts, errs)))
        print("horizon sweep errors:", np.array2string(errs, precision=4))
    if args.delta_sweep:
        ds, errs = truncation_sweep(problem, [float(v) for v in args.delta_sweep.split(",")],
                                    n_paths=args.paths, workers=args.threads)
        gridio.write_csv(os.path.join(args.out, "truncation_sweep.csv"),
                         ["delta", "moment_error"], list(zip(ds, errs)))
        print("truncation sweep errors:", np.array2string(errs, precision=6))
    return EXIT_OK


# ---------------------------------------------------------------------------
# make-problem / stats / config-reference
# ---------------------------------------------------------------------------


def cmd_make_problem(args) -> int:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            print(f"config error: bad override {item!r}, expected section.key=value",
                  file=sys.stderr)
            return EXIT_CONFIG
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    try:
        problem = problems.default_problem(args.kind)
        text = problems.problem_to_config_text(problem)
        if overrides:
            import configparser

            parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
            parser.read_string(text)
            for key, value in overrides.items():
                section, _, name = key.partition(".")
                if not parser.has_section(section) or name not in problems.CONFIG_KEYS.get(section, {}):
                    print(f"config error: unknown key {key}", file=sys.stderr)
                    return EXIT_CONFIG
                parser.set(section, name, value)
            problem = problems.problem_from_config_text(_render_parser(parser))
            text = problems.problem_to_config_text(problem)
    except problems.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(f"wrote {args.out}")
    return EXIT_OK


def _render_parser(parser) -> str:
    import io

    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def cmd_stats(args) -> int:
    import glob

    files = sorted(glob.glob(os.path.join(args.ensemble_dir, "sample_*.grid")))
    if not files:
        print(f"config error: no sample_*.grid files in {args.ensemble_dir}",
              file=sys.stderr)
        return EXIT_CONFIG
    samples = np.stack([gridio.read_grid(f).ravel() for f in files])
    truth = gridio.read_grid(args.truth).ravel() if args.truth else None
    pmean = gridio.read_grid(args.posterior_mean).ravel() if args.posterior_mean else None
    try:
        rep = oracle.ensemble_stats(samples, truth=truth, posterior_mean=pmean)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    row = {
        "method": os.path.basename(os.path.normpath(args.ensemble_dir)),
        "bias_vs_truth": rep.bias if truth is not None else "",
        "std": rep.std,
        "bias_vs_posterior_mean": rep.bias_vs_posterior_mean
        if rep.bias_vs_posterior_mean is not None else "",
        "n_samples": samples.shape[0],
        "n_redrawn": 0,
        "n_failed": 0,
    }
    gridio.write_stats_csv(args.out, [row])
    print(f"bias {row['bias_vs_truth']}  std {rep.std:.6f} -> {args.out}")
    return EXIT_OK


def cmd_config_reference(args) -> int:
    print(problems.config_reference_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskdiff",
        description="Posterior sampling for linear Gaussian inverse problems "
                    "with score-based diffusion (matrix-free).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="run adjoint and operator-identity checks")
    p.add_argument("--config", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--out", help="optional CSV report path")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("sample", help="draw a posterior ensemble for a measurement")
    p.add_argument("--config", required=True)
    p.add_argument("--method", required=True,
                   choices=["ucos", "conditional", "sde_ald", "dps", "proj"])
    p.add_argument("--measurement", required=True, help="grid file with the data")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, help="ensemble size (default 10)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: TASKDIFF_THREADS or all cores)")
    p.add_argument("--force", action="store_true",
                   help="overwrite results from a different config")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("bench-inpainting", help="run all methods plus the exact posterior")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="ensemble size (default 1000; 50 with --quick)")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_bench_inpainting)

    p = sub.add_parser("convergence", help="step-size ladder and horizon/truncation sweeps")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ladder", default="25,50,100,200",
                   help="comma-separated reverse step counts")
    p.add_argument("--t-sweep", default="", help="comma-separated horizons T")
    p.add_argument("--delta-sweep", default="", help="comma-separated truncations delta")
    p.add_argument("--paths", type=int, default=32)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_convergence)

    p = sub.add_parser("make-problem", help="write a documented default config")
    p.add_argument("--kind", required=True, choices=list(problems.KINDS))
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="section.key=value",
                   help="override a config key")
    p.set_defaults(fn=cmd_make_problem)

    p = sub.add_parser("stats", help="summarize a stored ensemble")
    p.add_argument("--ensemble-dir", required=True)
    p.add_argument("--truth", help="ground-truth grid file")
    p.add_argument("--posterior-mean", help="exact posterior mean grid file")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("config-reference", help="print all documented config keys")
    p.set_defaults(fn=cmd_config_reference)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

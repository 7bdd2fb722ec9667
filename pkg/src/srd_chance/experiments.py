"""Experiment drivers behind the CLI commands.

Every driver returns its rows and writes CSV files whose first line is a
comment with the config hash and sampler metadata, followed by a header
row.  Wallclock times go to ``timing.csv`` only, so all other files are
byte-identical across reruns and thread counts.
"""

from __future__ import annotations

import csv
import math
import os
import time
from typing import Iterable

import numpy as np

from . import oracles
from .config import ExperimentConfig
from .optimizer import SqpConfig, solve_sqp
from .problems import BilinearProblem, LinearProblem, field_to_csv
from .random_field import MC, QMC_HALTON, chi_cdf, sphere_samples
from .srd import estimate_mc, estimate_srd, variance_report

SAMPLER_NOTE = ("qmc=halton-unscrambled start=1+seed*N inverse-normal=ndtri; mc=pcg64(seed); "
                "reference=srd-qmc seed=1")


# ----------------------------------------------------------------------
# output helpers
# ----------------------------------------------------------------------

def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header: list, rows: Iterable, cfg: ExperimentConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_sha256={cfg.sha256()} {SAMPLER_NOTE}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(row[h]) for h in header])


class Timer:
    """Collects wallclock entries for the ``timing.csv`` sidecar."""

    def __init__(self):
        self.rows = []

    def record(self, label: str, start: float) -> None:
        self.rows.append(dict(task=label, wallclock_ms=round((time.perf_counter() - start) * 1e3, 3)))

    def write(self, out_dir) -> None:
        with open(os.path.join(out_dir, "timing.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "wallclock_ms"])
            for r in self.rows:
                w.writerow([r["task"], r["wallclock_ms"]])


# ----------------------------------------------------------------------
# problem construction and single estimates
# ----------------------------------------------------------------------

def build_problem(cfg: ExperimentConfig, K: int | None = None):
    if cfg.problem == "linear":
        return LinearProblem(cfg.n, cfg.K if K is None else K, cfg.lower, cfg.upper, gamma=cfg.gamma,
                             alpha_reg=cfg.alpha_reg, constraint_stride=cfg.constraint_stride,
                             noise_amplitude=cfg.noise_amplitude)
    return BilinearProblem(cfg.n, cfg.upper, alpha_cov=cfg.alpha_cov, constraint_stride=cfg.constraint_stride,
                           noise_amplitude=cfg.noise_amplitude)


def problem_dim(problem) -> int:
    return problem.K if problem.kind == "linear" else problem.dof


def single_estimate(problem, estimator: str, N: int, seed: int, u=None, workers: int = 1):
    """One probability estimate with the named estimator."""
    K = problem_dim(problem)
    u = problem.initial_control() if u is None else u
    if estimator == "srd-qmc":
        return problem.probability(u, sphere_samples(QMC_HALTON, seed, N, K), workers=workers)
    if estimator == "srd-mc":
        return problem.probability(u, sphere_samples(MC, seed, N, K), workers=workers)
    if estimator == "mc":
        return problem.probability(u, sphere_samples(MC, seed, N, K).with_radii(), estimator="mc",
                                   workers=workers)
    raise ValueError(f"unknown estimator {estimator!r}")


def oracle_estimate(cfg: ExperimentConfig, estimator: str, N: int, seed: int, K: int | None = None):
    K = cfg.K if K is None else K
    kind = QMC_HALTON if estimator == "srd-qmc" else MC
    S = sphere_samples(kind, seed, N, K)
    if cfg.mode == "ball":
        if estimator == "mc":
            return estimate_mc(oracles.ball_indicators(S.with_radii().gaussian(), cfg.oracle_radius))
        return estimate_srd(oracles.ball_profile(S.directions, cfg.oracle_radius), K)
    if estimator == "mc":
        return estimate_mc(oracles.halfspace_indicators(S.with_radii().gaussian(), cfg.oracle_offset))
    return estimate_srd(oracles.halfspace_profile(S.directions, cfg.oracle_offset), K)


def _estimate_row(cfg, estimator, N, K, seed, est):
    return dict(problem=cfg.problem if cfg.mode == "problem" else cfg.mode, estimator=estimator, N=N, K=K,
                seed=seed, p_hat=est.value, var=est.variance, rho_inf=est.rho_inf, rho_sup=est.rho_sup)


ESTIMATE_HEADER = ["problem", "estimator", "N", "K", "seed", "p_hat", "var", "rho_inf", "rho_sup"]


def cmd_estimate(cfg: ExperimentConfig, out_dir) -> list:
    timer = Timer()
    rows = []
    problem = build_problem(cfg) if cfg.mode == "problem" else None
    K = problem_dim(problem) if problem is not None else cfg.K
    for est_name in cfg.estimators:
        t0 = time.perf_counter()
        if problem is None:
            est = oracle_estimate(cfg, est_name, cfg.N, cfg.seed)
        else:
            est = single_estimate(problem, est_name, cfg.N, cfg.seed, workers=cfg.threads)
        timer.record(f"estimate {est_name}", t0)
        rows.append(_estimate_row(cfg, est_name, cfg.N, K, cfg.seed, est))
    write_csv(os.path.join(out_dir, "estimate.csv"), ESTIMATE_HEADER, rows, cfg)
    timer.write(out_dir)
    return rows


# ----------------------------------------------------------------------
# convergence studies
# ----------------------------------------------------------------------

def reference_probability(problem, cfg: ExperimentConfig, u=None) -> float:
    return single_estimate(problem, "srd-qmc", cfg.reference_N, 1, u=u, workers=cfg.threads).value


def rmse_curve(problem, estimator: str, schedule, repetitions: int, base_seed: int, p_ref: float,
               workers: int = 1) -> list:
    rows = []
    for N in schedule:
        vals = np.array([single_estimate(problem, estimator, N, base_seed + r, workers=workers).value
                         for r in range(repetitions)])
        rows.append(dict(N=N, R=repetitions, rmse=float(np.sqrt(np.mean((vals - p_ref) ** 2))),
                         mean_p=float(vals.mean()), p_ref=p_ref))
    return rows


def loglog_slope(N, rmse, lo=1e2, hi=1e4):
    """Least-squares slope and intercept of ``log10 rmse`` vs ``log10 N`` on ``[lo, hi]``."""
    N, rmse = np.asarray(N, float), np.asarray(rmse, float)
    sel = (N >= lo) & (N <= hi) & (rmse > 0)
    b, a = np.polyfit(np.log10(N[sel]), np.log10(rmse[sel]), 1)
    return float(b), float(a)


def cmd_converge(cfg: ExperimentConfig, out_dir) -> tuple[list, list]:
    timer = Timer()
    base = build_problem(cfg)
    rows, fits = [], []
    for half in cfg.converge_bounds:
        problem = base.with_bounds(-half, half) if cfg.problem == "linear" else base.with_bounds(-np.inf, half)
        t0 = time.perf_counter()
        p_ref = reference_probability(problem, cfg)
        timer.record(f"reference bound={half}", t0)
        for est_name in cfg.estimators:
            t0 = time.perf_counter()
            curve = rmse_curve(problem, est_name, cfg.N_schedule, cfg.repetitions, cfg.seed, p_ref, cfg.threads)
            timer.record(f"converge bound={half} {est_name}", t0)
            for r in curve:
                rows.append(dict(bound=half, estimator=est_name, **r))
            slope, icpt = loglog_slope([r["N"] for r in curve], [r["rmse"] for r in curve])
            fits.append(dict(bound=half, estimator=est_name, slope=slope, intercept=icpt, p_ref=p_ref))
    write_csv(os.path.join(out_dir, "converge.csv"), ["bound", "estimator", "N", "R", "rmse", "mean_p", "p_ref"],
              rows, cfg)
    write_csv(os.path.join(out_dir, "converge_fit.csv"), ["bound", "estimator", "slope", "intercept", "p_ref"],
              fits, cfg)
    timer.write(out_dir)
    return rows, fits


def cmd_kl_study(cfg: ExperimentConfig, out_dir) -> tuple[list, list]:
    if cfg.problem != "linear":
        raise ValueError("the KL study needs the linear problem")
    timer = Timer()
    full = build_problem(cfg, K=cfg.K_reference)
    t0 = time.perf_counter()
    p_ref = reference_probability(full, cfg)
    timer.record("reference", t0)
    rows, floors = [], []
    for K in cfg.K_list:
        sub = full.with_K(K)
        t0 = time.perf_counter()
        curve = rmse_curve(sub, "srd-qmc", cfg.N_schedule, cfg.repetitions, cfg.seed, p_ref, cfg.threads)
        timer.record(f"kl K={K}", t0)
        for r in curve:
            rows.append(dict(K=K, **r))
        floors.append(dict(K=K, floor=curve[-1]["rmse"], bias=curve[-1]["mean_p"] - p_ref, p_ref=p_ref,
                           lambda_ratio=float(full.spectrum[K - 1] / full.spectrum[0])))
    write_csv(os.path.join(out_dir, "kl_study.csv"), ["K", "N", "R", "rmse", "mean_p", "p_ref"], rows, cfg)
    write_csv(os.path.join(out_dir, "kl_floor.csv"), ["K", "floor", "bias", "p_ref", "lambda_ratio"], floors, cfg)
    spec_rows = [dict(k=k + 1, lambda_state=float(full.spectrum[k]),
                      lambda_input=float(full.model.basis().eigenvalues[k]))
                 for k in range(min(cfg.K_reference, full.spectrum.size, full.model.mean.size))]
    write_csv(os.path.join(out_dir, "kl_spectrum.csv"), ["k", "lambda_state", "lambda_input"], spec_rows, cfg)
    timer.write(out_dir)
    return rows, floors


# ----------------------------------------------------------------------
# variance study
# ----------------------------------------------------------------------

VARIANCE_HEADER = ["bound", "p_ref", "V_MC", "V_SRD", "V_MC_norm", "V_SRD_norm", "ratio", "range_variance_bound",
                   "spread_variance_bound", "range_bound_violations", "R", "N"]


def variance_row(pairs, label, p_ref, N):
    """Aggregate per-replicate ``(srd, mc)`` estimates into one study row."""
    reports = [variance_report(s, m) for s, m in pairs]
    v_srd = float(np.mean([r.V_SRD for r in reports]))
    v_mc = float(np.mean([r.V_MC for r in reports]))
    q = 1.0 - p_ref
    return dict(bound=label, p_ref=p_ref, V_MC=v_mc, V_SRD=v_srd,
                V_MC_norm=v_mc / q if q > 0 else math.inf, V_SRD_norm=v_srd / q if q > 0 else math.inf,
                ratio=v_srd / v_mc if v_mc > 0 else math.nan,
                range_variance_bound=float(np.mean([r.range_variance_bound for r in reports])),
                spread_variance_bound=float(np.mean([r.spread_variance_bound for r in reports])),
                range_bound_violations=int(sum(r.range_bound_violated for r in reports)), R=len(reports), N=N)


def cmd_variance_study(cfg: ExperimentConfig, out_dir) -> list:
    timer = Timer()
    rows = []
    N, R = cfg.variance_N, cfg.variance_repetitions
    if cfg.mode != "problem":
        t0 = time.perf_counter()
        pairs = [(oracle_estimate(cfg, "srd-mc", N, cfg.seed + r), oracle_estimate(cfg, "mc", N, cfg.seed + r))
                 for r in range(R)]
        if cfg.mode == "ball":
            p_ref = float(chi_cdf(cfg.oracle_radius, cfg.K))
        else:
            p_ref = 0.5 if cfg.oracle_offset == 0 else float(np.mean([s.value for s, _ in pairs]))
        rows.append(variance_row(pairs, cfg.mode, p_ref, N))
        timer.record(f"variance {cfg.mode}", t0)
    else:
        base = build_problem(cfg)
        for half in cfg.variance_bounds:
            problem = base.with_bounds(-half, half) if cfg.problem == "linear" else base.with_bounds(-np.inf, half)
            t0 = time.perf_counter()
            p_ref = reference_probability(problem, cfg)
            pairs = [(single_estimate(problem, "srd-mc", N, cfg.seed + r, workers=cfg.threads),
                      single_estimate(problem, "mc", N, cfg.seed + r, workers=cfg.threads)) for r in range(R)]
            rows.append(variance_row(pairs, half, p_ref, N))
            timer.record(f"variance bound={half}", t0)
    write_csv(os.path.join(out_dir, "variance_study.csv"), VARIANCE_HEADER, rows, cfg)
    timer.write(out_dir)
    return rows


# ----------------------------------------------------------------------
# optimization
# ----------------------------------------------------------------------

def unconstrained_minimizer(problem):
    """Exact minimizer of the (quadratic) objective."""
    u = problem.initial_control()
    return u - problem.hessian_solve(problem.objective_gradient(u))


def state_max_profile(problem, u, n_samples: int, seed: int):
    """``max over x1`` of sampled states, per ``x2`` row (and of the mean)."""
    g = problem.grid
    if problem.kind == "linear":
        z = np.random.default_rng(seed).standard_normal((n_samples, problem.K))
        Y = problem.state_samples(u, z)
    else:
        S = sphere_samples(MC, seed, n_samples, problem.dof).with_radii()
        Y = problem.state_samples(u, S)
    full = g.extend(Y).reshape(n_samples, g.n, g.n)
    mean = g.extend(problem.mean_state(u)).reshape(g.n, g.n)
    return g.x2[:: g.n], mean.max(axis=1), full.max(axis=2), Y


def cmd_optimize(cfg: ExperimentConfig, out_dir) -> list:
    timer = Timer()
    problem = build_problem(cfg)
    if problem.kind == "bilinear":
        problem = problem.with_bounds(-np.inf, cfg.upper)
    K = problem_dim(problem)
    samples = sphere_samples(MC, cfg.seed, cfg.opt_N, K)
    validation = sphere_samples(MC, cfg.seed + 1, cfg.opt_N, K)
    summary = []
    t0 = time.perf_counter()
    u_free = unconstrained_minimizer(problem)
    phi_free = problem.probability(u_free, samples, workers=cfg.threads).value
    summary.append(dict(p="unconstrained", objective=problem.objective(u_free), phi=phi_free,
                        exceedance=1 - phi_free, reason="closed_form", iterations=0, kkt=0.0, multiplier=0.0,
                        phi_validation=problem.probability(u_free, validation, workers=cfg.threads).value,
                        sample_exceed_fraction=math.nan))
    timer.record("unconstrained", t0)
    n_plot = 100
    for p in cfg.p_list:
        t0 = time.perf_counter()
        sqp = SqpConfig(p=p, max_iter=cfg.max_iter, kkt_tol=cfg.kkt_tol, workers=cfg.threads)
        rep = solve_sqp(problem, sqp, samples, validation_samples=validation)
        timer.record(f"optimize p={p}", t0)
        tag = f"p{p:g}"
        comment = f"config_sha256={cfg.sha256()} p={p!r}"
        field_to_csv(problem.grid, rep.u, os.path.join(out_dir, f"control_{tag}.csv"), comment)
        field_to_csv(problem.grid, problem.mean_state(rep.u), os.path.join(out_dir, f"mean_state_{tag}.csv"),
                     comment)
        rep.history_to_csv(os.path.join(out_dir, f"history_{tag}.csv"), comment)
        x2, mean_max, sample_max, Y = state_max_profile(problem, rep.u, n_plot, cfg.seed + 2)
        exceed = np.any((Y[:, problem.points] > problem.upper) | (Y[:, problem.points] < problem.lower), axis=1)
        prof_rows = [dict({"x2": x2[j], "mean_max": mean_max[j]},
                          **{f"sample_{i + 1}": sample_max[i, j] for i in range(n_plot)}) for j in range(x2.size)]
        write_csv(os.path.join(out_dir, f"state_max_{tag}.csv"),
                  ["x2", "mean_max"] + [f"sample_{i + 1}" for i in range(n_plot)], prof_rows, cfg)
        summary.append(dict(p=p, objective=rep.objective, phi=rep.phi, exceedance=1 - rep.phi, reason=rep.reason,
                            iterations=rep.iterations, kkt=rep.kkt, multiplier=rep.multiplier,
                            phi_validation=rep.validation["phi"], sample_exceed_fraction=float(exceed.mean())))
    write_csv(os.path.join(out_dir, "objective_vs_p.csv"),
              ["p", "objective", "phi", "exceedance", "reason", "iterations", "kkt", "multiplier", "phi_validation",
               "sample_exceed_fraction"], summary, cfg)
    timer.write(out_dir)
    return summary

"""SQP with damped BFGS curvature for ``min J(u)  s.t.  phi(u) >= p``.

The probability is the SRD sample average over a frozen sample set, so the
problem solved is a deterministic nonlinear program.  The model Hessian
starts from the exact objective Hessian and BFGS learns the remaining
Lagrangian curvature ``-mu * Hess phi``.  Inverse model applications use
the Woodbury identity around the objective Hessian solve.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InfeasibleStartError, SlaterError
from .random_field import SampleSet

CONVERGED = "converged"
MAX_ITER = "max_iterations"
LINE_SEARCH = "line_search_failed"
DEGENERATE = "vanishing_constraint_gradient"


@dataclass(frozen=True)
class SqpConfig:
    """Solver settings.

    ``bfgs_memory`` of ``None`` keeps every update (full-matrix BFGS);
    an integer keeps only the most recent pairs.
    """

    p: float = 0.9
    max_iter: int = 100
    kkt_tol: float = 1e-6
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    penalty_factor: float = 1.5
    bfgs_memory: Optional[int] = None
    powell_threshold: float = 0.2
    box: tuple = (None, None)
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"target probability must lie in (0, 1), got {self.p}")
        if self.kkt_tol <= 0 or self.max_iter < 0:
            raise ValueError("kkt_tol must be positive and max_iter non-negative")
        if not (0 < self.armijo < 1 and 0 < self.backtrack < 1):
            raise ValueError("line-search constants must lie in (0, 1)")
        if self.bfgs_memory is not None and self.bfgs_memory < 1:
            raise ValueError("bfgs_memory must be positive or None")


@dataclass
class SolveReport:
    u: np.ndarray
    multiplier: float
    reason: str
    history: list = field(default_factory=list)
    phi: float = math.nan
    objective: float = math.nan
    kkt: float = math.nan
    validation: Optional[dict] = None

    @property
    def iterations(self) -> int:
        return len(self.history) - 1

    def history_to_csv(self, path, comment: str = "") -> None:
        keys = ["iteration", "objective", "phi", "kkt", "step_norm", "merit", "multiplier", "penalty",
                "step_length"]
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(keys)
            for row in self.history:
                w.writerow([_fmt(row[k]) for k in keys])


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


class _BfgsModel:
    """``B = H + sum_i (r_i r_i^T / s_i.r_i - b_i b_i^T / s_i.b_i)``, ``b_i = B_i s_i``."""

    def __init__(self, problem, memory):
        self.problem = problem
        self.memory = memory
        self.pairs: list[tuple[np.ndarray, np.ndarray]] = []
        self._rebuild()

    def _rebuild(self):
        Z, coef = [], []
        for s, r in self.pairs:
            b = self._apply(s, Z, coef)
            Z += [b, r]
            coef += [-1.0 / float(s @ b), 1.0 / float(s @ r)]
        self.Z, self.coef = Z, coef
        if Z:
            Zm = np.array(Z)
            self.HZ = self.problem.hessian_solve(Zm)
            self.HZ = np.atleast_2d(self.HZ)
            S = np.diag(1.0 / np.array(coef)) + Zm @ self.HZ.T
            self.S = S
        else:
            self.HZ = None

    def _apply(self, x, Z, coef):
        out = self.problem.hessian_apply(x)
        for z, c in zip(Z, coef):
            out = out + c * float(z @ x) * z
        return out

    def apply(self, x):
        return self._apply(x, self.Z, self.coef)

    def solve(self, x):
        y = self.problem.hessian_solve(x)
        if self.HZ is None:
            return y
        t = np.linalg.solve(self.S, self.HZ @ x)
        return y - self.HZ.T @ t

    def update(self, s, r, threshold):
        """Powell-damped update; returns the damping factor used."""
        Bs = self.apply(s)
        sBs = float(s @ Bs)
        sr = float(s @ r)
        if sBs <= 0 or not np.isfinite(sBs):
            return 0.0
        theta = 1.0
        if sr < threshold * sBs:
            theta = (1.0 - threshold) * sBs / (sBs - sr)
            r = theta * r + (1.0 - theta) * Bs
        self.pairs.append((s.copy(), r.copy()))
        if self.memory is not None and len(self.pairs) > self.memory:
            self.pairs = self.pairs[-self.memory:]
            self._rebuild()
        else:
            b = Bs
            self.Z += [b, r.copy()]
            self.coef += [-1.0 / sBs, 1.0 / float(s @ r)]
            Zm = np.array(self.Z)
            self.HZ = np.atleast_2d(self.problem.hessian_solve(Zm))
            self.S = np.diag(1.0 / np.array(self.coef)) + Zm @ self.HZ.T
        return theta


def _project(u, box):
    lo, hi = box
    if lo is None and hi is None:
        return u
    return np.clip(u, -np.inf if lo is None else lo, np.inf if hi is None else hi)


def kkt_from_parts(problem, grad_J, grad_phi, phi, mu, p) -> float:
    """``|grad J - mu grad phi|_* + |mu (phi - p)| + max(0, p - phi) + max(0, -mu)``."""
    return (problem.dual_norm(grad_J - mu * grad_phi) + abs(mu * (phi - p)) + max(0.0, p - phi)
            + max(0.0, -mu))


def kkt_residual(problem, u, multiplier: float, sample_set: SampleSet, p: float) -> float:
    est = problem.probability(u, sample_set, gradient=True)
    return kkt_from_parts(problem, problem.objective_gradient(u), est.gradient, est.value, multiplier, p)


def _evaluate(problem, u, samples, workers, need_gradient=True):
    J = problem.objective(u)
    est = problem.probability(u, samples, gradient=need_gradient, workers=workers)
    return J, est


def solve_sqp(problem, config: SqpConfig, sample_set: SampleSet, u_init=None,
              validation_samples: Optional[SampleSet] = None) -> SolveReport:
    """Run SQP from ``u_init`` (default: the problem's initial control)."""
    p = config.p
    u = np.array(problem.initial_control() if u_init is None else u_init, dtype=float)
    u = _project(u, config.box)
    if problem.slater_margin(u) <= 0:
        u = _project(problem.restore(u), config.box)
        if problem.slater_margin(u) <= 0:
            raise InfeasibleStartError("restoration left the mean state on the bounds")
    model = _BfgsModel(problem, config.bfgs_memory)
    J, est = _evaluate(problem, u, sample_set, config.workers)
    g, phi, c = problem.objective_gradient(u), est.value, est.gradient
    nu = 0.0
    history = []
    reason, mu = MAX_ITER, 0.0
    kkt = math.nan
    step_norm, step_len = 0.0, 0.0
    for it in range(config.max_iter + 1):
        d0 = -model.solve(g)
        viol = phi + float(c @ d0) - p
        Bc = model.solve(c)
        cBc = float(c @ Bc)
        if viol >= 0:
            mu, d = 0.0, d0
        elif cBc > 1e-300:
            mu = -viol / cBc
            d = d0 + mu * Bc
        else:
            mu, d = 0.0, d0
        kkt = kkt_from_parts(problem, g, c, phi, mu, p)
        nu = max(nu, config.penalty_factor * mu)
        merit = J + nu * max(0.0, p - phi)
        history.append(dict(iteration=it, objective=J, phi=phi, kkt=kkt, step_norm=step_norm, merit=merit,
                            multiplier=mu, penalty=nu, step_length=step_len))
        if kkt <= config.kkt_tol:
            reason = CONVERGED
            break
        if it == config.max_iter:
            break
        if viol < 0 and cBc <= 1e-300:
            reason = DEGENERATE
            break
        slope = float(g @ d) - nu * max(0.0, p - phi)
        t = 1.0
        accepted = False
        for _ in range(config.max_backtracks):
            u_t = _project(u + t * d, config.box)
            try:
                J_t, est_t = _evaluate(problem, u_t, sample_set, config.workers)
            except (SlaterError, ArithmeticError):
                t *= config.backtrack
                continue
            merit_t = J_t + nu * max(0.0, p - est_t.value)
            if merit_t <= merit + config.armijo * t * min(slope, 0.0):
                accepted = True
                break
            t *= config.backtrack
        if not accepted:
            reason = LINE_SEARCH
            break
        g_t = problem.objective_gradient(u_t)
        s = u_t - u
        r = (g_t - mu * est_t.gradient) - (g - mu * c)
        model.update(s, r, config.powell_threshold)
        step_norm = math.sqrt(max(float(s @ problem.hessian_apply(s)), 0.0))
        step_len = t
        u, J, est = u_t, J_t, est_t
        g, phi, c = g_t, est.value, est.gradient
    report = SolveReport(u=u, multiplier=mu, reason=reason, history=history, phi=phi, objective=J, kkt=kkt)
    if validation_samples is not None:
        v = problem.probability(u, validation_samples, workers=config.workers)
        report.validation = dict(N=v.N, phi=v.value, standard_error=v.standard_error)
    return report

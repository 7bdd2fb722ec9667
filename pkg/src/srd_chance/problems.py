"""The two chance-constrained control problems.

* :class:`LinearProblem`: ``-Laplace y = f + u`` on the unit square with a
  random Neumann flux on ``x1 = 0`` and homogeneous Dirichlet data
  elsewhere, discretized by the five-point stencil.  The noise enters
  linearly and the state covariance is independent of ``u``.
* :class:`BilinearProblem`: ``-Laplace y + u y = f + xi`` with a random
  volume source and P1 finite elements; the control multiplies the state.

Both expose the same interface to the optimizer: ``objective``,
``objective_gradient``, ``hessian_apply``/``hessian_solve`` (exact
objective Hessian), ``slater_margin``,
``dual_norm``, ``probability`` and ``restore``.
"""

from __future__ import annotations

import math
import threading
import warnings
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import mesh
from .errors import InfeasibleStartError
from .random_field import GaussianFieldModel, KLBasis, SampleSet, state_kl
from .srd import (ProbabilityEstimate, RayCaster, estimate_mc, estimate_srd, gradient_weights,
                  grad_srd_linear, radial_profile)


def nominal_control(grid: mesh.Grid) -> np.ndarray:
    """``u = sin(2 pi x1) cos(pi x2) / 5`` on the free nodes."""
    return grid.restrict(grid.field(lambda a, b: 0.2 * np.sin(2 * np.pi * a) * np.cos(np.pi * b)))


def linear_target(grid: mesh.Grid) -> np.ndarray:
    return grid.field(lambda a, b: 0.1 * np.cos(2 * np.pi * a) * np.sin(2 * np.pi * b))


def bilinear_target(grid: mesh.Grid) -> np.ndarray:
    return grid.field(lambda a, b: np.sin(2 * np.pi * a) * np.sin(2 * np.pi * b))


def _bound_array(value, M):
    arr = np.broadcast_to(np.asarray(value, float), (M,)).copy()
    arr.setflags(write=False)
    return arr


def spatial_blocks(grid: mesh.Grid, size: int = 8) -> np.ndarray:
    """Label each constraint point by the ``size x size`` node block holding it."""
    p = grid.constraint_points
    i, j = p % grid.n, p // grid.n
    return (j // size) * (grid.n // size + 1) + i // size


def field_to_csv(grid: mesh.Grid, values: np.ndarray, path, header_comment: str = "") -> None:
    """Write a full grid field as ``x1,x2,value`` rows."""
    values = np.asarray(values, float)
    if values.size == grid.num_free:
        values = grid.extend(values)
    with open(path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("x1,x2,value\n")
        for a, b, v in zip(grid.x1, grid.x2, values):
            fh.write(f"{a:.10g},{b:.10g},{v:.17g}\n")


# ----------------------------------------------------------------------
# linear problem
# ----------------------------------------------------------------------

class LinearProblem:
    """Tracking problem with random Neumann data, controls on the free nodes.

    The symmetrized stencil scales the Neumann rows by 1/2, so the control
    enters the right-hand side as ``w * u`` (``C = diag(w)``).  State and
    control norms use trapezoid weights.
    """

    kind = "linear"

    def __init__(self, n: int = 128, K: int = 20, lower=-0.3, upper=0.3, *, gamma: float = 4.0,
                 alpha_reg: float = 1e-5, constraint_stride: int = 1, f=None, xi0=None,
                 noise_amplitude: float = 1.0):
        self.grid = g = mesh.build_grid(n, mesh.LINEAR_NEUMANN, constraint_stride)
        if np.any(np.asarray(lower) >= np.asarray(upper)):
            raise ValueError("lower bound must be below the upper bound")
        self.alpha_reg = float(alpha_reg)
        self.A = mesh.assemble_laplacian_mixed(g)
        self.fac = mesh.factorize(self.A)
        self.w = mesh.rhs_weights(g)
        self.B = mesh.injection_matrix(g)
        self.quad_full = mesh.trapezoid_weights(g)
        self.quad = g.restrict(self.quad_full)
        self.y_d = linear_target(g)
        self.f = np.zeros(g.num_free) if f is None else np.asarray(f, float)
        self.model = GaussianFieldModel.boundary(g, gamma, xi0)
        self.noise_amplitude = float(noise_amplitude)
        basis, info = state_kl(self.fac, self.B, self.model, K, self.quad)
        self.state_basis: KLBasis = basis
        self.spectrum = info["spectrum"] * self.noise_amplitude ** 2
        self.factor = info["factor"] * self.noise_amplitude
        self.K = basis.K
        self.trace_term = float(self.spectrum.sum())
        self.points = g.constraint_free
        self.point_blocks = spatial_blocks(g)
        self.lower = _bound_array(lower, g.M)
        self.upper = _bound_array(upper, g.M)
        self._rhs0 = self.w * self.f + self.B @ self.model.mean
        self._lock = threading.Lock()
        self._cache: tuple = (None, None)
        self._hess_fac: Optional[mesh.Factorization] = None

    @property
    def control_size(self) -> int:
        return self.grid.num_free

    def initial_control(self) -> np.ndarray:
        return nominal_control(self.grid)

    def with_bounds(self, lower, upper) -> "LinearProblem":
        """Shallow copy sharing operators and KL data, with new bounds."""
        other = object.__new__(LinearProblem)
        other.__dict__.update(self.__dict__)
        other.lower = _bound_array(lower, self.grid.M)
        other.upper = _bound_array(upper, self.grid.M)
        other._lock = threading.Lock()
        other._cache = (None, None)
        return other

    def with_K(self, K: int) -> "LinearProblem":
        """Shallow copy keeping only the leading ``K`` state modes."""
        if not 1 <= K <= self.K:
            raise ValueError(f"K must lie in [1, {self.K}], got {K}")
        other = self.with_bounds(self.lower, self.upper)
        other.factor = self.factor[:, :K]
        other.state_basis = self.state_basis.truncate(K)
        other.K = K
        return other

    # -- states -------------------------------------------------------
    def mean_state(self, u: np.ndarray) -> np.ndarray:
        """``A^{-1}(w (f + u) + B xi0)`` on the free nodes."""
        u = np.asarray(u, float)
        with self._lock:
            key, val = self._cache
            if key is not None and key.shape == u.shape and np.array_equal(key, u):
                return val
        y0 = self.fac.solve(self._rhs0 + self.w * u)
        with self._lock:
            self._cache = (u.copy(), y0)
        return y0

    def state_samples(self, u: np.ndarray, z: np.ndarray, full_rank: bool = False) -> np.ndarray:
        """States ``y0 + sum_k z_k sqrt(lambda_k) e_k`` for rows of ``z``.

        With ``full_rank`` the coordinates refer to all boundary modes
        (``z`` of width ``n - 2``) instead of the truncated state basis.
        """
        y0 = self.mean_state(u)
        if full_rank:
            P = self.fac.solve(np.asarray(self.B @ self.model.basis().factor)) * self.noise_amplitude
        else:
            P = self.factor
        return y0 + np.atleast_2d(z) @ P.T

    # -- objective ----------------------------------------------------
    def objective(self, u: np.ndarray) -> float:
        """``1/2 |y0 - y_d|^2 + alpha/2 |u|^2`` in trapezoid-weighted norms.

        The state term integrates over all nodes (the state is zero on the
        Dirichlet boundary).  The constant trace term is excluded.
        """
        y = self.grid.extend(self.mean_state(u))
        r = y - self.y_d
        return 0.5 * float(np.dot(self.quad_full * r, r)) + 0.5 * self.alpha_reg * float(np.dot(self.quad * u, u))

    def expected_objective(self, u: np.ndarray) -> float:
        """Mean of the random tracking objective: objective plus half the trace."""
        return self.objective(u) + 0.5 * self.trace_term

    def objective_gradient(self, u: np.ndarray) -> np.ndarray:
        y0 = self.mean_state(u)
        r = self.quad * (y0 - self.grid.restrict(self.y_d))
        return self.w * self.fac.solve(r) + self.alpha_reg * self.quad * u

    def hessian_apply(self, v: np.ndarray) -> np.ndarray:
        return self.w * self.fac.solve(self.quad * self.fac.solve(self.w * v)) + self.alpha_reg * self.quad * v

    def hessian_solve(self, g: np.ndarray) -> np.ndarray:
        """Exact inverse of the objective Hessian.

        ``H = W A^{-1} (Q + alpha A D A) A^{-1} W`` with diagonal ``W``,
        ``Q`` and ``D = W^{-1} Q W^{-1}``, so ``H^{-1}`` needs one sparse
        factorization of the fourth-order operator in parentheses.
        """
        if self._hess_fac is None:
            A = self.A.matrix
            D = sp.diags(self.quad / self.w ** 2)
            S = sp.diags(self.quad) + self.alpha_reg * (A @ D @ A)
            self._hess_fac = mesh.factorize(sp.csc_matrix(S))
        A = self.A.matrix
        return (A @ self._hess_fac.solve(A @ (np.asarray(g) / self.w).T)).T / self.w

    def dual_norm(self, g: np.ndarray) -> float:
        return math.sqrt(float(np.dot(g / self.quad, g)))

    # -- probability --------------------------------------------------
    def caster(self, u: np.ndarray, check_slater: bool = True) -> RayCaster:
        y0 = self.mean_state(u)[self.points]
        # state = y0 + r P v, i.e. delta = -P v in the ray convention
        return RayCaster(y0, -self.factor[self.points], self.lower, self.upper,
                         groups=self.point_blocks, check_slater=check_slater)

    def slater_margin(self, u: np.ndarray) -> float:
        y0 = self.mean_state(u)[self.points]
        return float(np.min(np.minimum(self.upper - y0, y0 - self.lower)))

    def probability(self, u: np.ndarray, samples: SampleSet, *, gradient: bool = False,
                    estimator: str = "srd", workers: int = 1) -> ProbabilityEstimate:
        """SRD (directions) or MC (Gaussian points) estimate of the joint probability."""
        if estimator == "mc":
            return self._probability_mc(u, samples.gaussian(), workers)
        caster = self.caster(u)
        prof = caster.profile(samples.directions, workers=workers)
        est = estimate_srd(prof, self.K)
        est.extras["profile"] = prof
        if gradient:
            est = _with_gradient(est, self.gradient(prof, samples))
        return est

    def _probability_mc(self, u, G, workers):
        if self.slater_margin(u) > 0:
            return estimate_mc(self.caster(u).indicators(G, workers=workers))
        warnings.warn("mean state violates the bounds; MC estimate without radial structure",
                      RuntimeWarning)
        y0 = self.mean_state(u)[self.points]
        P = self.factor[self.points]
        ind = np.empty(G.shape[0])
        for s in range(0, G.shape[0], 256):
            Y = y0 + G[s:s + 256] @ P.T
            ind[s:s + 256] = np.all((Y >= self.lower) & (Y <= self.upper), axis=1)
        return estimate_mc(ind, slater_ok=False)

    def gradient(self, profile, samples: SampleSet) -> np.ndarray:
        """Gradient of the SRD estimate with one adjoint solve."""
        j = profile.active_point
        hit = j >= 0
        delta = np.zeros(profile.N)
        P = self.factor[self.points]
        delta[hit] = -np.einsum("ik,ik->i", samples.directions[hit], P[j[hit]])
        gw = gradient_weights(profile, delta, self.K)
        return grad_srd_linear(gw, self.points, self.grid.num_free, self.fac.solve, lambda q: self.w * q)

    # -- feasibility restoration -------------------------------------
    def centering_control(self, u: np.ndarray) -> np.ndarray:
        """Control whose mean state is pulled to the middle of the bounds.

        The target keeps the current mean state where it sits comfortably
        inside the bounds and clips it to the inner 80% of each interval
        otherwise; one-sided bounds use a margin of 0.1.
        """
        y = self.mean_state(u).copy()
        lo, up = self.lower, self.upper
        both = np.isfinite(lo) & np.isfinite(up)
        gap = np.where(both, up - lo, 1.0)
        lo_in = np.where(np.isfinite(lo), lo + 0.1 * gap, -np.inf)
        up_in = np.where(np.isfinite(up), up - 0.1 * gap, np.inf)
        y[self.points] = np.clip(y[self.points], lo_in, up_in)
        return (self.A.matrix @ y - self._rhs0) / self.w

    def restore(self, u: np.ndarray) -> np.ndarray:
        """Shortest step toward :meth:`centering_control` restoring Slater."""
        target = self.centering_control(u)
        for k in range(8, -1, -1):
            cand = u + 2.0 ** (-k) * (target - u)
            if self.slater_margin(cand) > 0:
                return cand
        raise InfeasibleStartError("cannot move the mean state strictly inside the bounds")


# ----------------------------------------------------------------------
# bilinear problem
# ----------------------------------------------------------------------

class BilinearProblem:
    """Bilinear control with random volume source, controls on all nodes.

    The source covariance is ``[alpha A + M]^{-1} M [alpha A + M]^{-1}``
    in nodal coefficients; ``noise_amplitude`` multiplies the source
    fluctuation (1 is the model as stated).
    """

    kind = "bilinear"

    def __init__(self, n: int = 33, upper: float = 1.10, *, alpha_cov: float = 0.1,
                 u0: float = 1.0, xi0=None, constraint_stride: int = 1, noise_amplitude: float = 1.0,
                 lower: float = -np.inf):
        self.grid = g = mesh.build_grid(n, mesh.BILINEAR_DIRICHLET, constraint_stride)
        self.fem = mesh.assemble_fem(g)
        self.A = self.fem.stiffness.matrix
        self.M = self.fem.mass.matrix
        self.M_full = self.fem.full_mass
        self.y_d = bilinear_target(g)
        self.f = g.restrict((8 * np.pi ** 2 + 1) * self.y_d)
        self.u0 = np.full(g.num_nodes, float(u0))
        self.model = GaussianFieldModel.domain(self.fem, alpha_cov, xi0)
        self.noise_amplitude = float(noise_amplitude)
        self.points = g.constraint_free
        self.lower = _bound_array(lower, g.M)
        self.upper = _bound_array(upper, g.M)
        self.dof = g.num_free
        self._lock = threading.Lock()
        self._fac_cache: tuple = (None, None)
        self._dir_cache: tuple = (None, None)
        self._mass_fac = mesh.factorize(sp.csc_matrix(self.M_full))

    @property
    def control_size(self) -> int:
        return self.grid.num_nodes

    def initial_control(self) -> np.ndarray:
        return self.u0.copy()

    def with_bounds(self, lower, upper) -> "BilinearProblem":
        other = object.__new__(BilinearProblem)
        other.__dict__.update(self.__dict__)
        other.lower = _bound_array(lower, self.grid.M)
        other.upper = _bound_array(upper, self.grid.M)
        other._lock = threading.Lock()
        return other

    # -- operators ----------------------------------------------------
    def operator(self, u: np.ndarray) -> mesh.Factorization:
        """Cached factorization of ``A + M(u)``."""
        u = np.asarray(u, float)
        with self._lock:
            key, fac = self._fac_cache
            if key is not None and np.array_equal(key, u):
                return fac
        op = mesh.DiscreteOperator("state", self.A + mesh.assemble_control_mass(self.grid, u).matrix)
        fac = mesh.factorize(op)
        with self._lock:
            self._fac_cache = (u.copy(), fac)
        return fac

    def mean_state(self, u: np.ndarray) -> np.ndarray:
        """``[A + M(u)]^{-1} M (f + xi0)``."""
        return self.operator(u).solve(self.M @ (self.f + self.model.mean))

    def noise_directions(self, samples: SampleSet) -> np.ndarray:
        """Rows ``M [alpha A + M]^{-1} L v_i`` (control independent, cached)."""
        key, val = self._dir_cache
        if key is samples:
            return val
        V = samples.directions
        if V.shape[1] != self.dof:
            raise ValueError(f"directions must live on S^{self.dof - 1}, got dimension {V.shape[1]}")
        val = self.noise_amplitude * (self.M @ self.model.noise_map(V).T).T
        self._dir_cache = (samples, val)
        return val

    def state_directions(self, u: np.ndarray, samples: SampleSet) -> np.ndarray:
        return self.operator(u).solve_rows(self.noise_directions(samples))

    def state_samples(self, u: np.ndarray, samples: SampleSet) -> np.ndarray:
        """``y0 + r_i [A + M(u)]^{-1} M Ltilde v_i`` for every sample.

        Requires radial draws in ``samples``.
        """
        if samples.radii is None:
            raise ValueError("state samples need radial draws")
        return self.mean_state(u) + samples.radii[:, None] * self.state_directions(u, samples)

    # -- objective ----------------------------------------------------
    def objective(self, u: np.ndarray) -> float:
        d = np.asarray(u) - self.u0
        return 0.5 * float(d @ (self.M_full @ d))

    def objective_gradient(self, u: np.ndarray) -> np.ndarray:
        return self.M_full @ (np.asarray(u) - self.u0)

    def hessian_apply(self, v: np.ndarray) -> np.ndarray:
        return (self.M_full @ np.asarray(v).T).T

    def hessian_solve(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g)
        return self._mass_fac.solve(g) if g.ndim == 1 else self._mass_fac.solve(g.T).T

    def dual_norm(self, g: np.ndarray) -> float:
        return math.sqrt(max(float(g @ self._mass_fac.solve(g)), 0.0))

    # -- probability --------------------------------------------------
    def slater_margin(self, u: np.ndarray) -> float:
        y0 = self.mean_state(u)[self.points]
        return float(np.min(np.minimum(self.upper - y0, y0 - self.lower)))

    def probability(self, u: np.ndarray, samples: SampleSet, *, gradient: bool = False,
                    estimator: str = "srd", workers: int = 1) -> ProbabilityEstimate:
        fac = self.operator(u)
        y0 = self.mean_state(u)
        if estimator == "mc":
            G = samples.gaussian()
            D = fac.solve_rows(self.noise_amplitude * (self.M @ self.model.noise_map(G).T).T)
            Y = y0[self.points] + D[:, self.points]
            ind = np.all((Y >= self.lower) & (Y <= self.upper), axis=1).astype(float)
            return estimate_mc(ind, slater_ok=self.slater_margin(u) > 0)
        D = self.state_directions(u, samples)
        delta = -D[:, self.points]
        prof = radial_profile(y0[self.points], delta, self.lower, self.upper)
        est = estimate_srd(prof, self.dof)
        est.extras["profile"] = prof
        if gradient:
            est = _with_gradient(est, self._gradient(u, prof, y0, D, fac))
        return est

    def _gradient(self, u, prof, y0, D, fac) -> np.ndarray:
        """Adjoint gradient ``-sum_i w_i dM(K e_{j_i}, y0 + rho_i d_i)``.

        One adjoint solve for the mean-state part and one per sample for
        the sample-state parts (shared between samples with the same
        active point).
        """
        j = prof.active_point
        hit = j >= 0
        delta_act = np.zeros(prof.N)
        delta_act[hit] = -D[hit, self.points[j[hit]]]
        gw = gradient_weights(prof, delta_act, self.dof)
        use = hit & (gw.weights != 0)
        if not np.any(use):
            return np.zeros(self.grid.num_nodes)
        nf = self.grid.num_free
        state_j = self.points[j[use]]
        w = gw.weights[use]
        mean_load = np.bincount(state_j, weights=w, minlength=nf)
        grad = -mesh.control_mass_gradient(self.grid, fac.solve(mean_load), y0)
        uniq, inv = np.unique(state_j, return_inverse=True)
        E = np.zeros((uniq.size, nf))
        E[np.arange(uniq.size), uniq] = 1.0
        Q = fac.solve_rows(E)
        rho_d = (prof.rho[use] * w)[:, None] * D[use]
        for s in range(0, rho_d.shape[0], 512):
            grad -= mesh.control_mass_gradient(self.grid, Q[inv[s:s + 512]], rho_d[s:s + 512])
        return grad

    # -- feasibility restoration -------------------------------------
    def restore(self, u: np.ndarray) -> np.ndarray:
        """Raise the control (more damping) until the mean state is strictly feasible."""
        for k in range(20):
            cand = u + (2.0 ** k - 1.0) * 0.25
            try:
                if self.slater_margin(cand) > 0:
                    return cand
            except ArithmeticError:
                continue
        raise InfeasibleStartError("no uniform control shift restores strict feasibility")


def _with_gradient(est: ProbabilityEstimate, grad: np.ndarray) -> ProbabilityEstimate:
    return ProbabilityEstimate(value=est.value, contributions=est.contributions, variance=est.variance,
                               estimator=est.estimator, rho_inf=est.rho_inf, rho_sup=est.rho_sup,
                               dof=est.dof, gradient=grad, extras=est.extras)

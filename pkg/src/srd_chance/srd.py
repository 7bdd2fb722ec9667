"""Spherical-radial decomposition: radial functions, probability
estimators, variance diagnostics and gradients of the sampled probability.

Sign convention: a ray in direction ``v`` produces the state
``y0 - r * delta(v)`` at the constraint points, and the joint constraint
``lower <= y <= upper`` is cut into ``2M`` affine pieces, indices
``0..M-1`` for the upper bounds and ``M..2M-1`` for the lower bounds.
Writing ``a = 1/(y0 - lower) > 0`` and ``b = 1/(y0 - upper) < 0``, the
inverse ray length of piece ``j`` is ``max(delta_j a_j, delta_j b_j)``
and ``rho = 1 / max_j(...)``.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import SlaterError
from .random_field import chi_cdf, chi_max_density, chi_pdf

DEGENERACY_RTOL = 1e-9
TANGENTIAL_TOL = 1e-14
CHUNK = 2048


@dataclass(frozen=True, eq=False)
class RadialProfile:
    """Per-sample radial function values and active constraint pieces."""

    rho: np.ndarray
    active: np.ndarray
    degenerate: np.ndarray
    M: int

    @property
    def N(self) -> int:
        return self.rho.size

    @property
    def finite(self) -> np.ndarray:
        return np.isfinite(self.rho)

    @property
    def active_point(self) -> np.ndarray:
        """Constraint point of the active piece (``-1`` for no hit)."""
        return np.where(self.active < 0, -1, self.active % max(self.M, 1))

    @property
    def active_is_upper(self) -> np.ndarray:
        return (self.active >= 0) & (self.active < self.M)

    @property
    def degenerate_fraction(self) -> float:
        return float(self.degenerate.mean()) if self.N else 0.0


@dataclass(frozen=True, eq=False)
class ProbabilityEstimate:
    """Sample mean of per-sample contributions (chi cdf values or indicators)."""

    value: float
    contributions: np.ndarray
    variance: float
    estimator: str
    rho_inf: float = math.nan
    rho_sup: float = math.nan
    dof: Optional[int] = None
    gradient: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.contributions.size

    @property
    def standard_error(self) -> float:
        return math.sqrt(self.variance / self.N) if self.N > 1 else math.inf

    @property
    def bernoulli_variance(self) -> float:
        return self.value * (1.0 - self.value)


def bound_coefficients(y0, lower, upper, check_slater=True):
    """Return ``(a, b)`` with ``a = 1/(y0 - lower)``, ``b = 1/(y0 - upper)``.

    Infinite bounds give zero coefficients.  Raises :class:`SlaterError`
    unless ``lower < y0 < upper`` everywhere.
    """
    y0 = np.asarray(y0, float)
    lower = np.broadcast_to(np.asarray(lower, float), y0.shape)
    upper = np.broadcast_to(np.asarray(upper, float), y0.shape)
    up_gap, lo_gap = upper - y0, y0 - lower
    if check_slater:
        margin = np.minimum(up_gap, lo_gap)
        if margin.size and not np.all(margin > 0):
            j = int(np.argmin(margin))
            raise SlaterError(f"mean state violates the bounds strictly at point {j} "
                              f"(margin {margin[j]:.3e})", point=j, margin=float(margin[j]))
    with np.errstate(divide="ignore"):
        a = np.where(np.isinf(lower), 0.0, 1.0 / lo_gap)
        b = np.where(np.isinf(upper), 0.0, -1.0 / up_gap)
    return a, b


def _profile_from_inverse(tmax, active, M, degenerate=None) -> RadialProfile:
    tmax = np.asarray(tmax, float)
    hit = tmax > 0
    with np.errstate(divide="ignore", over="ignore"):
        rho = np.where(hit, 1.0 / np.where(hit, tmax, 1.0), np.inf)
    active = np.where(hit, active, -1).astype(np.int64)
    if degenerate is None:
        degenerate = np.zeros(rho.size, bool)
    return RadialProfile(rho, active, np.asarray(degenerate, bool) & hit, M)


def radial_profile(y0, delta, lower, upper, *, check_slater=True,
                   rtol=DEGENERACY_RTOL) -> RadialProfile:
    """Radial function for explicit state perturbations.

    Parameters
    ----------
    y0 : (M,) mean state at the constraint points
    delta : (N, M) or (M,) perturbation direction(s), ray state ``y0 - r*delta``
    lower, upper : (M,) or scalar bounds, ``-inf``/``inf`` allowed
    """
    a, b = bound_coefficients(y0, lower, upper, check_slater)
    delta = np.atleast_2d(np.asarray(delta, float))
    T = np.concatenate([delta * b, delta * a], axis=1)
    active = np.argmax(T, axis=1)
    tmax = T[np.arange(T.shape[0]), active]
    Ts = np.sort(T, axis=1)
    second = Ts[:, -2] if T.shape[1] > 1 else np.full(T.shape[0], -np.inf)
    degenerate = second >= tmax * (1.0 - rtol)
    return _profile_from_inverse(tmax, active, a.size, degenerate)


class RayCaster:
    """Radial function for ``delta(v) = P v`` with a fixed nodal factor ``P``.

    The ``2M`` candidate rows ``[b * P; a * P]`` are grouped into clusters
    (``groups`` labels per constraint point, e.g. spatial blocks).  For a
    unit ``v`` every row of cluster ``c`` obeys
    ``w . v <= center_c . v + radius_c``, so after evaluating the most
    promising cluster exactly only clusters whose bound beats the running
    maximum are scanned.  The result equals the brute-force maximum.
    """

    def __init__(self, y0, P, lower, upper, *, groups=None, check_slater=True,
                 rtol=DEGENERACY_RTOL):
        a, b = bound_coefficients(y0, lower, upper, check_slater)
        P = np.asarray(P, float)
        self.M = a.size
        self.rtol = rtol
        if groups is None:
            groups = np.arange(self.M) // 64
        groups = np.asarray(groups)
        _, g = np.unique(groups, return_inverse=True)
        ng = int(g.max()) + 1 if g.size else 0
        W = np.concatenate([P * b[:, None], P * a[:, None]], axis=0)
        label = np.concatenate([g, g + ng])
        keep = np.flatnonzero(np.any(W != 0, axis=1))
        order = keep[np.argsort(label[keep], kind="stable")]
        self.order = order
        self.W = np.ascontiguousarray(W[order])
        lab = label[order]
        bounds = np.flatnonzero(np.diff(lab)) + 1
        self.starts = np.concatenate([[0], bounds]).astype(np.int64)
        self.stops = np.concatenate([bounds, [lab.size]]).astype(np.int64)
        C = self.starts.size if lab.size else 0
        if C == 0:
            self.starts = self.stops = np.zeros(0, np.int64)
        self.centers = np.zeros((C, P.shape[1]))
        self.radii = np.zeros(C)
        for c in range(C):
            blk = self.W[self.starts[c]:self.stops[c]]
            self.centers[c] = blk.mean(axis=0)
            self.radii[c] = np.linalg.norm(blk - self.centers[c], axis=1).max()

    def _scan(self, V, c, idx, best1, best2, arg):
        lo, hi = self.starts[c], self.stops[c]
        T = V[idx] @ self.W[lo:hi].T
        loc = np.argmax(T, axis=1)
        v1 = T[np.arange(idx.size), loc]
        if hi - lo > 1:
            T[np.arange(idx.size), loc] = -np.inf
            v2 = T.max(axis=1)
        else:
            v2 = np.full(idx.size, -np.inf)
        b1, b2 = best1[idx], best2[idx]
        best2[idx] = np.maximum(np.minimum(b1, v1), np.maximum(b2, v2))
        better = v1 > b1
        best1[idx[better]] = v1[better]
        arg[idx[better]] = lo + loc[better]

    def _chunk(self, V, unit):
        c = V.shape[0]
        best1 = np.zeros(c)
        best2 = np.full(c, -np.inf)
        arg = np.full(c, -1, dtype=np.int64)
        if self.W.shape[0] == 0 or c == 0:
            return best1, best2, arg
        scale = 1.0 if unit else np.linalg.norm(V, axis=1)[:, None]
        UB = V @ self.centers.T + self.radii * scale
        first = np.argmax(UB, axis=1)
        for cl in np.unique(first):
            self._scan(V, cl, np.flatnonzero(first == cl), best1, best2, arg)
        thresh = np.where(best1 > 0, best1 * (1.0 - self.rtol), 0.0)
        live = UB > thresh[:, None]
        live[np.arange(c), first] = False
        for cl in np.flatnonzero(live.any(axis=0)):
            self._scan(V, cl, np.flatnonzero(live[:, cl]), best1, best2, arg)
        return best1, best2, arg

    def _run(self, V, unit, workers):
        V = np.asarray(V, float)
        starts = range(0, V.shape[0], CHUNK)
        job = lambda s: self._chunk(V[s:s + CHUNK], unit)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                parts = list(ex.map(job, starts))
        else:
            parts = [job(s) for s in starts]
        if not parts:
            return np.zeros(0), np.zeros(0), np.zeros(0, np.int64)
        b1, b2, arg = (np.concatenate([p[k] for p in parts]) for k in range(3))
        active = np.where(arg >= 0, self.order[np.maximum(arg, 0)], -1)
        return b1, b2, active

    def inverse_lengths(self, V, *, unit=True, workers=1):
        """``max(0, max_j w_j . v)`` and its argmax for every row of ``V``.

        Rows are processed in fixed chunks; ``workers`` threads only change
        the schedule, never the chunking, so results are bit-identical for
        any thread count.
        """
        b1, _, active = self._run(V, unit, workers)
        return b1, active

    def profile(self, V, *, workers=1) -> RadialProfile:
        b1, b2, active = self._run(V, True, workers)
        degenerate = (b1 > 0) & (b2 >= b1 * (1.0 - self.rtol))
        return _profile_from_inverse(b1, active, self.M, degenerate)

    def indicators(self, G, *, workers=1) -> np.ndarray:
        """``1`` where the unnormalized Gaussian point ``G`` is feasible."""
        tmax, _ = self.inverse_lengths(G, unit=False, workers=workers)
        return (tmax <= 1.0).astype(float)


# ----------------------------------------------------------------------
# estimators
# ----------------------------------------------------------------------

def _sample_variance(x: np.ndarray) -> float:
    if x.size < 2:
        return 0.0
    # shifted two-pass form: exactly zero when all samples coincide
    d = x - x[0]
    s1 = float(np.sum(d))
    return max(float(np.sum(d * d)) - s1 * s1 / x.size, 0.0) / (x.size - 1)


def estimate_srd(profile: RadialProfile, dof: int) -> ProbabilityEstimate:
    """``N^{-1} sum_i F_chi(rho_i)``."""
    F = chi_cdf(profile.rho, dof)
    F = np.atleast_1d(F)
    value = float(np.sum(F) / F.size)
    return ProbabilityEstimate(
        value=value, contributions=F, variance=_sample_variance(F), estimator="srd",
        rho_inf=float(profile.rho.min()), rho_sup=float(profile.rho.max()), dof=int(dof))


def estimate_mc(indicators: np.ndarray, *, slater_ok: bool = True) -> ProbabilityEstimate:
    """Fraction of feasible Gaussian samples."""
    I = np.asarray(indicators, float)
    value = float(np.sum(I) / I.size)
    est = ProbabilityEstimate(value=value, contributions=I, variance=_sample_variance(I), estimator="mc")
    if not slater_ok:
        est.extras["slater_warning"] = True
    return est


@dataclass(frozen=True)
class VarianceReport:
    V_SRD: float
    V_MC: float
    ratio: float
    range_variance_bound: float
    spread_variance_bound: float
    range_bound_violated: bool
    spread_bound_violated: bool
    se_V_SRD: float


def _variance_se(x: np.ndarray) -> float:
    if x.size < 2:
        return 0.0
    d2 = (x - x.mean()) ** 2
    return float(np.std(d2, ddof=1) / math.sqrt(x.size))


def range_variance_bound(p: float, rho_inf: float, rho_sup: float, dof: int) -> float:
    """Variance bound from the range of the contributions.

    ``min{(1-p)(p - F(rho_inf)), p(F(rho_sup) - p)}``: every contribution
    lies in ``[F(rho_inf), F(rho_sup)]``.
    """
    return min((1 - p) * (p - chi_cdf(rho_inf, dof)), p * (chi_cdf(rho_sup, dof) - p))


def spread_variance_bound(rho_inf: float, rho_sup: float, dof: int) -> float:
    """``(max f_chi)^2 (rho_sup - rho_inf)^2``, from the Lipschitz constant of the chi cdf."""
    spread = rho_sup - rho_inf
    if not math.isfinite(spread):
        return math.inf
    return chi_max_density(dof) ** 2 * spread ** 2


def variance_report(est_srd: ProbabilityEstimate, est_mc: ProbabilityEstimate) -> VarianceReport:
    """Compare elementary variances and evaluate both analytic bounds.

    Bounds use the empirical ``p``, ``rho_inf`` and ``rho_sup`` of the SRD
    sample; a bound counts as violated only beyond three standard errors
    of the variance estimate.
    """
    p, dof = est_srd.value, est_srd.dof
    b1 = range_variance_bound(p, est_srd.rho_inf, est_srd.rho_sup, dof)
    b2 = spread_variance_bound(est_srd.rho_inf, est_srd.rho_sup, dof)
    se = _variance_se(est_srd.contributions)
    v_srd, v_mc = est_srd.variance, est_mc.variance
    ratio = v_srd / v_mc if v_mc > 0 else (0.0 if v_srd == 0 else math.inf)
    return VarianceReport(v_srd, v_mc, ratio, b1, b2, v_srd > b1 + 3 * se, v_srd > b2 + 3 * se, se)


# ----------------------------------------------------------------------
# gradients
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GradientWeights:
    """Per-sample factors ``f_chi(rho_i) / (N delta_{i, j_i})``."""

    weights: np.ndarray
    points: np.ndarray
    excluded: int
    degenerate: int


def gradient_weights(profile: RadialProfile, delta_active: np.ndarray, dof: int,
                     *, degeneracy_threshold: float = 0.01) -> GradientWeights:
    """Weights of the sampled-probability gradient.

    For a hit at piece ``j`` the ray length is ``(y0_j - bound_j)/delta_j``,
    so ``grad rho_i = grad_u[y_j at fixed rho] / delta_{i,j}`` for both
    upper and lower pieces.  Samples without a hit contribute nothing
    (``f_chi(inf) = 0``); near-tangential rays (``|delta| < 1e-14``) are
    dropped and counted.
    """
    delta_active = np.asarray(delta_active, float)
    N = profile.N
    finite = profile.finite
    tangential = finite & (np.abs(delta_active) < TANGENTIAL_TOL)
    use = finite & ~tangential
    w = np.zeros(N)
    w[use] = chi_pdf(profile.rho[use], dof) / (N * delta_active[use])
    n_deg = int(np.sum(profile.degenerate))
    if n_deg and n_deg / max(N, 1) > degeneracy_threshold:
        warnings.warn(f"{n_deg} samples have a non-unique active constraint; "
                      "using the recorded minimizer", RuntimeWarning)
    if tangential.any():
        warnings.warn(f"{int(tangential.sum())} near-tangential rays excluded from the gradient",
                      RuntimeWarning)
    return GradientWeights(w, profile.active_point, int(tangential.sum()), n_deg)


def grad_srd_linear(gw: GradientWeights, point_to_state, num_states, adjoint_solve,
                    control_adjoint):
    """Gradient when only the mean state depends on the control.

    ``sum_i w_i grad y0(x_{j_i})`` with ``grad y0(x_j) = C^T A^{-T} e_j``
    needs a single adjoint solve for the weighted point load.

    Parameters
    ----------
    gw : weights from :func:`gradient_weights`
    point_to_state : (M,) state index of each constraint point
    num_states : length of the state vector
    adjoint_solve : callable, ``q -> A^{-T} q``
    control_adjoint : callable, ``p -> C^T p``
    """
    return control_adjoint(adjoint_solve(point_load(gw, point_to_state, num_states)))


def point_load(gw: GradientWeights, point_to_state: np.ndarray, size: int) -> np.ndarray:
    """``sum_i w_i e_{x_{j_i}}`` as a state-sized vector."""
    hit = gw.points >= 0
    return np.bincount(point_to_state[gw.points[hit]], weights=gw.weights[hit], minlength=size)

"""Gaussian field models, Karhunen-Loeve bases and samplers.

Covers the chi distribution (radial law of the spherical-radial
decomposition), direction samplers on the unit sphere (plain Monte Carlo
and Halton quasi-Monte Carlo), the analytic KL basis of the 1-D boundary
covariance, the state KL basis obtained by SVD, and sampling of the
domain field of the bilinear problem.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special
from scipy.stats import qmc

from . import mesh
from .errors import TruncationError

INF = math.inf

MC = "mc"
QMC_HALTON = "qmc_halton"


# ----------------------------------------------------------------------
# chi distribution
# ----------------------------------------------------------------------

def _check_dof(dof):
    if int(dof) != dof or dof < 1:
        raise ValueError(f"chi distribution needs an integer dof >= 1, got {dof!r}")
    return int(dof)


def chi_cdf(r, dof):
    """Distribution function of the chi law, ``P(dof/2, r^2/2)``.

    ``r = inf`` is allowed and maps to 1.
    """
    dof = _check_dof(dof)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise ValueError("chi_cdf is defined for r >= 0 only")
    out = special.gammainc(0.5 * dof, 0.5 * r * r)
    return out if out.ndim else float(out)


def chi_pdf(r, dof):
    """Density of the chi law with the convention ``f(inf) = 0``."""
    dof = _check_dof(dof)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise ValueError("chi_pdf is defined for r >= 0 only")
    with np.errstate(divide="ignore", invalid="ignore"):
        logf = ((dof - 1) * np.log(r) - 0.5 * r * r
                - (0.5 * dof - 1.0) * math.log(2.0) - special.gammaln(0.5 * dof))
        out = np.exp(logf)
    out = np.where(np.isinf(r), 0.0, out)
    if dof == 1:
        out = np.where(r == 0, math.sqrt(2.0 / math.pi), out)
    return out if out.ndim else float(out)


def chi_quantile(p, dof):
    dof = _check_dof(dof)
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("quantile level must lie in [0, 1]")
    out = np.sqrt(2.0 * special.gammaincinv(0.5 * dof, p))
    return out if out.ndim else float(out)


def chi_sample(rng: np.random.Generator, dof, size=None):
    dof = _check_dof(dof)
    return np.sqrt(rng.chisquare(dof, size=size))


def chi_max_density(dof) -> float:
    """Maximum of the chi density (attained at ``sqrt(dof - 1)``)."""
    dof = _check_dof(dof)
    return float(chi_pdf(math.sqrt(dof - 1.0), dof))


# ----------------------------------------------------------------------
# directions on the sphere
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SampleSet:
    """``N`` unit directions in ``R^K`` plus optional chi radii."""

    directions: np.ndarray
    kind: str
    seed: int
    radii: Optional[np.ndarray] = None

    @property
    def N(self) -> int:
        return self.directions.shape[0]

    @property
    def K(self) -> int:
        return self.directions.shape[1]

    def gaussian(self) -> np.ndarray:
        """``r_i v_i``; requires radii."""
        if self.radii is None:
            raise ValueError("sample set carries no radial draws")
        return self.radii[:, None] * self.directions

    def with_radii(self, seed: Optional[int] = None) -> "SampleSet":
        rng = np.random.default_rng([self.seed if seed is None else seed, 0xC41])
        return SampleSet(self.directions, self.kind, self.seed, chi_sample(rng, self.K, self.N))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# kind={self.kind} seed={self.seed} N={self.N} K={self.K}\n")
            w = csv.writer(fh)
            w.writerow([f"v{k + 1}" for k in range(self.K)] + (["r"] if self.radii is not None else []))
            for i in range(self.N):
                row = [repr(float(x)) for x in self.directions[i]]
                if self.radii is not None:
                    row.append(repr(float(self.radii[i])))
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "SampleSet":
        with open(path, newline="") as fh:
            meta = dict(kv.split("=") for kv in fh.readline()[1:].split())
            rows = list(csv.reader(fh))
        header, data = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        has_r = header[-1] == "r"
        return cls(data[:, :-1] if has_r else data, meta["kind"], int(meta["seed"]),
                   data[:, -1].copy() if has_r else None)


def halton_points(N: int, K: int, start: int = 1) -> np.ndarray:
    """Unscrambled Halton points ``start, ..., start+N-1`` in bases 2, 3, 5, ..."""
    eng = qmc.Halton(d=K, scramble=False)
    if start:
        eng.fast_forward(start)
    return eng.random(N)


def _normalize(g: np.ndarray) -> np.ndarray:
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def gaussian_block(kind: str, seed: int, N: int, K: int) -> np.ndarray:
    """Standard normal points underlying :func:`sphere_samples`.

    MC draws come from a PCG64 stream seeded with ``seed``; QMC points are
    Halton points starting at index ``1 + seed*N`` (so seed 0 skips only the
    origin and different seeds give disjoint blocks) mapped through the
    inverse normal cdf.
    """
    if N < 1 or K < 1:
        raise ValueError("need N >= 1 and K >= 1")
    if kind == MC:
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((N, K))
        bad = ~np.any(g != 0, axis=1)
        while np.any(bad):
            g[bad] = rng.standard_normal((int(bad.sum()), K))
            bad = ~np.any(g != 0, axis=1)
        return g
    if kind == QMC_HALTON:
        start = 1 + int(seed) * N
        g = special.ndtri(halton_points(N, K, start=start))
        # only possible for K = 1 (the point 1/2); replace by points following the block
        bad = np.flatnonzero(~np.any(g != 0, axis=1))
        nxt = start + N
        while bad.size:
            extra = special.ndtri(halton_points(bad.size, K, start=nxt))
            nxt += bad.size
            g[bad] = extra
            bad = bad[~np.any(extra != 0, axis=1)]
        return g
    raise ValueError(f"unknown sampler kind {kind!r}")


def sphere_samples(kind: str, seed: int, N: int, K: int) -> SampleSet:
    """Directions uniformly distributed (MC) or equidistributed (QMC) on the sphere."""
    d = _normalize(gaussian_block(kind, seed, N, K))
    d.setflags(write=False)
    return SampleSet(d, kind, int(seed))


# ----------------------------------------------------------------------
# KL bases
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KLBasis:
    """Truncated KL expansion ``sum_k zeta_k e_k`` with ``Var zeta_k = lambda_k``.

    ``functions`` holds the eigenfunctions as rows; ``weights`` are the
    nodal weights of the discrete inner product they are orthonormal in.
    """

    eigenvalues: np.ndarray
    functions: np.ndarray
    weights: np.ndarray
    target: str
    total_variance: float = float("nan")

    @property
    def K(self) -> int:
        return self.eigenvalues.size

    @property
    def factor(self) -> np.ndarray:
        """Columns ``sqrt(lambda_k) e_k``: the SRD matrix in nodal coordinates."""
        return self.functions.T * np.sqrt(self.eigenvalues)

    def gram(self) -> np.ndarray:
        return (self.functions * self.weights) @ self.functions.T

    def check(self, tol: float = 1e-8) -> None:
        lam = self.eigenvalues
        if np.any(lam < 0) or np.any(np.diff(lam) > 0):
            raise AssertionError("KL eigenvalues must be non-negative and non-increasing")
        if np.abs(self.gram() - np.eye(self.K)).max() > tol:
            raise AssertionError("KL eigenfunctions are not orthonormal")

    def truncate(self, K: int) -> "KLBasis":
        if K > self.K:
            raise TruncationError(f"basis has only {self.K} modes, asked for {K}")
        return KLBasis(self.eigenvalues[:K], self.functions[:K], self.weights, self.target,
                       self.total_variance)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# target={self.target} K={self.K} total_variance={self.total_variance!r}\n")
            w = csv.writer(fh)
            w.writerow(["k", "lambda"] + [f"e{m}" for m in range(self.functions.shape[1])])
            w.writerow(["weights", ""] + [repr(float(x)) for x in self.weights])
            for k in range(self.K):
                w.writerow([k + 1, repr(float(self.eigenvalues[k]))]
                           + [repr(float(x)) for x in self.functions[k]])

    @classmethod
    def from_csv(cls, path) -> "KLBasis":
        with open(path, newline="") as fh:
            meta = dict(kv.split("=") for kv in fh.readline()[1:].split())
            rows = list(csv.reader(fh))
        weights = np.array(rows[1][2:], dtype=float)
        body = np.array([r[1:] for r in rows[2:]], dtype=float).reshape(-1, weights.size + 1)
        return cls(body[:, 0].copy(), body[:, 1:].copy(), weights, meta["target"],
                   float(meta["total_variance"]))


def boundary_kl(gamma: float, n_boundary: int, K: int) -> KLBasis:
    """KL basis of ``gamma (-d^2/dx2^2)^{-1}`` on ``[0, 1]`` with Dirichlet ends.

    Eigenpairs ``gamma/(k pi)^2`` and ``sqrt(2) sin(k pi x2)`` sampled at the
    ``n_boundary - 2`` interior boundary nodes; the sampled sines are exactly
    orthonormal for the weight ``h = 1/(n_boundary - 1)``.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    m = n_boundary - 2
    if K < 1 or K > m:
        raise TruncationError(f"K={K} modes requested, boundary grid supports at most {m}")
    h = 1.0 / (n_boundary - 1)
    x2 = np.arange(1, n_boundary - 1) * h
    k = np.arange(1, K + 1)
    lam = gamma / (k * math.pi) ** 2
    e = math.sqrt(2.0) * np.sin(np.outer(k, x2) * math.pi)
    total = gamma * sum(1.0 / (kk * math.pi) ** 2 for kk in range(1, m + 1))
    return KLBasis(lam, e, np.full(m, h), "input_xi", total)


@dataclass(frozen=True, eq=False)
class GaussianFieldModel:
    """Gaussian law ``N(mean, C0)`` for the random input.

    ``kind`` is ``inverse_1d_laplacian`` (boundary data, parameter
    ``gamma``) or ``squared_inverse_elliptic`` (domain data, parameter
    ``alpha``).
    """

    kind: str
    mean: np.ndarray
    gamma: float = 4.0
    alpha: float = 0.1
    fem: Optional[mesh.FemOperators] = None
    _prior_fac: Optional[mesh.Factorization] = field(default=None, repr=False)

    @classmethod
    def boundary(cls, grid: mesh.Grid, gamma: float = 4.0, mean=None) -> "GaussianFieldModel":
        m = np.zeros(grid.neumann_nodes.size) if mean is None else np.asarray(mean, float)
        return cls("inverse_1d_laplacian", m, gamma=gamma)

    @classmethod
    def domain(cls, fem: mesh.FemOperators, alpha: float = 0.1, mean=None) -> "GaussianFieldModel":
        n = fem.mass.shape[0]
        m = np.zeros(n) if mean is None else np.asarray(mean, float)
        fac = mesh.factorize(mesh.DiscreteOperator("prior", alpha * fem.stiffness.matrix + fem.mass.matrix))
        return cls("squared_inverse_elliptic", m, alpha=alpha, fem=fem, _prior_fac=fac)

    def basis(self, K: Optional[int] = None) -> KLBasis:
        if self.kind != "inverse_1d_laplacian":
            raise ValueError("analytic KL basis only exists for the boundary model")
        m = self.mean.size
        return boundary_kl(self.gamma, m + 2, m if K is None else K)

    def covariance_action(self, x: np.ndarray) -> np.ndarray:
        """Apply the nodal covariance matrix to ``x``."""
        if self.kind == "inverse_1d_laplacian":
            b = self.basis()
            return b.factor @ (b.factor.T @ x)
        Mx = x
        t = self._prior_fac.solve(Mx)
        t = self.fem.mass.matrix @ t
        return self._prior_fac.solve(t)

    def prior_solve(self, x: np.ndarray) -> np.ndarray:
        """``[alpha A + M]^{-1} x`` (domain model only)."""
        return self._prior_fac.solve(x)

    def noise_map(self, z: np.ndarray) -> np.ndarray:
        """``[alpha A + M]^{-1} L z`` for one (1-D) or many (rows) ``z``."""
        z = np.asarray(z, float)
        if z.ndim == 1:
            return self._prior_fac.solve(self.fem.mass_chol @ z)
        return self._prior_fac.solve_rows((self.fem.mass_chol @ z.T).T)


def sample_domain_field(model: GaussianFieldModel, z: np.ndarray) -> np.ndarray:
    """``xi0 + [alpha A + M]^{-1} L z``."""
    if model.kind != "squared_inverse_elliptic":
        raise ValueError("domain sampling needs a squared_inverse_elliptic model")
    return model.mean + model.noise_map(z)


def state_kl(A_fac: mesh.Factorization, B, model: GaussianFieldModel, K: int,
             weights: np.ndarray) -> tuple[KLBasis, dict]:
    """KL basis of the state covariance ``A^{-1} B C0 B^* A^{-*}``.

    Assembles ``G = A^{-1} B C0^{1/2}`` column by column from the full
    boundary KL basis and takes the SVD of ``W^{1/2} G``, ``W`` being the
    state inner-product weights.  Returns the basis and a dict with the
    nodal factor ``P = G V_K`` (columns ``sqrt(lambda_k) e_k``) and the full
    spectrum.  If fewer than ``K`` modes are nonzero, all nonzero modes
    are returned and ``info["truncated"]`` is set.
    """
    xi_basis = model.basis()
    G = A_fac.solve(np.asarray(B @ xi_basis.factor))
    sw = np.sqrt(weights)
    U, s, Vt = np.linalg.svd(sw[:, None] * G, full_matrices=False)
    lam_all = s ** 2
    nonzero = int(np.sum(s > s[0] * 1e-13)) if s.size else 0
    info = {"spectrum": lam_all, "truncated": False}
    if K > nonzero:
        warnings.warn(f"state covariance has only {nonzero} nonzero modes; K={K} reduced", RuntimeWarning)
        K = nonzero
        info["truncated"] = True
    functions = (U[:, :K] / sw[:, None]).T
    # fix the sign so that each mode has a positive largest entry
    signs = np.sign(functions[np.arange(K), np.argmax(np.abs(functions), axis=1)])
    functions *= signs[:, None]
    info["factor"] = (G @ Vt[:K].T) * signs
    basis = KLBasis(lam_all[:K].copy(), functions, np.asarray(weights, float), "state_y",
                    float(lam_all.sum()))
    return basis, info

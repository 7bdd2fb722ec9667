"""Constraint sets with closed-form radial functions.

Both live directly in the ``K``-dimensional Gaussian coordinate ``z`` with
identity covariance.  The centered ball ``|z| <= R`` has ``rho = R`` in
every direction; the half-space ``z_axis <= c`` has ``rho = c / v_axis``
for ``v_axis > 0`` and no hit otherwise.
"""

from __future__ import annotations

import numpy as np

from .srd import RadialProfile


def ball_profile(directions: np.ndarray, radius: float) -> RadialProfile:
    N = np.asarray(directions).shape[0]
    return RadialProfile(np.full(N, float(radius)), np.zeros(N, np.int64), np.zeros(N, bool), 1)


def ball_indicators(points: np.ndarray, radius: float) -> np.ndarray:
    return (np.linalg.norm(points, axis=1) <= radius).astype(float)


def halfspace_profile(directions: np.ndarray, offset: float = 0.0, axis: int = 0) -> RadialProfile:
    v = np.asarray(directions)[:, axis]
    hit = v > 0
    with np.errstate(divide="ignore"):
        rho = np.where(hit, offset / np.where(hit, v, 1.0), np.inf)
    return RadialProfile(rho, np.where(hit, 0, -1).astype(np.int64), np.zeros(v.size, bool), 1)


def halfspace_indicators(points: np.ndarray, offset: float = 0.0, axis: int = 0) -> np.ndarray:
    return (np.asarray(points)[:, axis] <= offset).astype(float)

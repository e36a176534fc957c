#!/usr/bin/env python3
"""
Spherical geometry on S^{d-1}
- Array kernels (expmap, logmap, dist, proju, projx) that broadcast over
  leading axes; the last axis holds ambient coordinates
- Typed wrappers (SpherePoint, TangentVector, SimplexPoint) used at API edges
- The square-root diffeomorphism between the probability simplex and the
  positive orthant of the sphere
"""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from core.exceptions import AntipodalPointsError, DimensionMismatchError, DomainError

logger = logging.getLogger(__name__)

EPS_CLAMP = 1e-12
SERIES_THRESHOLD = 1e-4
SIMPLEX_TOL = 1e-9
TANGENT_TOL = 1e-9

ArrayLike = Union[np.ndarray, list, tuple]


# ---------------------------------------------------------------------------
# Array kernels
# ---------------------------------------------------------------------------

def inner(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.sum(u * v, axis=-1)


def projx(x: np.ndarray) -> np.ndarray:
    """Radial projection back onto the unit sphere"""
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def proju(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Tangent projection of ambient vectors w at base points x"""
    return w - inner(w, x)[..., None] * x


def theta_over_sin(theta: np.ndarray) -> np.ndarray:
    """theta / sin(theta), series 1 + theta^2/6 below SERIES_THRESHOLD"""
    theta = np.asarray(theta, dtype=float)
    small = np.abs(theta) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, theta)
    return np.where(small, 1.0 + theta * theta / 6.0, safe / np.sin(safe))


def expmap(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    norm_v = np.linalg.norm(v, axis=-1, keepdims=True)
    small = norm_v < SERIES_THRESHOLD
    safe = np.where(small, 1.0, norm_v)
    sinc = np.where(small, 1.0 - norm_v * norm_v / 6.0, np.sin(safe) / safe)
    out = projx(np.cos(norm_v) * x + sinc * v)
    # zero tangent returns the base point bit-for-bit
    return np.where(norm_v == 0.0, x, out)


def logmap(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Logarithm map; callers rule out antipodal pairs"""
    c = inner(x, y)
    w = y - c[..., None] * x
    s = np.linalg.norm(w, axis=-1)
    theta = np.arctan2(s, c)
    ratio = np.where(s > 0.0, theta / np.where(s > 0.0, s, 1.0), 1.0)
    return ratio[..., None] * w


def dist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    c = inner(x, y)
    s = np.linalg.norm(y - c[..., None] * x, axis=-1)
    return np.arctan2(s, c)


def one_hot(k: int, dim: int) -> np.ndarray:
    e = np.zeros(dim)
    e[k] = 1.0
    return e


def barycenter(num_classes: int, dim: int) -> np.ndarray:
    """Sphere image of the uniform distribution over the first num_classes axes"""
    u = np.zeros(dim)
    u[:num_classes] = 1.0 / np.sqrt(num_classes)
    return u


def radial_gradient(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Riemannian gradient at x of r(x) = d_g(x, v)"""
    c = inner(x, v)
    r = dist(x, v)
    return -(v - c[..., None] * x) / np.sin(r)[..., None]


# ---------------------------------------------------------------------------
# Typed values
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpherePoint:
    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float)
        if coords.ndim != 1 or coords.size < 2:
            raise DimensionMismatchError(f"SpherePoint needs a vector of length >= 2, got shape {coords.shape}")
        norm = np.linalg.norm(coords)
        if not np.isfinite(norm) or norm == 0.0:
            raise DomainError("SpherePoint needs a finite nonzero vector")
        if norm != 1.0:
            coords = coords / norm
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self) -> int:
        return self.coords.size


@dataclass(frozen=True)
class TangentVector:
    base: SpherePoint
    vec: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vec, dtype=float)
        if vec.shape != self.base.coords.shape:
            raise DimensionMismatchError(f"tangent of shape {vec.shape} at a point of dimension {self.base.dim}")
        if abs(float(vec @ self.base.coords)) > TANGENT_TOL * (1.0 + np.linalg.norm(vec)):
            raise DomainError("vector is not tangent to its base point")
        vec.setflags(write=False)
        object.__setattr__(self, "vec", vec)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vec))


@dataclass(frozen=True)
class SimplexPoint:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size < 1:
            raise DimensionMismatchError("SimplexPoint needs a vector")
        if np.any(probs < -SIMPLEX_TOL):
            raise DomainError("negative probability")
        probs = np.clip(probs, 0.0, None)
        if abs(probs.sum() - 1.0) > SIMPLEX_TOL:
            raise DomainError(f"probabilities sum to {probs.sum():.12g}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)


def _check_dims(u: SpherePoint, v_dim: int):
    if u.dim != v_dim:
        raise DimensionMismatchError(f"dimension {u.dim} vs {v_dim}")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def exp_map(u: SpherePoint, x: TangentVector) -> SpherePoint:
    _check_dims(u, x.vec.size)
    if not np.array_equal(x.base.coords, u.coords):
        raise DomainError("tangent vector is attached to a different base point")
    if x.norm == 0.0:
        return u
    return SpherePoint(expmap(u.coords, x.vec))


def log_map(u: SpherePoint, v: SpherePoint) -> TangentVector:
    _check_dims(u, v.dim)
    if float(u.coords @ v.coords) <= -1.0 + EPS_CLAMP:
        raise AntipodalPointsError("log_map is undefined for antipodal points")
    vec = proju(u.coords, logmap(u.coords, v.coords))
    return TangentVector(u, vec)


def geodesic_distance(u: SpherePoint, v: SpherePoint) -> float:
    """Great-circle distance in [0, pi]"""
    _check_dims(u, v.dim)
    return float(dist(u.coords, v.coords))


def simplex_to_sphere(p: Union[SimplexPoint, ArrayLike]) -> SpherePoint:
    probs = p.probs if isinstance(p, SimplexPoint) else np.asarray(p, dtype=float)
    if np.any(probs < -SIMPLEX_TOL):
        raise DomainError("negative simplex coordinate")
    return SpherePoint(np.sqrt(np.clip(probs, 0.0, None)))


def sphere_to_simplex(u: Union[SpherePoint, ArrayLike]) -> SimplexPoint:
    coords = u.coords if isinstance(u, SpherePoint) else np.asarray(u, dtype=float)
    if np.any(coords < -SIMPLEX_TOL):
        raise DomainError("point lies outside the positive orthant")
    probs = np.clip(coords, 0.0, None) ** 2
    return SimplexPoint(probs / probs.sum())


def tangent_project(u: SpherePoint, w: ArrayLike) -> TangentVector:
    w = np.asarray(w, dtype=float)
    _check_dims(u, w.size)
    return TangentVector(u, proju(u.coords, w))

#!/usr/bin/env python3
"""
Logarithm bridges on the sphere
- bridge and mixture drifts (gamma_t * log_map toward the endpoint)
- geodesic random walk steps and fixed-grid simulation up to T - delta
- the 1-D radial process of the distance to the endpoint
- block-parallel batch simulators that record only requested checkpoints
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from core.exceptions import DimensionMismatchError, DomainError
from core.geometry import (
    SimplexPoint,
    SpherePoint,
    TangentVector,
    expmap,
    inner,
    log_map,
    proju,
    theta_over_sin,
)
from core.schedules import NoiseSchedule
from core.seeding import block_rngs, block_slices, parallel_map

logger = logging.getLogger(__name__)

BATCH_CLAMP = 1e-7
RADIAL_EPS = 1e-5
NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class BridgeSpec:
    target: SpherePoint
    schedule: NoiseSchedule


@dataclass(frozen=True)
class Path:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        if self.states.shape[0] != self.times.shape[0]:
            raise DimensionMismatchError("one state per time is required")
        if np.any(np.diff(self.times) <= 0):
            raise DomainError("path times must be strictly increasing")

    def point(self, i: int) -> SpherePoint:
        return SpherePoint(self.states[i])

    @property
    def final(self) -> SpherePoint:
        return SpherePoint(self.states[-1])


@dataclass(frozen=True)
class RadialPath:
    times: np.ndarray
    radii: np.ndarray


def time_grid(T: float, stop_delta: float, steps: int) -> np.ndarray:
    if steps < 1:
        raise DomainError("steps must be >= 1")
    if not 0.0 < stop_delta < T:
        raise DomainError("stop_delta must lie in (0, T)")
    return np.linspace(0.0, T - stop_delta, steps + 1)


# ---------------------------------------------------------------------------
# Drift kernels
# ---------------------------------------------------------------------------

def batch_bridge_drift(x: np.ndarray, target: np.ndarray, gamma_t: float) -> Tuple[np.ndarray, int]:
    """gamma_t * log_map(x, target) with near-antipodal states clamped; returns (drift, clamps)"""
    c = inner(x, target)
    clamped = int(np.count_nonzero(c < -1.0 + BATCH_CLAMP))
    theta = np.arccos(np.clip(c, -1.0 + BATCH_CLAMP, 1.0))
    drift = theta_over_sin(theta)[..., None] * (target - c[..., None] * x)
    return gamma_t * drift, clamped


def batch_mixture_drift(x: np.ndarray, probs: np.ndarray, gamma_t: Union[float, np.ndarray]) -> Tuple[np.ndarray, int]:
    """Probability-weighted bridge drifts toward the one-hot vertices of x's sphere.

    With c_k = theta_k / sin(theta_k) and theta_k = arccos(x_k):
    drift = gamma_t * (p * c - (sum_k p_k c_k x_k) x)
    """
    clamped = int(np.count_nonzero(x < -1.0 + BATCH_CLAMP))
    theta = np.arccos(np.clip(x, -1.0 + BATCH_CLAMP, 1.0))
    weighted = probs * theta_over_sin(theta)
    radial = np.sum(weighted * x, axis=-1, keepdims=True)
    drift = weighted - radial * x
    g = np.asarray(gamma_t, dtype=float)
    if g.ndim:
        g = g[..., None]
    return g * drift, clamped


def bridge_drift(x: SpherePoint, spec: BridgeSpec, t: float) -> TangentVector:
    direction = log_map(x, spec.target)
    return TangentVector(x, spec.schedule.gamma(t) * direction.vec)


def mixture_drift(x: SpherePoint, probs: Union[SimplexPoint, np.ndarray], t: float, schedule: NoiseSchedule,
                  endpoints: Optional[np.ndarray] = None) -> TangentVector:
    """Sum over endpoints of probs_k * bridge drift toward endpoint k (one-hot vertices by default)"""
    p = probs.probs if isinstance(probs, SimplexPoint) else np.asarray(probs, dtype=float)
    if abs(p.sum() - 1.0) > NORMALIZATION_TOL or np.any(p < 0):
        raise DomainError("mixture weights must be a probability vector")
    g = schedule.gamma(t)
    if endpoints is None:
        if p.size != x.dim:
            raise DimensionMismatchError(f"{p.size} weights for a sphere of dimension {x.dim}")
        drift, _ = batch_mixture_drift(x.coords, p, g)
    else:
        endpoints = np.asarray(endpoints, dtype=float)
        if endpoints.shape != (p.size, x.dim):
            raise DimensionMismatchError(f"endpoints of shape {endpoints.shape} for {p.size} weights")
        drift = np.zeros(x.dim)
        for weight, endpoint in zip(p, endpoints):
            if weight:
                drift += weight * log_map(x, SpherePoint(endpoint)).vec
        drift *= g
    return TangentVector(x, proju(x.coords, drift))


# ---------------------------------------------------------------------------
# Geodesic random walk
# ---------------------------------------------------------------------------

def grw_step(x: np.ndarray, drift: np.ndarray, sigma_t: float, dt: float, noise: np.ndarray) -> np.ndarray:
    """exp_x(drift dt + sigma sqrt(dt) noise), both projected to the tangent space at x"""
    return expmap(x, proju(x, drift * dt + sigma_t * math.sqrt(dt) * noise))


def step_grw(x: SpherePoint, drift: TangentVector, sigma_t: float, dt: float, rng: np.random.Generator) -> SpherePoint:
    if dt <= 0:
        raise DomainError("dt must be positive")
    noise = rng.standard_normal(x.dim)
    return SpherePoint(grw_step(x.coords, drift.vec, sigma_t, dt, noise))


def _walk(x: np.ndarray, target: np.ndarray, schedule: NoiseSchedule, grid: np.ndarray, noise_scale: float,
          rng: np.random.Generator, record: Sequence[int]) -> Tuple[List[np.ndarray], int]:
    wanted = set(record)
    out = [x.copy()] if 0 in wanted else []
    clamps = 0
    for i in range(min(max(wanted, default=0), len(grid) - 1)):
        t, dt = grid[i], grid[i + 1] - grid[i]
        drift, n = batch_bridge_drift(x, target, schedule.gamma(t))
        clamps += n
        noise = rng.standard_normal(x.shape)
        x = grw_step(x, drift, noise_scale * schedule.sigma(t), dt, noise)
        if i + 1 in wanted:
            out.append(x.copy())
    return out, clamps


def simulate_bridge(x0: SpherePoint, spec: BridgeSpec, steps: int, stop_delta: float, rng: np.random.Generator,
                    noise_scale: float = 1.0) -> Path:
    """Euler-Maruyama geodesic random walk on [0, T - stop_delta]"""
    grid = time_grid(spec.schedule.T, stop_delta, steps)
    states, clamps = _walk(x0.coords, spec.target.coords, spec.schedule, grid, noise_scale, rng,
                           range(len(grid)))
    if clamps:
        logger.warning(f"⚠️ Clamped {clamps} near-antipodal bridge states")
    return Path(grid, np.stack(states))


def checkpoint_indices(grid: np.ndarray, checkpoints: Sequence[float]) -> List[int]:
    """Grid indices closest to the requested times"""
    return [int(np.argmin(np.abs(grid - t))) for t in checkpoints]


def simulate_bridge_batch(x0: np.ndarray, target: np.ndarray, schedule: NoiseSchedule, steps: int,
                          stop_delta: float, checkpoints: Sequence[float], seed: int, name: str,
                          noise_scale: float = 1.0, workers: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Simulate bridges for every leading-axis row of x0.

    x0 and target have shape (N, ..., D) (target may also broadcast as (D,)).
    Returns (times, states) with states of shape (len(checkpoints), N, ..., D).
    Trajectories are processed in blocks, each with its own stream under
    (seed, name), so the output does not depend on the worker count.
    """
    x0 = np.asarray(x0, dtype=float)
    target = np.broadcast_to(np.asarray(target, dtype=float), x0.shape)
    grid = time_grid(schedule.T, stop_delta, steps)
    idx = checkpoint_indices(grid, checkpoints)
    order = sorted(set(idx))
    slices = block_slices(x0.shape[0])
    rngs = block_rngs(seed, name, x0.shape[0])

    def run(j: int):
        sl = slices[j]
        return _walk(x0[sl].copy(), target[sl], schedule, grid, noise_scale, rngs[j], order)

    results = parallel_map(run, len(slices), workers)
    clamps = sum(n for _, n in results)
    if clamps:
        logger.warning(f"⚠️ Clamped {clamps} near-antipodal bridge states in {name}")
    per_index = {k: np.concatenate([states[pos] for states, _ in results], axis=0) for pos, k in enumerate(order)}
    return grid[idx], np.stack([per_index[k] for k in idx])


# ---------------------------------------------------------------------------
# Radial process
# ---------------------------------------------------------------------------

def _reflect(r: np.ndarray) -> np.ndarray:
    lo, hi = RADIAL_EPS, math.pi - RADIAL_EPS
    r = np.where(r < lo, 2.0 * lo - r, r)
    r = np.where(r > hi, 2.0 * hi - r, r)
    return np.clip(r, lo, hi)


def _radial_walk(r: np.ndarray, d: int, schedule: NoiseSchedule, grid: np.ndarray, noise_scale: float,
                 rng: np.random.Generator, record: Sequence[int]) -> List[np.ndarray]:
    wanted = set(record)
    out = [r.copy()] if 0 in wanted else []
    for i in range(len(grid) - 1):
        t, dt = grid[i], grid[i + 1] - grid[i]
        sig = noise_scale * schedule.sigma(t)
        drift = -schedule.gamma(t) * r + 0.5 * (d - 2) * sig * sig / np.tan(r)
        r = _reflect(r + drift * dt + sig * math.sqrt(dt) * rng.standard_normal(r.shape))
        if i + 1 in wanted:
            out.append(r.copy())
    return out


def simulate_radial(r0: float, spec: BridgeSpec, steps: int, rng: np.random.Generator,
                    stop_delta: Optional[float] = None, noise_scale: float = 1.0) -> RadialPath:
    """Euler-Maruyama on dr = [-gamma r + (d-2) sigma^2/2 cot r] dt + sigma dW"""
    if not 0.0 < r0 < math.pi:
        raise DomainError("initial radius must lie in (0, pi)")
    schedule = spec.schedule
    stop_delta = 1e-3 * schedule.T if stop_delta is None else stop_delta
    grid = time_grid(schedule.T, stop_delta, steps)
    radii = _radial_walk(np.full(1, float(r0)), spec.target.dim, schedule, grid, noise_scale, rng, range(len(grid)))
    return RadialPath(grid, np.concatenate(radii))


def simulate_radial_batch(r0: float, d: int, schedule: NoiseSchedule, steps: int, stop_delta: float, n: int,
                          checkpoints: Sequence[float], seed: int, name: str, noise_scale: float = 1.0,
                          workers: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (times, radii) with radii of shape (len(checkpoints), n)"""
    grid = time_grid(schedule.T, stop_delta, steps)
    idx = checkpoint_indices(grid, checkpoints)
    order = sorted(set(idx))
    slices = block_slices(n)
    rngs = block_rngs(seed, name, n)

    def run(j: int):
        size = slices[j].stop - slices[j].start
        return _radial_walk(np.full(size, float(r0)), d, schedule, grid, noise_scale, rngs[j], order)

    results = parallel_map(run, len(slices), workers)
    per_index = {k: np.concatenate([states[pos] for states in results]) for pos, k in enumerate(order)}
    return grid[idx], np.stack([per_index[k] for k in idx])


def radial_convergence_curve(schedule: NoiseSchedule, d: int, r0: float, steps: int, stop_delta: float, n: int,
                             seed: int, points: int = 21) -> Tuple[np.ndarray, np.ndarray]:
    """Mean radial distance to the endpoint on an even grid of `points` times"""
    checkpoints = np.linspace(0.0, schedule.T - stop_delta, points)
    times, radii = simulate_radial_batch(r0, d, schedule, steps, stop_delta, n, checkpoints, seed,
                                         f"radial/{schedule.sigma_0}->{schedule.sigma_T}")
    return times, radii.mean(axis=1)


def max_interval_drop(curve: np.ndarray) -> float:
    """Largest decrease between consecutive points of a mean radial curve"""
    return float(np.max(-np.diff(curve), initial=0.0))


def early_progress(times: np.ndarray, curve: np.ndarray, at: float) -> float:
    """Share of the total decrease of a mean radial curve reached by time `at`"""
    total = curve[0] - curve[-1]
    if total <= 0:
        raise DomainError("radial curve does not decrease")
    return float((curve[0] - np.interp(at, times, curve)) / total)

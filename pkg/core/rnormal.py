#!/usr/bin/env python3
"""
Riemannian normal on the sphere
- mean point mu_t on the x0-xT great circle and tangent-Gaussian sampling
- table-driven X_t sampling (the simulation-free stand-in for bridge simulation)
- MMD two-sample statistics with a geodesic Gaussian kernel
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from core.bridges import simulate_bridge_batch
from core.exceptions import ArtifactMismatchError, DegenerateFlowError, DomainError
from core.geometry import SpherePoint, expmap, inner, projx, proju
from core.precompute import PrecomputedTable, interpolate
from core.schedules import NoiseSchedule
from core.seeding import named_rng

logger = logging.getLogger(__name__)

ALPHA_TOL = 1e-9
PSI_TOL = 1e-9


@dataclass(frozen=True)
class RNormalParams:
    mu: SpherePoint
    rho: float

    def __post_init__(self):
        if self.rho < 0:
            raise DomainError("rho must be nonnegative")


def batch_mean_point(x0: np.ndarray, xT: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """mu = (alpha/s) xT + (sqrt(1 - alpha^2) - alpha c/s) x0 with c = <x0, xT>, s = sqrt(1 - c^2)"""
    c = inner(x0, xT)
    s = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    alpha = np.asarray(alpha, dtype=float)
    a = (alpha / s)[..., None]
    b = (np.sqrt(1.0 - alpha * alpha) - alpha * c / s)[..., None]
    return projx(a * xT + b * x0)


def batch_sample(mu: np.ndarray, rho: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """exp_mu(rho * proj_mu(noise)) for ambient standard-normal noise"""
    return expmap(mu, np.asarray(rho, dtype=float)[..., None] * proju(mu, noise))


def mean_point(x0: SpherePoint, xT: SpherePoint, alpha: float) -> SpherePoint:
    c = float(x0.coords @ xT.coords)
    if abs(c) >= 1.0 - 1e-12:
        raise DegenerateFlowError("mean point needs distinct, non-antipodal endpoints")
    s = math.sqrt(1.0 - c * c)
    if not -ALPHA_TOL <= alpha <= s + ALPHA_TOL:
        raise DomainError(f"alpha={alpha} outside [0, sin(phi0)={s:.6g}]")
    alpha = min(max(alpha, 0.0), s)
    return SpherePoint(batch_mean_point(x0.coords, xT.coords, np.asarray(alpha)))


def sample(params: RNormalParams, rng: np.random.Generator) -> SpherePoint:
    if params.rho == 0.0:
        return params.mu
    noise = rng.standard_normal(params.mu.dim)
    return SpherePoint(batch_sample(params.mu.coords, np.asarray(params.rho), noise))


def check_table(table: PrecomputedTable, x0: np.ndarray, xT: np.ndarray):
    """Refuse a table built for another sphere or another initial point"""
    diff = {}
    if table.d != x0.shape[-1]:
        diff["d"] = (x0.shape[-1], table.d)
    psi = float(np.ravel(inner(x0, xT))[0]) if x0.shape[-1] == xT.shape[-1] else float("nan")
    if not abs(psi - table.psi0) <= PSI_TOL:
        diff["psi0"] = (psi, table.psi0)
    if diff:
        raise ArtifactMismatchError("Precomputed table", diff)


def sample_xt(x0: SpherePoint, xT: SpherePoint, table: PrecomputedTable, t: float,
              rng: np.random.Generator) -> SpherePoint:
    check_table(table, x0.coords, xT.coords)
    alpha, rho = interpolate(table, t)
    if alpha == 0.0 and rho == 0.0:
        return x0
    mu = mean_point(x0, xT, alpha)
    return sample(RNormalParams(mu, rho), rng)


def batch_sample_xt(x0: np.ndarray, xT: np.ndarray, alpha: np.ndarray, rho: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Vectorized X_t draws; alpha and rho broadcast over the leading axes of x0"""
    mu = batch_mean_point(x0, xT, alpha)
    return batch_sample(mu, np.broadcast_to(rho, mu.shape[:-1]), rng.standard_normal(mu.shape))


# ---------------------------------------------------------------------------
# MMD
# ---------------------------------------------------------------------------

def geodesic_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cos = 1.0 - cdist(a, b, "cosine")
    return np.arccos(np.clip(cos, -1.0, 1.0))


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    dists = geodesic_distances(pooled, pooled)
    off = dists[~np.eye(len(pooled), dtype=bool)]
    h = float(np.median(off))
    return h if h > 0 else 1.0


def _pooled_kernel(a: np.ndarray, b: np.ndarray, bandwidth: Optional[float]) -> Tuple[np.ndarray, float]:
    pooled = np.concatenate([a, b])
    dists = geodesic_distances(pooled, pooled)
    if bandwidth is None:
        bandwidth = median_bandwidth(a, b)
    return np.exp(-dists ** 2 / (2.0 * bandwidth ** 2)), bandwidth


def _unbiased(kernel: np.ndarray, idx_a: np.ndarray, idx_b: np.ndarray) -> float:
    m, n = len(idx_a), len(idx_b)
    kaa = kernel[np.ix_(idx_a, idx_a)]
    kbb = kernel[np.ix_(idx_b, idx_b)]
    kab = kernel[np.ix_(idx_a, idx_b)]
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def mmd2(samples_a: np.ndarray, samples_b: np.ndarray, bandwidth: Optional[float] = None) -> float:
    """Unbiased MMD^2 with kernel exp(-d_g(x, y)^2 / (2 h^2)); median heuristic when h is None"""
    a, b = np.asarray(samples_a, dtype=float), np.asarray(samples_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise DomainError("MMD needs at least two samples per set")
    kernel, _ = _pooled_kernel(a, b, bandwidth)
    return _unbiased(kernel, np.arange(len(a)), np.arange(len(a), len(a) + len(b)))


def mmd_permutation_test(samples_a: np.ndarray, samples_b: np.ndarray, bandwidth: Optional[float],
                         rng: np.random.Generator, permutations: int = 200) -> Tuple[float, float, float]:
    """(MMD^2, permutation-null standard deviation, p-value)"""
    a, b = np.asarray(samples_a, dtype=float), np.asarray(samples_b, dtype=float)
    kernel, _ = _pooled_kernel(a, b, bandwidth)
    m, total = len(a), len(a) + len(b)
    observed = _unbiased(kernel, np.arange(m), np.arange(m, total))
    null = np.empty(permutations)
    for i in range(permutations):
        perm = rng.permutation(total)
        null[i] = _unbiased(kernel, perm[:m], perm[m:])
    p_value = (1.0 + np.count_nonzero(null >= observed)) / (1.0 + permutations)
    return observed, float(null.std()), float(p_value)


def mmd_transition_rows(table: PrecomputedTable, u: np.ndarray, target: np.ndarray, schedule: NoiseSchedule,
                        checkpoints: Sequence[float], n: int, sim_steps: int, stop_delta: float,
                        seed: int) -> List[Tuple[float, float, float]]:
    """(t, MMD^2(simulated, table-approximated), MMD^2(simulated, independent simulation)) per checkpoint"""
    check_table(table, u, target)
    x0 = np.broadcast_to(u, (n, u.size)).copy()
    times, first = simulate_bridge_batch(x0, target, schedule, sim_steps, stop_delta, checkpoints, seed,
                                         "diagnose/sim_a")
    _, second = simulate_bridge_batch(x0, target, schedule, sim_steps, stop_delta, checkpoints, seed,
                                      "diagnose/sim_b")
    rng = named_rng(seed, "diagnose/approx")
    xT = np.broadcast_to(target, x0.shape)
    rows = []
    for j, t in enumerate(times):
        alpha, rho = interpolate(table, float(t))
        approx = batch_sample_xt(x0, xT, np.full(n, alpha), np.full(n, rho), rng)
        bandwidth = median_bandwidth(first[j], second[j])
        rows.append((float(t), mmd2(first[j], approx, bandwidth), mmd2(first[j], second[j], bandwidth)))
        logger.info(f"MMD at t={t:.3f}: approx {rows[-1][1]:.3e}, sim {rows[-1][2]:.3e}")
    return rows

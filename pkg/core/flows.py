#!/usr/bin/env python3
"""
Closed-form geodesic flows
- slerp between two sphere points under a flow schedule kappa_t
- the flow ODE right-hand side and an RK4 integrator for it
- masked and uniform flows, which push forward to the marginals of discrete
  absorbing and uniform diffusion
- brute-force discrete-chain marginals used as oracles
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.exceptions import DegenerateFlowError, DomainError
from core.geometry import (
    SimplexPoint,
    SpherePoint,
    TangentVector,
    barycenter,
    dist,
    log_map,
    logmap,
    one_hot,
)
from core.schedules import FlowSchedule, MaskedKappa, UniformKappa, check_alpha

logger = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class FlowSpec:
    y0: SpherePoint
    y1: SpherePoint
    kappa: FlowSchedule

    def __post_init__(self):
        if self.y0.dim != self.y1.dim:
            raise DegenerateFlowError("flow endpoints live on different spheres")
        theta0 = float(dist(self.y0.coords, self.y1.coords))
        if theta0 < DEGENERATE_TOL or theta0 > math.pi - DEGENERATE_TOL:
            raise DegenerateFlowError(f"flow endpoints are coincident or antipodal (angle {theta0:.3g})")

    @property
    def theta0(self) -> float:
        return float(dist(self.y0.coords, self.y1.coords))


def slerp_at_kappa(spec: FlowSpec, kappa: float) -> SpherePoint:
    theta0 = spec.theta0
    theta_t = kappa * theta0
    s0 = math.sin(theta0)
    coords = (math.sin(theta0 - theta_t) / s0) * spec.y1.coords + (math.sin(theta_t) / s0) * spec.y0.coords
    return SpherePoint(coords)


def slerp_point(spec: FlowSpec, t: float) -> SpherePoint:
    if not 0.0 <= t <= spec.kappa.T:
        raise DomainError(f"t={t} outside [0, {spec.kappa.T}]")
    return slerp_at_kappa(spec, spec.kappa(t))


def flow_ode_rhs(y: SpherePoint, spec: FlowSpec, t: float) -> TangentVector:
    """-(d log kappa/dt) * log_map(y, y1)"""
    direction = log_map(y, spec.y1)
    return TangentVector(y, -spec.kappa.dlog(t) * direction.vec)


def integrate_flow_rk4(spec: FlowSpec, y_start: SpherePoint, t_start: float, t_end: float, steps: int) -> SpherePoint:
    """Classical RK4 on the ambient flow ODE"""
    if steps < 1:
        raise DomainError("steps must be >= 1")
    target = spec.y1.coords

    def rhs(y: np.ndarray, t: float) -> np.ndarray:
        return -spec.kappa.dlog(t) * logmap(y, target)

    h = (t_end - t_start) / steps
    y = y_start.coords.copy()
    for i in range(steps):
        t = t_start + i * h
        k1 = rhs(y, t)
        k2 = rhs(y + 0.5 * h * k1, t + 0.5 * h)
        k3 = rhs(y + 0.5 * h * k2, t + 0.5 * h)
        k4 = rhs(y + h * k3, t + h)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return SpherePoint(y)


# ---------------------------------------------------------------------------
# Discrete-diffusion flows
# ---------------------------------------------------------------------------

def _check_token(k: int, d: int):
    if not 0 <= k < d:
        raise DomainError(f"token {k} out of range for vocabulary size {d}")


def masked_flow_spec(k: int, d: int, kappa: Optional[FlowSchedule] = None) -> FlowSpec:
    """Flow from e_k to the mask vertex (last axis of a (d+1)-dim sphere)"""
    _check_token(k, d)
    return FlowSpec(SpherePoint(one_hot(k, d + 1)), SpherePoint(one_hot(d, d + 1)), kappa or MaskedKappa())


def uniform_flow_spec(k: int, d: int, kappa: Optional[FlowSchedule] = None) -> FlowSpec:
    _check_token(k, d)
    return FlowSpec(SpherePoint(one_hot(k, d)), SpherePoint(barycenter(d, d)), kappa or UniformKappa(d))


def masked_flow_simplex(k: int, alpha: float, d: int) -> SimplexPoint:
    """alpha * e_k + (1 - alpha) * e_mask over d + 1 states"""
    _check_token(k, d)
    alpha = float(check_alpha(alpha))
    probs = np.zeros(d + 1)
    probs[k] = alpha
    probs[d] = 1.0 - alpha
    return SimplexPoint(probs)


def uniform_flow_simplex(k: int, alpha: float, d: int) -> SimplexPoint:
    _check_token(k, d)
    alpha = float(check_alpha(alpha))
    probs = np.full(d, (1.0 - alpha) / d)
    probs[k] = (1.0 + (d - 1) * alpha) / d
    return SimplexPoint(probs)


def absorbing_marginal(k: int, alpha: float, d: int, n_steps: int = 64) -> np.ndarray:
    """Marginal of e_k after n_steps of the absorbing chain with total keep-probability alpha"""
    _check_token(k, d)
    beta = 1.0 - alpha ** (1.0 / n_steps)
    Q = (1.0 - beta) * np.eye(d + 1)
    Q[:, d] += beta
    return one_hot(k, d + 1) @ np.linalg.matrix_power(Q, n_steps)


def uniform_marginal(k: int, alpha: float, d: int, n_steps: int = 64) -> np.ndarray:
    _check_token(k, d)
    beta = 1.0 - alpha ** (1.0 / n_steps)
    Q = (1.0 - beta) * np.eye(d) + beta * np.full((d, d), 1.0 / d)
    return one_hot(k, d) @ np.linalg.matrix_power(Q, n_steps)

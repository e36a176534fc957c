#!/usr/bin/env python3
"""
Time parameterizations
- NoiseSchedule: geometric sigma_t and the bridge time change gamma_t
- Flow schedules kappa_t (masked, uniform, linear, user-supplied)
- MixSchedule: the constant mask/uniform mixing weight
- TimeProposal: importance-sampling density q(t) over [0, T]
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from core.exceptions import DomainError

logger = logging.getLogger(__name__)

Scalar = Union[float, np.ndarray]

ALPHA_TOL = 1e-12
FD_STEP = 1e-6


@dataclass(frozen=True)
class NoiseSchedule:
    """sigma_t = sigma_0^((T-t)/T) * sigma_T^(t/T)"""

    sigma_0: float = 0.1
    sigma_T: float = 1.0
    T: float = 1.0

    def __post_init__(self):
        if self.sigma_0 <= 0 or self.sigma_T <= 0:
            raise DomainError("noise levels must be positive")
        if self.T <= 0:
            raise DomainError("horizon must be positive")
        if self.sigma_0 >= self.sigma_T:
            logger.warning(f"⚠️ sigma_0={self.sigma_0} >= sigma_T={self.sigma_T}: bridges converge early")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_T / self.sigma_0)

    def _check(self, t: Scalar, allow_horizon: bool) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        upper_ok = t <= self.T if allow_horizon else t < self.T
        if np.any(t < 0) or not np.all(upper_ok):
            bound = "[0, T]" if allow_horizon else "[0, T)"
            raise DomainError(f"time outside {bound} with T={self.T}")
        return t

    def sigma(self, t: Scalar) -> Scalar:
        t = self._check(t, allow_horizon=True)
        out = self.sigma_0 * np.exp(self.log_ratio * t / self.T)
        return float(out) if out.ndim == 0 else out

    def sigma_sq_integral(self, t: Scalar) -> Scalar:
        """Integral of sigma_s^2 over [t, T]"""
        t = self._check(t, allow_horizon=True)
        sig2 = (self.sigma_0 * np.exp(self.log_ratio * t / self.T)) ** 2
        L = self.log_ratio
        if L == 0.0:
            out = sig2 * (self.T - t)
        else:
            # expm1 form of (sigma_T^2 - sigma_t^2) T / (2 ln(sigma_T/sigma_0))
            out = sig2 * np.expm1(2.0 * L * (self.T - t) / self.T) * self.T / (2.0 * L)
        return float(out) if out.ndim == 0 else out

    def gamma(self, t: Scalar) -> Scalar:
        t = self._check(t, allow_horizon=False)
        L = self.log_ratio
        if L == 0.0:
            out = 1.0 / (self.T - t)
        else:
            out = 2.0 * L / (self.T * np.expm1(2.0 * L * (self.T - t) / self.T))
        return float(out) if np.ndim(out) == 0 else out

    def gamma_integral(self, t0: float, t1: float) -> float:
        """Integral of gamma_s over [t0, t1], t1 < T"""
        return float(np.log(self.sigma_sq_integral(t0)) - np.log(self.sigma_sq_integral(t1)))

    def scaled(self, noise_scale: float) -> "ScaledNoise":
        return ScaledNoise(self, noise_scale)


@dataclass(frozen=True)
class ScaledNoise:
    """Diffusion coefficient noise_scale * sigma_t; gamma stays the base schedule's"""

    base: NoiseSchedule
    noise_scale: float = 1.0

    @property
    def T(self) -> float:
        return self.base.T

    def sigma(self, t: Scalar) -> Scalar:
        return self.noise_scale * self.base.sigma(t)

    def gamma(self, t: Scalar) -> Scalar:
        return self.base.gamma(t)


def sigma(schedule: NoiseSchedule, t: Scalar) -> Scalar:
    return schedule.sigma(t)


def gamma(schedule: NoiseSchedule, t: Scalar) -> Scalar:
    return schedule.gamma(t)


# ---------------------------------------------------------------------------
# Flow schedules
# ---------------------------------------------------------------------------

def check_alpha(alpha: Scalar) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < -ALPHA_TOL) or np.any(alpha > 1.0 + ALPHA_TOL):
        raise DomainError("alpha_t must lie in [0, 1]")
    return np.clip(alpha, 0.0, 1.0)


def _scalar(x: np.ndarray) -> Scalar:
    return float(x) if np.ndim(x) == 0 else x


def kappa_masked(alpha: Scalar) -> Scalar:
    alpha = check_alpha(alpha)
    return _scalar((2.0 / np.pi) * np.arcsin(np.sqrt(alpha)))


def dkappa_masked(alpha: Scalar) -> Scalar:
    alpha = check_alpha(alpha)
    with np.errstate(divide="ignore"):
        return _scalar(1.0 / (np.pi * np.sqrt(alpha * (1.0 - alpha))))


def uniform_theta0(d: int) -> float:
    """Angle between a vertex and the barycenter of the d-simplex image"""
    if d < 2:
        raise DomainError("uniform flow needs d >= 2")
    return math.acos(1.0 / math.sqrt(d))


def kappa_uniform(alpha: Scalar, d: int) -> Scalar:
    alpha = check_alpha(alpha)
    theta0 = uniform_theta0(d)
    s = np.sqrt(1.0 - alpha) * math.sin(theta0)
    return _scalar(1.0 - np.arcsin(s) / theta0)


def dkappa_uniform(alpha: Scalar, d: int) -> Scalar:
    alpha = check_alpha(alpha)
    theta0 = uniform_theta0(d)
    sin0 = math.sin(theta0)
    s = np.sqrt(1.0 - alpha) * sin0
    with np.errstate(divide="ignore"):
        return _scalar(sin0 / (2.0 * theta0 * np.sqrt(1.0 - alpha) * np.sqrt(1.0 - s * s)))


@dataclass(frozen=True)
class LinearAlpha:
    """alpha_t = 1 - t/T, the default discrete noise schedule"""

    T: float = 1.0

    def __call__(self, t: Scalar) -> Scalar:
        return _scalar(1.0 - np.asarray(t, dtype=float) / self.T)

    def derivative(self, t: Scalar) -> Scalar:
        return _scalar(np.full(np.shape(t), -1.0 / self.T))


class FlowSchedule:
    """kappa: [0, T] -> [0, 1] with kappa_0 = 1, kappa_T = 0"""

    T: float = 1.0

    def __call__(self, t: float) -> float:
        raise NotImplementedError

    def dlog(self, t: float) -> float:
        """d log(kappa_t)/dt, centered finite difference unless overridden"""
        k = self(t)
        if k == 0.0:
            raise DomainError("d log kappa is undefined where kappa vanishes")
        h = FD_STEP
        lo, hi = max(t - h, 0.0), min(t + h, self.T)
        return (math.log(self(hi)) - math.log(self(lo))) / (hi - lo)


class MaskedKappa(FlowSchedule):
    def __init__(self, alpha: Optional[LinearAlpha] = None):
        self.alpha = alpha or LinearAlpha()
        self.T = self.alpha.T

    def __call__(self, t: float) -> float:
        return kappa_masked(self.alpha(t))

    def dlog(self, t: float) -> float:
        a = self.alpha(t)
        k = kappa_masked(a)
        if k == 0.0:
            raise DomainError("d log kappa is undefined where kappa vanishes")
        return dkappa_masked(a) * self.alpha.derivative(t) / k


class UniformKappa(FlowSchedule):
    def __init__(self, d: int, alpha: Optional[LinearAlpha] = None):
        self.d = d
        self.alpha = alpha or LinearAlpha()
        self.T = self.alpha.T

    def __call__(self, t: float) -> float:
        return kappa_uniform(self.alpha(t), self.d)

    def dlog(self, t: float) -> float:
        a = self.alpha(t)
        k = kappa_uniform(a, self.d)
        if k == 0.0:
            raise DomainError("d log kappa is undefined where kappa vanishes")
        return dkappa_uniform(a, self.d) * self.alpha.derivative(t) / k


class LinearKappa(FlowSchedule):
    def __init__(self, T: float = 1.0):
        self.T = T

    def __call__(self, t: float) -> float:
        return 1.0 - t / self.T

    def dlog(self, t: float) -> float:
        if t >= self.T:
            raise DomainError("d log kappa is undefined where kappa vanishes")
        return -1.0 / (self.T - t)


class CallableKappa(FlowSchedule):
    """User-supplied kappa; derivative by finite difference"""

    def __init__(self, fn: Callable[[float], float], T: float = 1.0):
        self.fn = fn
        self.T = T

    def __call__(self, t: float) -> float:
        return float(self.fn(t))


# ---------------------------------------------------------------------------
# Mixing weight and time proposal
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixSchedule:
    """Constant weight of the mask initial point in mixture mode"""

    lambda_: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lambda_ <= 1.0:
            raise DomainError("mixing weight must lie in [0, 1]")


@dataclass(frozen=True)
class TimeProposal:
    epsilon: float = 0.05
    a: float = 0.2
    b: float = 0.8
    T: float = 1.0
    Z: float = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise DomainError("proposal epsilon must lie in (0, 0.5)")
        if not 0.0 <= self.a < self.b <= self.T:
            raise DomainError("proposal plateau needs 0 <= a < b <= T")
        object.__setattr__(self, "Z", self.epsilon * self.T + 1.0 - 2.0 * self.epsilon)

    @classmethod
    def default(cls, T: float = 1.0) -> "TimeProposal":
        return cls(0.05, 0.2 * T, 0.8 * T, T)

    @property
    def background_mass(self) -> float:
        return self.epsilon * self.T / self.Z

    def density(self, t: Scalar) -> Scalar:
        t = np.asarray(t, dtype=float)
        plateau = ((t >= self.a) & (t <= self.b)) / (self.b - self.a)
        out = (self.epsilon + (1.0 - 2.0 * self.epsilon) * plateau) / self.Z
        out = np.where((t < 0) | (t > self.T), 0.0, out)
        return _scalar(out)

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> Scalar:
        background = rng.random(size) < self.background_mass
        wide = rng.uniform(0.0, self.T, size)
        narrow = rng.uniform(self.a, self.b, size)
        return _scalar(np.where(background, wide, narrow))

    def weight_bound(self) -> float:
        """Upper bound on 1/q(t)"""
        return self.Z / self.epsilon


def sample_time(proposal: TimeProposal, rng: np.random.Generator) -> float:
    return float(proposal.sample(rng))


def proposal_density(proposal: TimeProposal, t: Scalar) -> Scalar:
    return proposal.density(t)

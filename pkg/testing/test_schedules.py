#!/usr/bin/env python3
"""
Schedule tests
- geometric sigma_t and the bridge time change gamma_t
- flow schedules kappa_t
- importance-sampling time proposal
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate

from core.exceptions import DomainError
from core.schedules import (
    LinearKappa,
    MaskedKappa,
    MixSchedule,
    NoiseSchedule,
    TimeProposal,
    UniformKappa,
    kappa_masked,
    kappa_uniform,
    uniform_theta0,
)


def test_sigma_endpoints_and_midpoint(schedule):
    assert schedule.sigma(0.0) == pytest.approx(0.1)
    assert schedule.sigma(1.0) == pytest.approx(1.0)
    assert schedule.sigma(0.5) == pytest.approx(math.sqrt(0.1))


def test_gamma_is_sigma_squared_over_remaining_variance(schedule):
    for t in (0.0, 0.3, 0.9, 0.999):
        remaining, _ = integrate.quad(lambda s: schedule.sigma(s) ** 2, t, 1.0)
        assert schedule.gamma(t) == pytest.approx(schedule.sigma(t) ** 2 / remaining, rel=1e-8)


def test_gamma_constant_sigma_limit():
    flat = NoiseSchedule(0.5, 0.5, 2.0)
    assert flat.gamma(0.5) == pytest.approx(1.0 / 1.5)


def test_gamma_refuses_horizon(schedule):
    with pytest.raises(DomainError):
        schedule.gamma(1.0)


def test_gamma_integral_diverges_towards_horizon(schedule):
    values = [schedule.gamma_integral(0.0, 1.0 - 10.0 ** -k) for k in (2, 4, 6)]
    assert values[0] < values[1] < values[2]
    assert values[2] - values[1] == pytest.approx(math.log(100.0), rel=1e-3)


def test_gamma_integral_matches_quadrature(schedule):
    expected, _ = integrate.quad(schedule.gamma, 0.1, 0.7)
    assert schedule.gamma_integral(0.1, 0.7) == pytest.approx(expected, rel=1e-9)


def test_decreasing_schedule_warns(caplog):
    NoiseSchedule(1.0, 0.1, 1.0)
    assert "sigma_0" in caplog.text


def test_masked_kappa_values():
    assert kappa_masked(1.0) == pytest.approx(1.0)
    assert kappa_masked(0.0) == 0.0
    assert kappa_masked(0.5) == pytest.approx(0.5)


def test_uniform_kappa_endpoints():
    for d in (2, 3, 27):
        assert kappa_uniform(1.0, d) == pytest.approx(1.0)
        assert kappa_uniform(0.0, d) == pytest.approx(0.0, abs=1e-15)
    assert uniform_theta0(4) == pytest.approx(math.acos(0.5))


def test_alpha_outside_unit_interval():
    with pytest.raises(DomainError):
        kappa_masked(1.5)


@pytest.mark.parametrize("kappa", [MaskedKappa(), UniformKappa(5), LinearKappa()])
def test_dlog_matches_finite_difference(kappa):
    for t in (0.2, 0.5, 0.8):
        h = 1e-6
        fd = (math.log(kappa(t + h)) - math.log(kappa(t - h))) / (2 * h)
        assert kappa.dlog(t) == pytest.approx(fd, rel=1e-5)


def test_mix_schedule_range():
    with pytest.raises(DomainError):
        MixSchedule(1.5)


def test_proposal_density_integrates_to_one():
    q = TimeProposal.default()
    total, _ = integrate.quad(q.density, 0.0, 1.0, points=[0.2, 0.8])
    assert total == pytest.approx(1.0, abs=1e-10)
    assert q.density(1.5) == 0.0
    assert q.weight_bound() == pytest.approx(q.Z / q.epsilon)


def test_proposal_plateau_values():
    q = TimeProposal(0.05, 0.2, 0.8, 1.0)
    assert q.density(0.5) == pytest.approx((0.05 + 0.9 / 0.6) / 0.95)
    assert q.density(0.1) == pytest.approx(0.05 / 0.95)


def test_proposal_sampling_is_unbiased_for_importance_weights(rng):
    q = TimeProposal.default()
    t = q.sample(rng, 200_000)
    f = lambda s: np.sin(3.0 * s) ** 2  # noqa: E731
    estimate = f(t) / q.density(t)
    exact, _ = integrate.quad(f, 0.0, 1.0)
    se = estimate.std() / math.sqrt(len(t))
    assert abs(estimate.mean() - exact) < 3 * se
    assert np.all(1.0 / q.density(t) <= q.weight_bound() + 1e-12)


def test_proposal_rejects_bad_plateau():
    with pytest.raises(DomainError):
        TimeProposal(0.05, 0.8, 0.2, 1.0)
    with pytest.raises(DomainError):
        TimeProposal(0.6, 0.2, 0.8, 1.0)


def test_vectorized_sigma(schedule):
    t = np.linspace(0.0, 1.0, 5)
    assert_allclose(schedule.sigma(t), 0.1 * 10.0 ** t)

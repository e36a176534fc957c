#!/usr/bin/env python3
"""
Flow tests
- closed-form slerp flows against discrete-chain marginals
- RK4 integration of the flow ODE (accuracy and fourth-order convergence)
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.exceptions import DegenerateFlowError, DomainError
from core.flows import (
    FlowSpec,
    absorbing_marginal,
    flow_ode_rhs,
    integrate_flow_rk4,
    masked_flow_simplex,
    masked_flow_spec,
    slerp_point,
    uniform_flow_simplex,
    uniform_flow_spec,
    uniform_marginal,
)
from core.geometry import SpherePoint, sphere_to_simplex
from core.schedules import LinearAlpha, LinearKappa

ALPHAS = np.linspace(0.0, 1.0, 20)


@pytest.mark.parametrize("d", [2, 3, 8])
def test_masked_flow_matches_absorbing_chain(d):
    alpha_of = LinearAlpha()
    for k in range(d):
        spec = masked_flow_spec(k, d)
        for alpha in ALPHAS:
            t = 1.0 - alpha
            on_simplex = sphere_to_simplex(slerp_point(spec, t)).probs
            assert_allclose(on_simplex, masked_flow_simplex(k, alpha_of(t), d).probs, atol=1e-9)
            if alpha > 0:
                assert_allclose(on_simplex, absorbing_marginal(k, alpha, d), atol=1e-9)


@pytest.mark.parametrize("d", [2, 3, 8])
def test_uniform_flow_matches_uniform_chain(d):
    for k in range(d):
        spec = uniform_flow_spec(k, d)
        for alpha in ALPHAS:
            on_simplex = sphere_to_simplex(slerp_point(spec, 1.0 - alpha)).probs
            assert_allclose(on_simplex, uniform_flow_simplex(k, alpha, d).probs, atol=1e-9)
            if alpha > 0:
                assert_allclose(on_simplex, uniform_marginal(k, alpha, d), atol=1e-9)


def test_masked_simplex_example():
    assert_allclose(masked_flow_simplex(0, 0.25, 3).probs, [0.25, 0.0, 0.0, 0.75])


def test_flow_endpoints():
    spec = masked_flow_spec(1, 4)
    assert_allclose(slerp_point(spec, 0.0).coords, spec.y0.coords, atol=1e-15)
    assert_allclose(slerp_point(spec, 1.0).coords, spec.y1.coords, atol=1e-15)
    with pytest.raises(DomainError):
        slerp_point(spec, 1.5)


def test_degenerate_flow():
    u = SpherePoint([1.0, 0.0])
    with pytest.raises(DegenerateFlowError):
        FlowSpec(u, u, LinearKappa())
    with pytest.raises(DegenerateFlowError):
        FlowSpec(u, SpherePoint([-1.0, 0.0]), LinearKappa())


def test_ode_rhs_is_tangent_derivative_of_slerp():
    spec = uniform_flow_spec(0, 5)
    t, h = 0.4, 1e-6
    fd = (slerp_point(spec, t + h).coords - slerp_point(spec, t - h).coords) / (2 * h)
    assert_allclose(flow_ode_rhs(slerp_point(spec, t), spec, t).vec, fd, atol=1e-7)


def _rk4_error(spec, t0, t1, steps):
    y = integrate_flow_rk4(spec, slerp_point(spec, t0), t0, t1, steps)
    return float(np.max(np.abs(y.coords - slerp_point(spec, t1).coords)))


@pytest.mark.parametrize("spec", [masked_flow_spec(0, 3), uniform_flow_spec(2, 8)])
def test_rk4_matches_closed_form(spec):
    # kappa has a d log kappa singularity at the endpoints, so stay inside them
    assert _rk4_error(spec, 0.05, 0.95, 1000) < 1e-5


def test_rk4_is_fourth_order():
    spec = FlowSpec(SpherePoint([1.0, 0.0, 0.0]), SpherePoint([0.0, 0.6, 0.8]), LinearKappa())
    coarse = _rk4_error(spec, 0.0, 0.9, 20)
    fine = _rk4_error(spec, 0.0, 0.9, 40)
    assert coarse / fine >= 8.0
    assert math.isfinite(coarse)

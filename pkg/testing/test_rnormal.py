#!/usr/bin/env python3
"""
Riemannian normal tests
- mean point on the x0-xT great circle
- tangent-Gaussian sampling and its mean projection
- table checks and MMD statistics
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.exceptions import ArtifactMismatchError, DegenerateFlowError, DomainError
from core.geometry import SpherePoint, geodesic_distance, one_hot
from core.precompute import PrecomputedTable, build_table, kummer_F
from core.rnormal import (
    RNormalParams,
    batch_mean_point,
    check_table,
    mean_point,
    mmd2,
    mmd_permutation_test,
    sample,
    sample_xt,
)
from testing.helpers import random_sphere


def _table(d, psi0):
    times = np.linspace(0.0, 1.0, 3)
    return PrecomputedTable(d, psi0, times, np.array([0.0, 0.5, 1.0]), np.array([0.0, 0.4, 0.0]),
                            {"init_kind": "mask"})


def test_mean_point_endpoints():
    x0, xT = SpherePoint(one_hot(3, 4)), SpherePoint(one_hot(0, 4))
    assert_allclose(mean_point(x0, xT, 0.0).coords, x0.coords, atol=1e-15)
    assert_allclose(mean_point(x0, xT, 1.0).coords, xT.coords, atol=1e-15)


def test_mean_point_projection_on_target_is_alpha_term():
    x0 = SpherePoint([1.0, 0.0, 0.0])
    xT = SpherePoint([0.6, 0.8, 0.0])
    mu = mean_point(x0, xT, 0.5)
    # the component of mu orthogonal to x0 along the great circle has length alpha
    assert mu.coords[1] == pytest.approx(0.5)
    assert mu.coords[2] == 0.0


def test_mean_point_domain():
    x0, xT = SpherePoint([1.0, 0.0, 0.0]), SpherePoint([0.6, 0.8, 0.0])
    with pytest.raises(DomainError):
        mean_point(x0, xT, 0.9)
    with pytest.raises(DegenerateFlowError):
        mean_point(x0, x0, 0.1)


def test_batch_mean_point_stays_on_sphere(rng):
    x0 = random_sphere(rng, 20, 6)
    xT = random_sphere(rng, 20, 6)
    c = np.sum(x0 * xT, axis=-1)
    alpha = 0.5 * np.sqrt(1 - c * c)
    assert_allclose(np.linalg.norm(batch_mean_point(x0, xT, alpha), axis=-1), 1.0, atol=1e-12)


def test_zero_spread_sample_is_the_mean(rng):
    mu = SpherePoint(one_hot(1, 5))
    assert sample(RNormalParams(mu, 0.0), rng) is mu
    with pytest.raises(DomainError):
        RNormalParams(mu, -0.1)


def test_sample_mean_projection_is_damped_kummer(rng):
    d, rho, n = 6, 0.7, 20_000
    mu = SpherePoint(one_hot(0, d))
    projections = np.array([sample(RNormalParams(mu, rho), rng).coords[0] for _ in range(n)])
    se = projections.std() / math.sqrt(n)
    assert abs(projections.mean() - kummer_F(rho, d - 1)) < 4 * se


def test_check_table_mismatch():
    table = _table(4, 0.0)
    check_table(table, one_hot(3, 4), one_hot(0, 4))
    with pytest.raises(ArtifactMismatchError) as info:
        check_table(table, one_hot(4, 5), one_hot(0, 5))
    assert "d" in info.value.diff
    with pytest.raises(ArtifactMismatchError) as info:
        check_table(table, np.full(4, 0.5), one_hot(0, 4))
    assert "psi0" in info.value.diff


def test_sample_xt_at_time_zero_returns_start(rng):
    x0, xT = SpherePoint(one_hot(3, 4)), SpherePoint(one_hot(0, 4))
    assert sample_xt(x0, xT, _table(4, 0.0), 0.0, rng) is x0
    mid = sample_xt(x0, xT, _table(4, 0.0), 0.5, rng)
    assert mid.coords @ mid.coords == pytest.approx(1.0)


def test_sample_xt_near_the_horizon_lands_on_the_target(rng, schedule):
    x0, xT = SpherePoint(one_hot(3, 4)), SpherePoint(one_hot(0, 4))
    table = build_table(x0, schedule, 4, 4096, 1000, seed=5, num_tokens=3, init_kind="mask")
    draws = [sample_xt(x0, xT, table, schedule.T - 1e-3, rng) for _ in range(2000)]
    assert np.mean([geodesic_distance(x, xT) for x in draws]) < 0.1


def test_mmd_separates_distributions(rng):
    same_a = random_sphere(rng, 200, 4)
    same_b = random_sphere(rng, 200, 4)
    near = SpherePoint(one_hot(0, 4)).coords + 0.1 * rng.standard_normal((200, 4))
    near /= np.linalg.norm(near, axis=1, keepdims=True)
    assert abs(mmd2(same_a, same_b)) < 0.02
    assert mmd2(same_a, near) > 0.1
    assert mmd2(same_a, near, 0.5) == pytest.approx(mmd2(near, same_a, 0.5), abs=1e-12)
    with pytest.raises(DomainError):
        mmd2(same_a[:1], same_b)


def test_mmd_permutation_test(rng):
    a = random_sphere(rng, 100, 3)
    b = random_sphere(rng, 100, 3)
    shifted = one_hot(0, 3) + 0.3 * rng.standard_normal((100, 3))
    shifted /= np.linalg.norm(shifted, axis=1, keepdims=True)
    _, null_std, p_same = mmd_permutation_test(a, b, None, rng, permutations=100)
    observed, _, p_diff = mmd_permutation_test(a, shifted, None, rng, permutations=100)
    assert null_std > 0
    assert p_same > 0.01
    assert p_diff < 0.05 and observed > 0

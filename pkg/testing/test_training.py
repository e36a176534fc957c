#!/usr/bin/env python3
"""
Training tests
- dimension splitting codec
- drift MSE / cross-entropy objectives, the CE domination bound and
  importance-sampling unbiasedness
- optimizer, batch preparation and the training loop
"""

import csv
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate

from core.exceptions import ArtifactMismatchError, DomainError, TrainingError
from core.precompute import PrecomputedTable
from core.predictor import MLPPredictor
from core.schedules import TimeProposal
from core.training import (
    AdamW,
    FrozenBatch,
    SplitCodec,
    TrainConfig,
    barycenter_point,
    ce_dominance_bound,
    clip_gradient,
    decode_split,
    draw_times,
    encode_split,
    initial_points,
    loss_and_grad,
    loss_ce,
    loss_ce_importance,
    loss_mse,
    mask_point,
    new_state,
    prepare_batch,
    table_for,
    train,
)
from testing.helpers import fd_gradient, random_sphere


def _tables(codec):
    times = np.linspace(0.0, 1.0, 11)
    alpha = np.linspace(0.0, 0.5, 11)
    rho = 0.2 * np.sin(np.pi * times)
    tables = {}
    for kind, point in (("mask", mask_point), ("barycenter", barycenter_point)):
        if kind == "mask" and not codec.has_mask:
            continue
        psi0 = float(point(codec)[0])
        tables[kind] = PrecomputedTable(codec.sphere_dim, psi0, times, alpha, rho, {"init_kind": kind})
    return tables


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------

def test_codec_shapes():
    assert SplitCodec(27).sphere_dim == 28 and SplitCodec(27).m == 1
    assert SplitCodec(27, 3).m == 3 and SplitCodec(27, 3).sphere_dim == 4
    assert SplitCodec(27, 3, "uniform").sphere_dim == 3
    assert SplitCodec(27, 3, "uniform").mask_axis is None
    assert SplitCodec(28, 3).m == 4


def test_codec_round_trip_is_exhaustive():
    codec = SplitCodec(65536, 16)
    ids = np.arange(65536)
    digits = codec.encode(ids)
    assert digits.shape == (65536, 4)
    decoded, invalid = codec.decode(digits)
    assert invalid == 0
    assert np.array_equal(decoded, ids)


def test_codec_is_big_endian():
    codec = SplitCodec(27, 3)
    assert encode_split(5, codec) == (0, 1, 2)
    assert decode_split((2, 2, 2), codec) == 26


def test_codec_decode_clips_out_of_range_combinations():
    codec = SplitCodec(10, 4)
    with pytest.raises(DomainError):
        codec.decode(np.array([3, 3]))
    ids, invalid = codec.decode(np.array([[3, 3], [0, 1]]), clip=True)
    assert invalid == 1 and list(ids) == [9, 1]
    with pytest.raises(DomainError):
        codec.encode(np.array([10]))


def test_embed_is_one_hot():
    codec = SplitCodec(9, 3)
    points = codec.embed(np.array([[7]]))
    assert points.shape == (1, 1, 2, 4)
    assert_allclose(points[0, 0], [[0, 0, 1, 0], [0, 1, 0, 0]])


def test_initial_points_by_mode(rng):
    masked, is_mask = initial_points(SplitCodec(4, 0, "masked"), (2, 3), rng)
    assert is_mask.all() and masked.shape == (2, 3, 1, 5)
    uniform, is_mask = initial_points(SplitCodec(4, 0, "uniform"), (2, 3), rng)
    assert not is_mask.any()
    assert_allclose(uniform[..., 0], 0.5)
    mixture = SplitCodec(4, 0, "mixture")
    assert not initial_points(mixture, (50,), rng, 0.0)[1].any()
    assert initial_points(mixture, (50,), rng, 1.0)[1].all()
    share = initial_points(mixture, (20_000,), rng, 0.3)[1].mean()
    assert share == pytest.approx(0.3, abs=4 * math.sqrt(0.3 * 0.7 / 20_000))


def test_uniform_mode_has_no_mask_point():
    with pytest.raises(DomainError):
        mask_point(SplitCodec(4, 0, "uniform"))


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

def test_mse_is_zero_for_the_one_hot_target(rng, schedule):
    x = np.abs(random_sphere(rng, 1, 5)[0])
    value, _ = loss_mse(np.eye(5)[2], x, 2, 0.4, schedule)
    assert value == pytest.approx(0.0, abs=1e-20)


def test_mse_gradient_matches_finite_differences(rng, schedule):
    x = np.abs(random_sphere(rng, 1, 6)[0])
    p = rng.dirichlet(np.ones(6))
    _, grad = loss_mse(p, x, 1, 0.6, schedule)
    expected = fd_gradient(lambda q: loss_mse(q, x, 1, 0.6, schedule)[0], p)
    assert_allclose(grad, expected, rtol=1e-5, atol=1e-8)


def test_ce_values_and_gradient():
    value, grad = loss_ce(np.array([0.25, 0.75]), 1)
    assert value == pytest.approx(-math.log(0.75))
    assert_allclose(grad, [0.0, -1.0 / 0.75])


def test_ce_clips_zero_probability(caplog):
    value, _ = loss_ce(np.array([1.0, 0.0]), 1)
    assert value == pytest.approx(-math.log(1e-12))
    assert "Clipped" in caplog.text


def test_cross_entropy_dominates_drift_mse(rng, schedule):
    for _ in range(1000):
        d = int(rng.integers(2, 8))
        x = random_sphere(rng, 1, d)[0]
        if np.min(x) < -1.0 + 1e-6:
            continue
        p = rng.dirichlet(np.ones(d) * 0.5)
        k = int(rng.integers(d))
        t = float(rng.uniform(0.0, 0.99))
        mse, _ = loss_mse(p, x, k, t, schedule)
        assert mse <= ce_dominance_bound(p, k, t, schedule) * (1 + 1e-9) + 1e-12


def test_importance_weighted_ce_is_unbiased(rng):
    proposal = TimeProposal.default()

    def probs_at(t):
        p = 0.2 + 0.7 * t
        return np.array([1.0 - p, p])

    exact, _ = integrate.quad(lambda t: -math.log(probs_at(t)[1]), 0.0, 1.0)
    times = np.atleast_1d(proposal.sample(rng, 20_000))
    estimates = np.array([loss_ce_importance(probs_at(t), 1, t, proposal) for t in times])
    se = estimates.std() / math.sqrt(len(estimates))
    assert abs(estimates.mean() - exact) < 4 * se


def test_draw_times_respects_the_stop(rng, schedule):
    proposal = TimeProposal.default()
    t, w = draw_times("ce_importance", 5000, schedule, proposal, 1e-2, rng)
    assert t.max() <= 1.0 - 1e-2
    assert np.all(w > 0) and np.all(w <= proposal.weight_bound() + 1e-9)
    t, w = draw_times("mse", 100, schedule, proposal, 1e-2, rng)
    assert np.all(w == 1.0)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def test_adamw_first_step_moves_by_learning_rate():
    opt = AdamW(lr=0.1)
    updated = opt.update(np.zeros(2), np.array([1.0, -2.0]))
    assert_allclose(updated, [-0.1, 0.1], rtol=1e-6)


def test_adamw_weight_decay_is_decoupled():
    opt = AdamW(lr=0.1, weight_decay=0.5)
    assert_allclose(opt.update(np.ones(3), np.zeros(3)), 0.95)


def test_clip_gradient():
    grad, norm = clip_gradient(np.array([3.0, 4.0]), 1.0)
    assert norm == 5.0
    assert_allclose(grad, [0.6, 0.8])
    same, _ = clip_gradient(np.array([0.3, 0.4]), 1.0)
    assert_allclose(same, [0.3, 0.4])


def test_train_config_validation():
    with pytest.raises(DomainError):
        TrainConfig(objective="hinge")
    with pytest.raises(DomainError):
        TrainConfig(batch_size=0)


# ---------------------------------------------------------------------------
# Batches and the loop
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["masked", "uniform", "mixture"])
def test_prepare_batch_from_tables(rng, schedule, mode):
    codec = SplitCodec(9, 3, mode)
    cfg = TrainConfig(objective="ce", batch_size=4, seq_len=5, lambda_=0.5)
    ids = rng.integers(0, 9, (4, 5))
    batch = prepare_batch(ids, codec, _tables(codec), schedule, TimeProposal.default(), cfg, rng)
    assert batch.x_t.shape == (4, 5, 2, codec.sphere_dim)
    assert_allclose(np.linalg.norm(batch.x_t, axis=-1), 1.0, atol=1e-12)
    assert np.array_equal(batch.targets, codec.encode(ids))


def test_prepare_batch_by_simulation(rng, schedule):
    codec = SplitCodec(4, 0, "masked")
    cfg = TrainConfig(objective="mse", batch_size=2, seq_len=3, xt_sampler="simulate", sim_steps=20)
    batch = prepare_batch(rng.integers(0, 4, (2, 3)), codec, {}, schedule, TimeProposal.default(), cfg, rng)
    assert_allclose(np.linalg.norm(batch.x_t, axis=-1), 1.0, atol=1e-12)


def test_missing_table_kind_is_a_mismatch():
    codec = SplitCodec(4, 0, "mixture")
    with pytest.raises(ArtifactMismatchError):
        table_for({}, "mask", codec)
    with pytest.raises(ArtifactMismatchError):
        table_for(_tables(SplitCodec(5, 0, "mixture")), "mask", codec)


def _small_predictor(codec, seed=0):
    return MLPPredictor(codec.d, codec.m, codec.base, codec.sphere_dim, [8], context="meanpool",
                        time_features=4, masked=codec.has_mask, seed=seed)


@pytest.mark.parametrize("objective", ["mse", "ce", "ce_importance"])
def test_batch_gradient_matches_finite_differences(rng, schedule, objective):
    codec = SplitCodec(4, 2, "mixture")
    predictor = _small_predictor(codec)
    cfg = TrainConfig(objective=objective, batch_size=2, seq_len=3)
    batch = prepare_batch(rng.integers(0, 4, (2, 3)), codec, _tables(codec), schedule,
                          TimeProposal.default(), cfg, rng)
    start = predictor.params.copy()
    _, grad, _ = loss_and_grad(predictor, batch, objective, schedule)

    def objective_value(flat):
        predictor.set_params(flat)
        return loss_and_grad(predictor, batch, objective, schedule)[0]

    expected = fd_gradient(objective_value, start.copy())
    assert_allclose(grad, expected, rtol=1e-4, atol=1e-7)


def test_non_finite_loss_raises_training_error(rng, schedule):
    codec = SplitCodec(3, 0, "masked")
    predictor = _small_predictor(codec)
    x_t = random_sphere(rng, 2, 4).reshape(1, 2, 1, 4)
    batch = FrozenBatch(x_t, np.array([0.3]), np.array([np.inf]), np.zeros((1, 2, 1), dtype=int),
                        codec.embed(np.zeros((1, 2), dtype=int)))
    with pytest.raises(TrainingError) as info:
        loss_and_grad(predictor, batch, "ce", schedule, batch_index=7)
    assert info.value.batch_index == 7


@pytest.mark.parametrize("objective", ["mse", "ce", "ce_importance"])
def test_small_optimizer_step_decreases_a_frozen_batch_loss(rng, schedule, objective):
    codec = SplitCodec(4, 2, "mixture")
    cfg = TrainConfig(objective=objective, batch_size=4, seq_len=3)
    for _ in range(10):
        predictor = _small_predictor(codec)
        batch = prepare_batch(rng.integers(0, 4, (4, 3)), codec, _tables(codec), schedule,
                              TimeProposal.default(), cfg, rng)
        before, grad, _ = loss_and_grad(predictor, batch, objective, schedule)
        predictor.set_params(AdamW(lr=1e-4).update(predictor.params, grad))
        after, _, _ = loss_and_grad(predictor, batch, objective, schedule)
        assert after < before


def test_training_reduces_the_loss(tmp_path, schedule):
    codec = SplitCodec(3, 0, "masked")
    cfg = TrainConfig(objective="ce", batch_size=8, steps=60, lr=1e-2, ema_decay=0.9, seq_len=4, log_every=20)
    state = new_state(_small_predictor(codec), cfg)
    log_path = tmp_path / "train_log.csv"
    train(state, lambda rng, n: np.zeros((n, 4), dtype=int), codec, _tables(codec), schedule,
          TimeProposal.default(), cfg, str(log_path))
    assert state.step == 60
    assert np.mean(state.history[-5:]) < 0.5 * np.mean(state.history[:5])
    with open(log_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "grad_norm", "wall_ms"] and len(rows) == 61
    assert not np.allclose(state.ema, state.predictor.params)


def test_training_is_reproducible(schedule):
    codec = SplitCodec(3, 0, "masked")
    cfg = TrainConfig(objective="ce_importance", batch_size=4, steps=5, seq_len=3, seed=9)
    draw = lambda rng, n: rng.integers(0, 3, (n, 3))  # noqa: E731
    first = train(new_state(_small_predictor(codec), cfg), draw, codec, _tables(codec), schedule,
                  TimeProposal.default(), cfg)
    second = train(new_state(_small_predictor(codec), cfg), draw, codec, _tables(codec), schedule,
                   TimeProposal.default(), cfg)
    assert first.history == second.history
    assert np.array_equal(first.predictor.params, second.predictor.params)

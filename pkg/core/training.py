#!/usr/bin/env python3
"""
Training
- SplitCodec: base-b digit encoding of token ids, one sphere per digit
- Objectives: drift MSE, cross-entropy and importance-sampled cross-entropy
- Simulation-free X_t sampling from precomputed tables (or bridge simulation)
- AdamW + EMA on the flat parameter vector, CSV training log
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from core.bridges import BATCH_CLAMP, batch_mixture_drift, simulate_bridge_batch
from core.exceptions import ArtifactMismatchError, DomainError, TrainingError
from core.geometry import barycenter, one_hot, theta_over_sin
from core.precompute import PrecomputedTable, interpolate
from core.predictor import MLPPredictor
from core.rnormal import batch_sample_xt
from core.schedules import NoiseSchedule, TimeProposal
from core.seeding import child_seed, named_rng

logger = logging.getLogger(__name__)

PROB_CLIP = 1e-12
OBJECTIVES = ("mse", "ce", "ce_importance")


# ---------------------------------------------------------------------------
# Dimension splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitCodec:
    """Token k in [0, d) as m base-b digits (big-endian); base 0 means no split"""

    d: int
    b: int = 0
    mode: str = "masked"

    def __post_init__(self):
        if self.d < 2:
            raise DomainError("vocabulary size must be >= 2")
        if self.b != 0 and not 2 <= self.b:
            raise DomainError("split base must be >= 2")

    @property
    def base(self) -> int:
        return self.b if self.b else self.d

    @property
    def m(self) -> int:
        if not self.b:
            return 1
        digits, span = 1, self.b
        while span < self.d:
            digits += 1
            span *= self.b
        return digits

    @property
    def has_mask(self) -> bool:
        return self.mode in ("masked", "mixture")

    @property
    def sphere_dim(self) -> int:
        return self.base + (1 if self.has_mask else 0)

    @property
    def mask_axis(self) -> Optional[int]:
        return self.base if self.has_mask else None

    def encode(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.d):
            raise DomainError(f"token id outside [0, {self.d})")
        powers = self.base ** np.arange(self.m - 1, -1, -1, dtype=np.int64)
        return (ids[..., None] // powers) % self.base

    def decode(self, digits: np.ndarray, clip: bool = False) -> Tuple[np.ndarray, int]:
        """Returns (ids, number of digit combinations >= d that were clipped)"""
        digits = np.asarray(digits, dtype=np.int64)
        if np.any(digits < 0) or np.any(digits >= self.base):
            raise DomainError(f"digit outside [0, {self.base})")
        powers = self.base ** np.arange(self.m - 1, -1, -1, dtype=np.int64)
        ids = np.sum(digits * powers, axis=-1)
        invalid = int(np.count_nonzero(ids >= self.d))
        if invalid:
            if not clip:
                raise DomainError(f"{invalid} digit combinations decode to ids >= {self.d}")
            ids = np.minimum(ids, self.d - 1)
        return ids, invalid

    def embed(self, ids: np.ndarray) -> np.ndarray:
        """One-hot sphere points of shape ids.shape + (m, sphere_dim)"""
        digits = self.encode(ids)
        return np.eye(self.sphere_dim)[digits]

    def descriptor(self) -> Dict[str, int]:
        return {"d": self.d, "b": self.base, "m": self.m, "sphere_dim": self.sphere_dim,
                "mask_axis": -1 if self.mask_axis is None else self.mask_axis}


def encode_split(k: int, codec: SplitCodec) -> Tuple[int, ...]:
    return tuple(int(v) for v in codec.encode(np.asarray(k)))


def decode_split(digits, codec: SplitCodec) -> int:
    ids, _ = codec.decode(np.asarray(digits))
    return int(ids)


def mask_point(codec: SplitCodec) -> np.ndarray:
    if not codec.has_mask:
        raise DomainError("uniform mode has no mask axis")
    return one_hot(codec.mask_axis, codec.sphere_dim)


def barycenter_point(codec: SplitCodec) -> np.ndarray:
    return barycenter(codec.base, codec.sphere_dim)


def initial_points(codec: SplitCodec, shape: Tuple[int, ...], rng: np.random.Generator,
                   lambda_: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """X_0 per digit with shape + (m, D), plus a boolean array marking mask starts"""
    full = shape + (codec.m,)
    if codec.mode == "masked":
        is_mask = np.ones(full, dtype=bool)
    elif codec.mode == "uniform":
        is_mask = np.zeros(full, dtype=bool)
    else:
        is_mask = rng.random(full) < lambda_
    points = np.where(is_mask[..., None], mask_point(codec) if codec.has_mask else 0.0, barycenter_point(codec))
    return points, is_mask


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

def _per_sequence(values, ndim: int) -> np.ndarray:
    """Reshape a scalar or per-sequence (B,) array to broadcast against ndim-dimensional arrays"""
    values = np.asarray(values, dtype=float)
    return values.reshape(values.shape + (1,) * (ndim - values.ndim)) if values.ndim else values


def mse_terms(probs: np.ndarray, x: np.ndarray, target: np.ndarray, gamma_t, sigma_t) -> Tuple[np.ndarray, np.ndarray]:
    """Per-digit (1/(2 sigma^2)) |eta_theta - eta^k|^2 and its gradient with respect to probs.

    With G_l = c_l (e_l - x_l x) and r = sum_l p_l G_l - G_k, the loss is
    (gamma^2 / (2 sigma^2)) |r|^2 and its p_l-derivative is
    (gamma^2 / sigma^2) c_l (r_l - x_l <x, r>), so G is never formed.
    """
    residual = batch_mixture_drift(x, probs, 1.0)[0] - batch_mixture_drift(x, target, 1.0)[0]
    coeff = theta_over_sin(np.arccos(np.clip(x, -1.0 + BATCH_CLAMP, 1.0)))
    scale = _per_sequence((np.asarray(gamma_t) / np.asarray(sigma_t)) ** 2, probs.ndim)
    value = 0.5 * np.sum(residual * residual, axis=-1) * (scale[..., 0] if np.ndim(scale) else scale)
    radial = np.sum(x * residual, axis=-1, keepdims=True)
    return value, scale * coeff * (residual - x * radial)


def loss_mse(probs: np.ndarray, x_t: np.ndarray, target_k: int, t: float, schedule: NoiseSchedule) -> Tuple[float, np.ndarray]:
    """(1/(2 sigma_t^2)) |sum_l p_l eta^l - eta^k|^2 and its gradient with respect to probs"""
    target = one_hot(target_k, x_t.size)
    value, grad = mse_terms(np.asarray(probs, dtype=float), np.asarray(x_t, dtype=float), target,
                            schedule.gamma(t), schedule.sigma(t))
    return float(value), grad


def ce_terms(probs: np.ndarray, target_idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray, int]:
    """Per-digit -log p_k, gradient in probs, and the number of clipped probabilities"""
    picked = np.take_along_axis(probs, target_idx[..., None], axis=-1)[..., 0]
    clips = int(np.count_nonzero(picked < PROB_CLIP))
    safe = np.maximum(picked, PROB_CLIP)
    grad = np.zeros_like(probs)
    np.put_along_axis(grad, target_idx[..., None], (-1.0 / safe)[..., None], axis=-1)
    return -np.log(safe), grad, clips


def loss_ce(probs: np.ndarray, target_k: int) -> Tuple[float, np.ndarray]:
    value, grad, clips = ce_terms(np.asarray(probs, dtype=float), np.asarray(target_k))
    if clips:
        logger.warning(f"⚠️ Clipped target probability at {PROB_CLIP}")
    return float(value), grad


def loss_ce_importance(probs: np.ndarray, target_k: int, t: float, proposal: TimeProposal) -> float:
    value, _ = loss_ce(probs, target_k)
    return value / proposal.density(t)


def ce_dominance_bound(probs: np.ndarray, target_k: int, t: float, schedule: NoiseSchedule) -> float:
    """2 pi^2 gamma_t^2 sigma_t^-2 * CE, an upper bound on loss_mse"""
    value, _ = loss_ce(probs, target_k)
    return 2.0 * math.pi ** 2 * (schedule.gamma(t) / schedule.sigma(t)) ** 2 * value


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamW:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def update(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.step_count)
        v_hat = self.v / (1.0 - self.beta2 ** self.step_count)
        return params - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * params)


def clip_gradient(grad: np.ndarray, max_norm: float) -> Tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if max_norm > 0 and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    objective: str = "ce_importance"
    batch_size: int = 32
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    grad_clip: float = 1.0
    seq_len: int = 16
    log_every: int = 100
    seed: int = 0
    lambda_: float = 0.5
    stop_delta: float = 1e-3
    xt_sampler: str = "table"
    sim_steps: int = 500

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise DomainError(f"unknown objective {self.objective!r}")
        if min(self.batch_size, self.steps, self.seq_len) < 1 or self.lr <= 0:
            raise DomainError("batch size, steps, sequence length and learning rate must be positive")


@dataclass
class FrozenBatch:
    """Everything a loss evaluation needs: X_t, t, per-sequence weights and target digits"""

    x_t: np.ndarray
    t: np.ndarray
    weights: np.ndarray
    targets: np.ndarray
    target_points: np.ndarray


@dataclass
class TrainState:
    predictor: MLPPredictor
    optimizer: AdamW
    ema: np.ndarray
    step: int = 0
    ce_clips: int = 0
    history: list = field(default_factory=list)


def table_for(tables: Dict[str, PrecomputedTable], kind: str, codec: SplitCodec) -> PrecomputedTable:
    if kind not in tables:
        raise ArtifactMismatchError("Precomputed tables", {"init_kind": (kind, sorted(tables))})
    table = tables[kind]
    if table.d != codec.sphere_dim:
        raise ArtifactMismatchError("Precomputed table", {"d": (codec.sphere_dim, table.d)})
    return table


def draw_times(objective: str, n: int, schedule: NoiseSchedule, proposal: TimeProposal, stop_delta: float,
               rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """(t, weight): uniform t with weight T, or t ~ q with weight 1/q(t); t capped at T - stop_delta"""
    T = schedule.T
    if objective == "ce_importance":
        t = np.atleast_1d(proposal.sample(rng, n))
        weights = 1.0 / np.atleast_1d(proposal.density(t))
    else:
        t = rng.uniform(0.0, T, n)
        weights = np.full(n, T)
    return np.minimum(t, T - stop_delta), weights


def prepare_batch(ids: np.ndarray, codec: SplitCodec, tables: Dict[str, PrecomputedTable], schedule: NoiseSchedule,
                  proposal: TimeProposal, cfg: TrainConfig, rng: np.random.Generator) -> FrozenBatch:
    """Embed targets, choose X_0 per digit, draw one t per sequence and sample X_t"""
    B, L = ids.shape
    targets = codec.encode(ids)
    x_T = codec.embed(ids)
    x_0, is_mask = initial_points(codec, (B, L), rng, cfg.lambda_)
    t, weights = draw_times(cfg.objective, B, schedule, proposal, cfg.stop_delta, rng)

    if cfg.xt_sampler == "simulate":
        x_t = np.empty_like(x_T)
        for b in range(B):
            _, states = simulate_bridge_batch(
                x_0[b].reshape(-1, codec.sphere_dim), x_T[b].reshape(-1, codec.sphere_dim), schedule,
                cfg.sim_steps, cfg.stop_delta, [t[b]], child_seed(rng), "train/simulate")
            x_t[b] = states[0].reshape(L, codec.m, codec.sphere_dim)
    else:
        alpha = np.empty((B, L, codec.m))
        rho = np.empty((B, L, codec.m))
        for kind, selector in (("mask", is_mask), ("barycenter", ~is_mask)):
            if not selector.any():
                continue
            a, r = interpolate(table_for(tables, kind, codec), t)
            alpha = np.where(selector, a[:, None, None], alpha)
            rho = np.where(selector, r[:, None, None], rho)
        x_t = batch_sample_xt(x_0, x_T, alpha, rho, rng)
    return FrozenBatch(x_t, t, weights, targets, x_T)


def loss_and_grad(predictor: MLPPredictor, batch: FrozenBatch, objective: str, schedule: NoiseSchedule,
                  batch_index: int = 0) -> Tuple[float, np.ndarray, int]:
    """Batch objective (nats per token) and its parameter gradient; returns (loss, grad, ce clips)"""
    out, cache = predictor.forward(batch.x_t, batch.t, keep_cache=True)
    probs = out.probs
    B, L = probs.shape[:2]
    clips = 0
    if objective == "mse":
        g = schedule.gamma(batch.t)
        s = schedule.sigma(batch.t)
        value, grad = mse_terms(probs, batch.x_t, batch.target_points, g, s)
    else:
        value, grad, clips = ce_terms(probs, batch.targets)
    w = batch.weights[:, None, None]
    loss = float(np.sum(w * value) / (B * L))
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss", batch_index=batch_index)
    grad_probs = grad * (w[..., None] / (B * L))
    return loss, predictor.backward(cache, grad_probs), clips


def new_state(predictor: MLPPredictor, cfg: TrainConfig) -> TrainState:
    return TrainState(predictor, AdamW(cfg.lr, cfg.weight_decay), predictor.params.copy())


def train_step(state: TrainState, ids: np.ndarray, codec: SplitCodec, tables: Dict[str, PrecomputedTable],
               schedule: NoiseSchedule, proposal: TimeProposal, cfg: TrainConfig,
               rng: np.random.Generator) -> Dict[str, float]:
    """One optimizer step on a batch of token ids; returns loss statistics"""
    batch = prepare_batch(ids, codec, tables, schedule, proposal, cfg, rng)
    loss, grad, clips = loss_and_grad(state.predictor, batch, cfg.objective, schedule, batch_index=state.step)
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient", batch_index=state.step)
    grad, norm = clip_gradient(grad, cfg.grad_clip)
    state.predictor.set_params(state.optimizer.update(state.predictor.params, grad))
    state.ema = cfg.ema_decay * state.ema + (1.0 - cfg.ema_decay) * state.predictor.params
    state.step += 1
    state.ce_clips += clips
    if clips:
        logger.warning(f"⚠️ Clipped {clips} target probabilities at step {state.step}")
    return {"loss": loss, "grad_norm": norm}


def train(state: TrainState, draw_batch: Callable[[np.random.Generator, int], np.ndarray], codec: SplitCodec,
          tables: Dict[str, PrecomputedTable], schedule: NoiseSchedule, proposal: TimeProposal, cfg: TrainConfig,
          log_path: Optional[str] = None) -> TrainState:
    """Run cfg.steps optimizer steps; batch i draws from substream train/step_i"""
    writer, handle = None, None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        handle = open(log_path, "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(["step", "loss", "grad_norm", "wall_ms"])
    logger.info(f"🔄 Training {cfg.steps} steps, objective={cfg.objective}, "
                f"{state.predictor.num_params} parameters")
    try:
        for _ in range(cfg.steps):
            rng = named_rng(cfg.seed, f"train/step_{state.step}")
            started = time.perf_counter()
            ids = draw_batch(rng, cfg.batch_size)
            stats = train_step(state, ids, codec, tables, schedule, proposal, cfg, rng)
            wall_ms = 1000.0 * (time.perf_counter() - started)
            state.history.append(stats["loss"])
            if writer:
                writer.writerow([state.step, f"{stats['loss']:.10g}", f"{stats['grad_norm']:.10g}", f"{wall_ms:.3f}"])
            if state.step % cfg.log_every == 0:
                recent = np.mean(state.history[-cfg.log_every:])
                logger.info(f"step {state.step}: loss {recent:.4f}, grad norm {stats['grad_norm']:.3f}")
    finally:
        if handle:
            handle.close()
    logger.info(f"✅ Training finished at step {state.step}")
    return state

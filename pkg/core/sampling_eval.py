#!/usr/bin/env python3
"""
Sampling and evaluation
- Generation: geodesic random walk driven by the parameterized mixture drift
- NLL upper bound from the drift mismatch along simulated bridges
- Unigram diagnostics (total variation, histograms)
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from core.bridges import batch_mixture_drift, grw_step, simulate_bridge_batch, time_grid
from core.exceptions import ArtifactMismatchError, DomainError
from core.predictor import Predictor
from core.schedules import NoiseSchedule
from core.seeding import named_seed, spawn_sequence_rngs
from core.training import SplitCodec, initial_points, mse_terms
from data.datasets import TokenSequence

logger = logging.getLogger(__name__)

MIN_QUAD = 8

NoiseFn = Callable[[int, Tuple[int, ...]], np.ndarray]


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 200
    seq_len: int = 16
    mode: str = "masked"
    lambda_: float = 0.5
    stop_delta: float = 1e-3
    seed: int = 0
    num: int = 16
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.steps < 1 or self.seq_len < 1 or self.num < 1:
            raise DomainError("steps, sequence length and sample count must be >= 1")
        if not 0.0 <= self.lambda_ <= 1.0:
            raise DomainError("lambda must lie in [0, 1]")


@dataclass
class NLLReport:
    nll_nats_per_token: float
    bpc_or_bpd: float
    mc_std_error: float
    num_quadrature_times: int
    num_noise_samples: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def check_compatible(predictor: Predictor, codec: SplitCodec):
    """Refuse a predictor whose digit layout differs from the codec's"""
    desc = predictor.descriptor
    expected = {"digits": codec.m, "base": codec.base, "sphere_dim": codec.sphere_dim,
                "masked": codec.has_mask, "mode": codec.mode}
    diff = {k: (v, desc.get(k)) for k, v in expected.items() if k in desc and desc[k] != v}
    if diff:
        raise ArtifactMismatchError("Checkpoint geometry", diff)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def mixture_init(lambda_: float, d: int, m: int, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """(size, m, d + 1) initial points: mask vertex with probability lambda, else the barycenter"""
    if not 0.0 <= lambda_ <= 1.0:
        raise DomainError("lambda must lie in [0, 1]")
    points, _ = initial_points(SplitCodec(d, 0, "mixture"), (size, m), rng, lambda_)
    return points[:, :, 0]


def geodesic_random_walk(predictor: Predictor, x_init: np.ndarray, schedule: NoiseSchedule, steps: int,
                         stop_delta: float, noise_fn: NoiseFn, noise_scale: float = 1.0) -> np.ndarray:
    """Walk x from t = 0 to T - stop_delta in `steps` geodesic steps.

    Each step moves along exp_x(eta dt + sigma sqrt(dt) z) where eta is the
    predictor's probability-weighted bridge drift; noise_fn(i, shape) supplies z.
    """
    grid = time_grid(schedule.T, stop_delta, steps)
    x = np.array(x_init, dtype=float)
    for i in range(steps):
        t, dt = float(grid[i]), float(grid[i + 1] - grid[i])
        probs = predictor.forward(x, t).probs
        drift, _ = batch_mixture_drift(x, probs, schedule.gamma(t))
        noise = noise_fn(i, x.shape) if noise_scale else np.zeros_like(x)
        x = grw_step(x, drift, noise_scale * schedule.sigma(t), dt, noise)
    return x


def decode_states(x: np.ndarray, codec: SplitCodec) -> Tuple[np.ndarray, int]:
    """Argmax over non-mask coordinates per digit, then split-decode; returns (ids, clipped)"""
    digits = np.argmax(x[..., :codec.base], axis=-1)
    ids, clipped = codec.decode(digits, clip=True)
    if clipped:
        logger.warning(f"⚠️ Clipped {clipped} digit combinations to token {codec.d - 1}")
    return ids, clipped


def sample_sequences(predictor: Predictor, codec: SplitCodec, config: SampleConfig,
                     schedule: NoiseSchedule) -> List[TokenSequence]:
    check_compatible(predictor, codec)
    if codec.mode != config.mode:
        raise ArtifactMismatchError("Sampling mode", {"mode": (config.mode, codec.mode)})
    rngs = spawn_sequence_rngs(config.seed, "sample", config.num)
    x0 = np.stack([initial_points(codec, (config.seq_len,), r, config.lambda_)[0] for r in rngs])

    def noise(_: int, shape: Tuple[int, ...]) -> np.ndarray:
        return np.stack([r.standard_normal(shape[1:]) for r in rngs])

    logger.info(f"🔄 Sampling {config.num} sequences of length {config.seq_len} in {config.steps} steps")
    final = geodesic_random_walk(predictor, x0, schedule, config.steps, config.stop_delta, noise,
                                 config.noise_scale)
    ids, _ = decode_states(final, codec)
    meta = {"mode": codec.mode, "d": codec.d, "seed": config.seed}
    return [TokenSequence(row.tolist(), dict(meta)) for row in ids]


# ---------------------------------------------------------------------------
# Likelihood bound
# ---------------------------------------------------------------------------

def estimate_nll(predictor: Predictor, codec: SplitCodec, ids: np.ndarray, schedule: NoiseSchedule,
                 quad: int = 64, draws: int = 4, stop_delta: float = 1e-3, sim_steps: int = 8,
                 seed: int = 0, lambda_: float = 0.5, chars_per_token: float = 1.0) -> NLLReport:
    """Monte-Carlo estimate of (1/2) int sigma_t^-2 |eta_theta - eta^k|^2 dt per token.

    X_t comes from simulated bridges toward each sequence's embedding with
    sim_steps Euler steps between consecutive quadrature times; the integral
    uses the trapezoid rule over `quad` times on [0, T - stop_delta].
    """
    if quad < MIN_QUAD or draws < 1:
        raise DomainError(f"need quad >= {MIN_QUAD} and draws >= 1")
    check_compatible(predictor, codec)
    ids = np.asarray(ids, dtype=np.int64)
    N, L = ids.shape
    target = codec.embed(ids)
    times = time_grid(schedule.T, stop_delta, quad - 1)
    per_token = np.empty((draws, N))

    for r in range(draws):
        rng = np.random.default_rng(named_seed(seed, f"eval/init_{r}"))
        x0, _ = initial_points(codec, (N, L), rng, lambda_)
        grid_times, states = simulate_bridge_batch(x0, target, schedule, (quad - 1) * sim_steps, stop_delta,
                                                   times, seed, f"eval/draw_{r}")
        integrand = np.empty((quad, N))
        for q, t in enumerate(grid_times):
            probs = predictor.forward(states[q], float(t)).probs
            value, _ = mse_terms(probs, states[q], target, schedule.gamma(float(t)), schedule.sigma(float(t)))
            integrand[q] = value.sum(axis=(1, 2))
        per_token[r] = trapezoid(integrand, grid_times, axis=0) / L
        logger.info(f"NLL draw {r + 1}/{draws}: {per_token[r].mean():.4f} nats/token")

    nll = float(per_token.mean())
    se = float(per_token.std(ddof=1) / math.sqrt(per_token.size)) if per_token.size > 1 else 0.0
    logger.info(f"✅ NLL bound {nll:.4f} ± {se:.4f} nats/token")
    return NLLReport(nll, to_bits(nll, chars_per_token), se, quad, draws)


def to_bits(nll_nats: float, chars_per_token: float = 1.0) -> float:
    if nll_nats < 0 or chars_per_token <= 0:
        raise DomainError("nll must be nonnegative and chars_per_token positive")
    return nll_nats / math.log(2.0) / chars_per_token


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def unigram(ids: Sequence[int], d: int) -> np.ndarray:
    counts = np.bincount(np.ravel(np.asarray(ids, dtype=np.int64)), minlength=d)
    if len(counts) > d:
        raise DomainError(f"token id outside [0, {d})")
    return counts


def marginal_diagnostics(samples: np.ndarray, reference: np.ndarray, d: int) -> Tuple[float, np.ndarray]:
    """(TV distance between empirical unigrams, (d, 3) histogram of token, sample freq, reference freq)"""
    p = unigram(samples, d).astype(float)
    q = unigram(reference, d).astype(float)
    if p.sum() == 0 or q.sum() == 0:
        raise DomainError("both token sets must be non-empty")
    p /= p.sum()
    q /= q.sum()
    tv = 0.5 * float(np.abs(p - q).sum())
    return tv, np.column_stack([np.arange(d), p, q])


def write_histogram(path: str, histogram: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token", "sample_freq", "reference_freq"])
        for token, p, q in histogram:
            writer.writerow([int(token), f"{p:.10g}", f"{q:.10g}"])

#!/usr/bin/env python3
"""
Predictors p_theta(X_t, t)
- Predictor: abstract interface producing per-digit categorical outputs
- MLPPredictor: reference tanh network with optional mean-pool context and a
  hand-written backward pass over one flat float64 parameter vector
- ConstantPredictor: fixed outputs, used by oracles and tests
- Checkpoint files (magic RDLMCKPT1, JSON descriptor, parameters, optional EMA)
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.bridges import batch_mixture_drift
from core.exceptions import (
    ArtifactFormatError,
    ArtifactMismatchError,
    DimensionMismatchError,
    PredictorError,
)
from core.geometry import SimplexPoint, SpherePoint, TangentVector
from core.schedules import NoiseSchedule

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RDLMCKPT1"
NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class ProbOutput:
    """Per-digit probabilities of shape (B, L, m, D)"""

    probs: np.ndarray
    masked: bool = False

    def validate(self):
        sums = self.probs.sum(axis=-1)
        if not np.all(np.abs(sums - 1.0) <= NORMALIZATION_TOL):
            raise PredictorError("output rows do not sum to 1", layer=-1)
        if self.masked and np.any(self.probs[..., -1] != 0.0):
            raise PredictorError("mask component is not zero", layer=-1)
        return self

    def simplex(self, b: int, l: int, j: int) -> SimplexPoint:
        return SimplexPoint(self.probs[b, l, j])


def time_features(t: np.ndarray, T: float, num: int) -> np.ndarray:
    """Sinusoidal features of t/T, shape (B, num)"""
    tau = np.atleast_1d(np.asarray(t, dtype=float)) / T
    freqs = np.geomspace(1.0, 100.0, num // 2)
    angles = tau[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Predictor:
    """Maps X_t of shape (B, L, m, D) and one t per sequence to probabilities over the D vertices"""

    masked: bool = False

    @property
    def descriptor(self) -> Dict[str, Any]:
        raise NotImplementedError

    @property
    def params(self) -> np.ndarray:
        return np.zeros(0)

    def forward(self, x: np.ndarray, t) -> ProbOutput:
        raise NotImplementedError

    def arch_hash(self) -> str:
        text = json.dumps(self.descriptor, sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class ConstantPredictor(Predictor):
    """Returns the same probabilities for every token (shape (D,) or (m, D))"""

    def __init__(self, probs: np.ndarray, masked: bool = False):
        self.fixed = np.asarray(probs, dtype=float)
        self.masked = masked

    @property
    def descriptor(self) -> Dict[str, Any]:
        return {"kind": "constant", "probs": self.fixed.tolist(), "masked": self.masked}

    def forward(self, x: np.ndarray, t) -> ProbOutput:
        return ProbOutput(np.broadcast_to(self.fixed, x.shape).copy(), self.masked)


@dataclass
class _Cache:
    x_shape: Tuple[int, ...]
    version: int
    inputs: List[np.ndarray]
    activations: List[np.ndarray]
    probs: np.ndarray


class MLPPredictor(Predictor):
    """Token-wise tanh MLP on (sphere coordinates ++ time features).

    With context="meanpool" the first hidden layer's activations are averaged
    over the sequence and concatenated back onto every token.
    """

    def __init__(self, vocab_size: int, digits: int, base: int, sphere_dim: int, hidden: List[int],
                 context: str = "meanpool", time_features: int = 16, masked: bool = False, T: float = 1.0,
                 seed: Optional[int] = 0, mode: str = "masked"):
        if context not in ("none", "meanpool"):
            raise ValueError(f"unknown context mode {context!r}")
        self.vocab_size = vocab_size
        self.digits = digits
        self.base = base
        self.sphere_dim = sphere_dim
        self.hidden = list(hidden)
        self.context = context
        self.num_time_features = time_features
        self.masked = masked
        self.mode = mode
        self.T = T
        self.version = 0

        width_in = digits * sphere_dim + time_features
        self.shapes: List[Tuple[Tuple[int, int], Tuple[int]]] = []
        for i, width in enumerate(self.hidden):
            self.shapes.append(((width_in, width), (width,)))
            width_in = width * 2 if (i == 0 and context == "meanpool") else width
        self.shapes.append(((width_in, digits * sphere_dim), (digits * sphere_dim,)))

        size = sum(w[0] * w[1] + b[0] for w, b in self.shapes)
        self._params = np.zeros(size)
        self.weights, self.biases = self._views(self._params)
        if seed is not None:
            self.init_params(np.random.default_rng(seed))

    def _views(self, flat: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        weights, biases, offset = [], [], 0
        for (fan_in, fan_out), (nb,) in self.shapes:
            weights.append(flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out))
            offset += fan_in * fan_out
            biases.append(flat[offset:offset + nb])
            offset += nb
        return weights, biases

    def init_params(self, rng: np.random.Generator):
        """Glorot-uniform weights, zero biases"""
        for W, b in zip(self.weights, self.biases):
            limit = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
            W[...] = rng.uniform(-limit, limit, W.shape)
            b[...] = 0.0
        self.version += 1

    @property
    def params(self) -> np.ndarray:
        return self._params

    def set_params(self, flat: np.ndarray):
        if flat.shape != self._params.shape:
            raise DimensionMismatchError(f"expected {self._params.size} parameters, got {flat.size}")
        self._params[...] = flat
        self.version += 1

    @property
    def num_params(self) -> int:
        return self._params.size

    @property
    def descriptor(self) -> Dict[str, Any]:
        return {
            "kind": "mlp",
            "vocab_size": self.vocab_size,
            "digits": self.digits,
            "base": self.base,
            "sphere_dim": self.sphere_dim,
            "hidden": self.hidden,
            "context": self.context,
            "time_features": self.num_time_features,
            "masked": self.masked,
            "mode": self.mode,
            "T": self.T,
        }

    @classmethod
    def from_descriptor(cls, desc: Dict[str, Any]) -> "MLPPredictor":
        return cls(desc["vocab_size"], desc["digits"], desc["base"], desc["sphere_dim"], desc["hidden"],
                   desc["context"], desc["time_features"], desc["masked"], desc["T"], seed=None,
                   mode=desc.get("mode", "masked"))

    # -- forward / backward -----------------------------------------------

    def _check_input(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[2:] != (self.digits, self.sphere_dim):
            raise DimensionMismatchError(
                f"expected input (B, L, {self.digits}, {self.sphere_dim}), got {x.shape}")

    def forward(self, x: np.ndarray, t, keep_cache: bool = False):
        self._check_input(x)
        B, L = x.shape[:2]
        t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
        feats = time_features(t, self.T, self.num_time_features)
        h = np.concatenate([x.reshape(B, L, -1), np.broadcast_to(feats[:, None, :], (B, L, feats.shape[1]))], axis=-1)

        inputs, activations = [], []
        for i, (W, b) in enumerate(zip(self.weights[:-1], self.biases[:-1])):
            inputs.append(h)
            h = np.tanh(h @ W + b)
            if not np.all(np.isfinite(h)):
                raise PredictorError("non-finite activation", layer=i)
            activations.append(h)
            if i == 0 and self.context == "meanpool":
                pooled = np.broadcast_to(h.mean(axis=1, keepdims=True), h.shape)
                h = np.concatenate([h, pooled], axis=-1)
        inputs.append(h)
        logits = (h @ self.weights[-1] + self.biases[-1]).reshape(B, L, self.digits, self.sphere_dim)
        if not np.all(np.isfinite(logits)):
            raise PredictorError("non-finite logits", layer=len(self.hidden))
        if self.masked:
            logits[..., -1] = -np.inf
        probs = softmax(logits)
        out = ProbOutput(probs, self.masked)
        if keep_cache:
            return out, _Cache(x.shape, self.version, inputs, activations, probs)
        return out

    def backward(self, cache: _Cache, grad_probs: np.ndarray) -> np.ndarray:
        """Gradient of sum(grad_probs * probs) with respect to the flat parameter vector"""
        if cache.version != self.version or grad_probs.shape != cache.probs.shape:
            raise DimensionMismatchError("forward cache does not match these parameters or gradients")
        B, L = cache.x_shape[:2]
        p = cache.probs
        dlogits = p * (grad_probs - np.sum(p * grad_probs, axis=-1, keepdims=True))
        if self.masked:
            dlogits[..., -1] = 0.0
        grad = np.zeros_like(self._params)
        g_weights, g_biases = self._views(grad)

        dz = dlogits.reshape(B, L, -1)
        for j in range(len(self.weights) - 1, -1, -1):
            inp = cache.inputs[j]
            g_weights[j][...] = inp.reshape(-1, inp.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
            g_biases[j][...] = dz.sum(axis=(0, 1))
            if j == 0:
                break
            dinp = dz @ self.weights[j].T
            if j == 1 and self.context == "meanpool":
                width = self.hidden[0]
                dinp = dinp[..., :width] + dinp[..., width:].sum(axis=1, keepdims=True) / L
            dz = dinp * (1.0 - cache.activations[j - 1] ** 2)
        return grad


def forward(predictor: Predictor, x_seq: np.ndarray, t) -> ProbOutput:
    return predictor.forward(x_seq, t)


def backward(predictor: MLPPredictor, x_seq: np.ndarray, t, grad_out: np.ndarray) -> np.ndarray:
    _, cache = predictor.forward(x_seq, t, keep_cache=True)
    return predictor.backward(cache, grad_out)


def parameterized_drift(x: SpherePoint, probs: SimplexPoint, t: float, schedule: NoiseSchedule) -> TangentVector:
    """Probability-weighted bridge drifts toward the vertices; zero for a one-hot at its own vertex"""
    drift, _ = batch_mixture_drift(x.coords, probs.probs, schedule.gamma(t))
    return TangentVector(x, drift)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, predictor: MLPPredictor, ema: Optional[np.ndarray] = None,
                    meta: Optional[Dict[str, Any]] = None):
    desc = dict(predictor.descriptor)
    desc["arch_hash"] = predictor.arch_hash()
    desc["num_params"] = predictor.num_params
    desc["has_ema"] = ema is not None
    if meta:
        desc["meta"] = meta
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(predictor.params.astype("<f8").tobytes())
        if ema is not None:
            fh.write(np.asarray(ema, dtype="<f8").tobytes())
    logger.info(f"✅ Saved checkpoint {path} ({predictor.num_params} parameters)")


def load_checkpoint(path: str) -> Tuple[MLPPredictor, Optional[np.ndarray], Dict[str, Any]]:
    """Returns (predictor, ema vector or None, descriptor)"""
    data = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC)
    if data[:head] != CHECKPOINT_MAGIC:
        raise ArtifactFormatError(f"{path} is not a checkpoint")
    if len(data) < head + 4:
        raise ArtifactFormatError(f"{path} is truncated")
    (size,) = struct.unpack_from("<I", data, head)
    start = head + 4 + size
    try:
        desc = json.loads(data[head + 4:start].decode("utf-8"))
    except ValueError as e:
        raise ArtifactFormatError(f"{path}: unreadable descriptor ({e})")
    n = desc["num_params"]
    expected = start + 8 * n * (2 if desc["has_ema"] else 1)
    if len(data) != expected:
        raise ArtifactFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    predictor = MLPPredictor.from_descriptor(desc)
    if predictor.arch_hash() != desc["arch_hash"]:
        raise ArtifactMismatchError("Checkpoint architecture", {"arch_hash": (desc["arch_hash"], predictor.arch_hash())})
    predictor.set_params(np.frombuffer(data, dtype="<f8", count=n, offset=start).astype(float))
    ema = None
    if desc["has_ema"]:
        ema = np.frombuffer(data, dtype="<f8", count=n, offset=start + 8 * n).astype(float)
    return predictor, ema, desc

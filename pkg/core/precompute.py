#!/usr/bin/env python3
"""
Simulation-free precomputation
- Damped Kummer function F_n(rho) = E cos(rho |z|), z ~ N(0, I_n), and its inverse
- 1-D SDEs of the projections <X_t, X_T> and <X_t, X_0> of a logarithm bridge
- Extraction of Riemannian-normal parameters (alpha_t, rho_t) from their means
- Table construction, binary/CSV persistence and interpolation
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path as FilePath
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize, special

from core.bridges import simulate_bridge_batch
from core.exceptions import ArtifactFormatError, DomainError
from core.geometry import SpherePoint, inner, one_hot
from core.schedules import NoiseSchedule
from core.seeding import block_rngs, block_slices, parallel_map

logger = logging.getLogger(__name__)

HYP_ARG_LIMIT = 50.0
MC_FALLBACK_SAMPLES = 400_000
MC_FALLBACK_SEED = 1234
SCAN_RHO_MAX = 10.0
SCAN_POINTS = 20_000
INVERSE_XTOL = 1e-14
Z_CLAMP = 1e-7
SYMMETRY_TOL = 1e-9
CALIBRATION_DIM = 16
CALIBRATION_TRAJECTORIES = 1024
CALIBRATION_CHECKPOINTS = 8
CALIBRATION_BOUNDS = (0.5, 2.0)
CALIBRATE_MODES = ("auto", "off")
NOISE_KINDS = ("correlated", "independent")

MAGIC = b"RNTB1\x00\x00\x00"
_HEADER = struct.Struct("<8sqqdqdddqd16s16s")


# ---------------------------------------------------------------------------
# Damped Kummer function
# ---------------------------------------------------------------------------

def _kummer_mc(rho: np.ndarray, n: int) -> np.ndarray:
    rng = np.random.default_rng(MC_FALLBACK_SEED + n)
    radius = np.sqrt(rng.chisquare(n, MC_FALLBACK_SAMPLES))
    return np.array([np.mean(np.cos(r * radius)) for r in np.ravel(rho)]).reshape(np.shape(rho))


def kummer_F(rho: Union[float, np.ndarray], d: int) -> Union[float, np.ndarray]:
    """E cos(rho |z|) for z ~ N(0, I_d).

    Evaluated as exp(-rho^2/2) 1F1((1-d)/2; 1/2; rho^2/2), Kummer's transform of
    exp(-rho^2/2) 1F1(d/2; 1/2; -rho^2/2). Arguments rho^2/2 > HYP_ARG_LIMIT use a
    fixed-seed Monte-Carlo estimate.
    """
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise DomainError("rho must be nonnegative")
    if d < 1:
        raise DomainError("Gaussian dimension must be >= 1")
    half = 0.5 * rho * rho
    big = half > HYP_ARG_LIMIT
    with np.errstate(all="ignore"):
        out = np.exp(-half) * special.hyp1f1(0.5 * (1 - d), 0.5, np.where(big, 0.0, half))
    if np.any(big):
        out = np.where(big, _kummer_mc(np.where(big, rho, 0.0), d), out)
    return float(out) if out.ndim == 0 else out


class KummerEval:
    """F_n with its monotone domain [0, rho_max] located by a grid scan"""

    def __init__(self, n: int):
        self.n = n
        grid = np.linspace(0.0, SCAN_RHO_MAX, SCAN_POINTS + 1)
        values = kummer_F(grid, n)
        rising = np.nonzero(~(np.diff(values) < 0))[0]
        end = rising[0] if rising.size else len(grid) - 1
        if end == 0:
            raise DomainError(f"F_{n} is not decreasing near 0")
        self.rho_max = float(grid[end])
        self.f_min = float(values[end])
        self.clamps = 0
        logger.debug(f"KummerEval n={n}: rho_max={self.rho_max:.4f}, F(rho_max)={self.f_min:.6f}")

    def __call__(self, rho):
        return kummer_F(rho, self.n)

    def invert(self, value: float, clamp: bool = False) -> Tuple[float, bool]:
        """Returns (rho, clamped); out-of-range values raise unless clamp is set"""
        if value > 1.0 or value < self.f_min:
            if not clamp:
                raise DomainError(f"value {value:.6g} outside the monotone range [{self.f_min:.6g}, 1] of F_{self.n}")
            self.clamps += 1
            logger.warning(f"⚠️ Clamped Kummer inverse input {value:.6g} (n={self.n})")
            return (0.0 if value > 1.0 else self.rho_max), True
        if value == 1.0:
            return 0.0, False
        if value == self.f_min:
            return self.rho_max, False
        rho = optimize.brentq(lambda r: kummer_F(r, self.n) - value, 0.0, self.rho_max, xtol=INVERSE_XTOL)
        return float(rho), False


@lru_cache(maxsize=None)
def get_kummer(n: int) -> KummerEval:
    return KummerEval(n)


def kummer_inv(value: float, d: int, clamp: bool = False) -> float:
    rho, _ = get_kummer(d).invert(value, clamp=clamp)
    return rho


# ---------------------------------------------------------------------------
# Projected SDEs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProjectedMeans:
    times: np.ndarray
    ez_T: np.ndarray
    ez_0: np.ndarray
    se_T: np.ndarray
    se_0: np.ndarray


def projection_grid(T: float, steps: int) -> np.ndarray:
    return np.linspace(0.0, T, steps + 1)


def _projected_block(n_traj: int, psi0: float, schedule: NoiseSchedule, d: int, grid: np.ndarray,
                     correlated: bool, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Per-step (sum zT, sum zT^2, sum z0, sum z0^2) over one block, shape (K+1, 4)"""
    zT = np.full(n_traj, float(psi0))
    z0 = np.ones(n_traj)
    ito = 0.5 * (d - 1)
    stats = np.zeros((len(grid), 4))
    stats[0] = [zT.sum(), (zT * zT).sum(), z0.sum(), (z0 * z0).sum()]
    for i in range(len(grid) - 1):
        t, dt = grid[i], grid[i + 1] - grid[i]
        g = schedule.gamma(t)
        sig = noise_scale * schedule.sigma(t)
        sT = np.sqrt(1.0 - zT * zT)
        s0 = np.sqrt(1.0 - z0 * z0)
        theta = np.arccos(zT)
        drift_T = g * theta * sT - ito * sig * sig * zT
        drift_0 = g * theta * (psi0 - zT * z0) / sT - ito * sig * sig * z0
        w1 = rng.standard_normal(n_traj)
        w2 = rng.standard_normal(n_traj)
        if correlated:
            denom = sT * s0
            corr = np.where(denom > 0, (psi0 - zT * z0) / np.where(denom > 0, denom, 1.0), 0.0)
            corr = np.clip(corr, -1.0, 1.0)
            w2 = corr * w1 + np.sqrt(1.0 - corr * corr) * w2
        root = sig * math.sqrt(dt)
        zT = np.clip(zT + drift_T * dt + root * sT * w1, -1.0 + Z_CLAMP, 1.0 - Z_CLAMP)
        z0 = np.clip(z0 + drift_0 * dt + root * s0 * w2, -1.0 + Z_CLAMP, 1.0 - Z_CLAMP)
        stats[i + 1] = [zT.sum(), (zT * zT).sum(), z0.sum(), (z0 * z0).sum()]
    return stats


def simulate_projected(psi0: float, schedule: NoiseSchedule, d: int, N: int, K: int, seed: int,
                       name: str = "precompute/projected", noise: str = "correlated",
                       noise_scale: float = 1.0, workers: Optional[int] = None) -> ProjectedMeans:
    """Monte-Carlo means of z^T = <X_t, X_T> and z^0 = <X_t, X_0> on a K-step grid over [0, T].

    Drift coefficients are taken at the left end of each step, so gamma is
    never evaluated at T.
    """
    if not 0.0 <= psi0 < 1.0:
        raise DomainError("psi0 must lie in [0, 1)")
    if N < 1 or K < 1:
        raise DomainError("N and K must be >= 1")
    grid = projection_grid(schedule.T, K)
    slices = block_slices(N)
    rngs = block_rngs(seed, name, N)
    correlated = noise == "correlated"

    def run(j: int) -> np.ndarray:
        size = slices[j].stop - slices[j].start
        return _projected_block(size, psi0, schedule, d, grid, correlated, noise_scale, rngs[j])

    totals = np.zeros((len(grid), 4))
    for block in parallel_map(run, len(slices), workers):
        totals += block
    mean_T, mean_0 = totals[:, 0] / N, totals[:, 2] / N
    var_T = np.maximum(totals[:, 1] / N - mean_T ** 2, 0.0)
    var_0 = np.maximum(totals[:, 3] / N - mean_0 ** 2, 0.0)
    # the initial condition is exact
    mean_T[0], mean_0[0] = psi0, 1.0
    return ProjectedMeans(grid, mean_T, mean_0, np.sqrt(var_T / N), np.sqrt(var_0 / N))


def simulated_projections(u: np.ndarray, target: np.ndarray, schedule: NoiseSchedule, N: int, steps: int,
                          stop_delta: float, checkpoints: Sequence[float], seed: int,
                          name: str = "precompute/full") -> Dict[str, np.ndarray]:
    """Means and standard errors of <X_t, X_T> and <X_t, X_0> from full-sphere bridge simulation"""
    x0 = np.broadcast_to(u, (N, u.size)).copy()
    times, states = simulate_bridge_batch(x0, target, schedule, steps, stop_delta, checkpoints, seed, name)
    zT = inner(states, target)
    z0 = inner(states, u)
    root = math.sqrt(N)
    return {
        "t": times,
        "ez_T": zT.mean(axis=1), "se_T": zT.std(axis=1) / root,
        "ez_0": z0.mean(axis=1), "se_0": z0.std(axis=1) / root,
    }


# ---------------------------------------------------------------------------
# Parameter extraction
# ---------------------------------------------------------------------------

def extract_params(ez_T: Union[float, np.ndarray], ez_0: Union[float, np.ndarray], phi0: float, d: int,
                   calibration: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """(alpha_t, rho_t) such that the Riemannian normal reproduces the mean projections.

    E X = F(rho) mu gives E z^0 = F sqrt(1 - alpha^2) and
    E z^T = F (alpha sin phi0 + cos phi0 sqrt(1 - alpha^2)).
    """
    if not 0.0 < phi0 <= math.pi / 2 + 1e-12:
        raise DomainError("phi0 must lie in (0, pi/2]")
    ez_T = np.atleast_1d(np.asarray(ez_T, dtype=float))
    ez_0 = np.atleast_1d(np.asarray(ez_0, dtype=float))
    ez_T = np.clip(ez_T, -1.0 + Z_CLAMP, 1.0 - Z_CLAMP)
    ez_0 = np.clip(ez_0, -1.0 + Z_CLAMP, 1.0)
    c, s = math.cos(phi0), math.sin(phi0)

    excess = ez_T - c * ez_0
    norm = np.sqrt(s * s * ez_0 * ez_0 + excess * excess)
    alpha = np.where((excess > 0) & (norm > 0), excess / np.where(norm > 0, norm, 1.0), 0.0)
    alpha = np.clip(alpha, 0.0, s)

    # F = sqrt(EzT^2 + Ez0^2 - 2c EzT Ez0) / sin(phi0), finite as alpha -> 1
    f_value = np.sqrt(np.maximum(ez_T ** 2 + ez_0 ** 2 - 2.0 * c * ez_T * ez_0, 0.0)) / s
    kummer = get_kummer(d - 1)
    rho = np.array([kummer.invert(float(v), clamp=True)[0] for v in f_value])
    return alpha, calibration * rho


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

@dataclass
class PrecomputedTable:
    d: int
    psi0: float
    times: np.ndarray
    alpha: np.ndarray
    rho: np.ndarray
    provenance: Dict[str, Union[int, float, str]] = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.times) - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def init_kind(self) -> str:
        return str(self.provenance.get("init_kind", "custom"))

    @property
    def rows(self) -> np.ndarray:
        return np.stack([self.times, self.alpha, self.rho], axis=1)

    def interpolate(self, t: Union[float, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        return interpolate(self, t)

    # -- persistence ------------------------------------------------------

    def to_bytes(self) -> bytes:
        p = self.provenance
        header = _HEADER.pack(
            MAGIC, self.d, self.K, self.psi0, int(p.get("seed", 0)),
            float(p.get("sigma_0", 0.0)), float(p.get("sigma_T", 0.0)), self.T,
            int(p.get("trajectories", 0)), float(p.get("calibration", 1.0)),
            str(p.get("init_kind", "custom")).encode("ascii")[:16],
            str(p.get("noise", "correlated")).encode("ascii")[:16],
        )
        return header + self.rows.astype("<f8").tobytes()

    @classmethod
    def from_buffer(cls, buffer: bytes, offset: int = 0) -> Tuple["PrecomputedTable", int]:
        if len(buffer) - offset < _HEADER.size:
            raise ArtifactFormatError("truncated table header")
        (magic, d, K, psi0, seed, sigma_0, sigma_T, T, trajectories, calibration,
         init_kind, noise) = _HEADER.unpack_from(buffer, offset)
        if magic != MAGIC:
            raise ArtifactFormatError(f"bad table magic {magic!r}")
        offset += _HEADER.size
        nbytes = (K + 1) * 3 * 8
        if len(buffer) - offset < nbytes:
            raise ArtifactFormatError("truncated table rows")
        rows = np.frombuffer(buffer, dtype="<f8", count=(K + 1) * 3, offset=offset).reshape(K + 1, 3)
        provenance = {
            "seed": seed, "sigma_0": sigma_0, "sigma_T": sigma_T, "T": T,
            "trajectories": trajectories, "steps": K, "calibration": calibration,
            "init_kind": init_kind.rstrip(b"\x00").decode("ascii"),
            "noise": noise.rstrip(b"\x00").decode("ascii"),
        }
        table = cls(d, psi0, rows[:, 0].copy(), rows[:, 1].copy(), rows[:, 2].copy(), provenance)
        return table, offset + nbytes

    def to_csv(self, path: str):
        np.savetxt(path, self.rows, delimiter=",", header="t,alpha,rho", comments="", fmt="%.17g")


def save_tables(path: str, tables: Sequence[PrecomputedTable]):
    FilePath(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        for table in tables:
            fh.write(table.to_bytes())


def load_tables(path: str) -> List[PrecomputedTable]:
    buffer = FilePath(path).read_bytes()
    tables, offset = [], 0
    while offset < len(buffer):
        table, offset = PrecomputedTable.from_buffer(buffer, offset)
        tables.append(table)
    if not tables:
        raise ArtifactFormatError(f"{path} holds no table records")
    return tables


def interpolate(table: PrecomputedTable, t: Union[float, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Piecewise-linear (alpha, rho) at t, exact at the grid nodes"""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0) or np.any(t_arr > table.T):
        raise DomainError(f"t outside [0, {table.T}]")
    alpha = np.interp(t_arr, table.times, table.alpha)
    rho = np.interp(t_arr, table.times, table.rho)
    if t_arr.ndim == 0:
        return float(alpha), float(rho)
    return alpha, rho


def _check_symmetry(u: np.ndarray, num_tokens: int) -> float:
    projections = u[:num_tokens]
    if np.ptp(projections) > SYMMETRY_TOL:
        raise DomainError("initial point is not equidistant from the token vertices")
    return float(projections[0])


def _fit_calibration(table_alpha: np.ndarray, table_rho: np.ndarray, grid: np.ndarray, u: np.ndarray,
                     schedule: NoiseSchedule, d: int, seed: int) -> float:
    """Scalar c minimizing the squared gap between F(c rho) sqrt(1 - alpha^2) and simulated E<X_t, X_0>"""
    T = schedule.T
    checkpoints = [T * j / (CALIBRATION_CHECKPOINTS + 1) for j in range(1, CALIBRATION_CHECKPOINTS + 1)]
    stop_delta = 1e-3 * T
    steps = len(grid) - 1
    sim = simulated_projections(u, one_hot(0, d), schedule, CALIBRATION_TRAJECTORIES, steps, stop_delta,
                                checkpoints, seed, "precompute/calibration")
    alpha, rho = np.interp(sim["t"], grid, table_alpha), np.interp(sim["t"], grid, table_rho)
    n = d - 1

    def gap(c: float) -> float:
        model = kummer_F(c * rho, n) * np.sqrt(1.0 - alpha * alpha)
        return float(np.sum((model - sim["ez_0"]) ** 2))

    result = optimize.minimize_scalar(gap, bounds=CALIBRATION_BOUNDS, method="bounded")
    return float(result.x)


def build_table(u: SpherePoint, schedule: NoiseSchedule, d: int, N: int, K: int, seed: int,
                num_tokens: Optional[int] = None, init_kind: str = "custom", noise: str = "correlated",
                calibrate: str = "auto") -> PrecomputedTable:
    """Algorithm table {(t_i, alpha_i, rho_i)} for bridges started at u on S^{d-1}.

    num_tokens is the number of leading (non-mask) axes the endpoints range over.
    """
    if u.dim != d:
        raise DomainError(f"initial point has dimension {u.dim}, table dimension is {d}")
    if calibrate not in CALIBRATE_MODES:
        raise DomainError(f"calibrate must be one of {CALIBRATE_MODES}, got {calibrate!r}")
    if noise not in NOISE_KINDS:
        raise DomainError(f"noise must be one of {NOISE_KINDS}, got {noise!r}")
    num_tokens = d if num_tokens is None else num_tokens
    psi0 = _check_symmetry(u.coords, num_tokens)
    phi0 = math.acos(min(max(psi0, -1.0), 1.0))
    logger.info(f"🔄 Building {init_kind} table: d={d}, psi0={psi0:.6f}, N={N}, K={K}")

    means = simulate_projected(psi0, schedule, d, N, K, seed, name=f"precompute/{init_kind}", noise=noise)
    alpha, rho = extract_params(means.ez_T, means.ez_0, phi0, d)
    alpha[0], rho[0] = 0.0, 0.0

    calibration = 1.0
    if calibrate == "auto" and d < CALIBRATION_DIM:
        calibration = _fit_calibration(alpha, rho, means.times, u.coords, schedule, d, seed)
        rho = calibration * rho
        logger.info(f"Calibrated rho for d={d}: factor {calibration:.4f}")

    provenance = {
        "seed": seed, "trajectories": N, "steps": K, "sigma_0": schedule.sigma_0, "sigma_T": schedule.sigma_T,
        "T": schedule.T, "calibration": calibration, "init_kind": init_kind, "noise": noise,
    }
    clamps = get_kummer(d - 1).clamps
    logger.info(f"✅ Table ready: alpha_T={alpha[-1]:.4f}, rho_max={rho.max():.4f}, kummer clamps so far {clamps}")
    return PrecomputedTable(d, psi0, means.times, alpha, rho, provenance)

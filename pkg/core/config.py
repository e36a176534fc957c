#!/usr/bin/env python3
"""
Configuration
- Config: process-level settings from the environment (.env supported)
- RunConfig: one dotenv-format run file (key=value lines) plus --set overrides,
  type-checked and cross-validated before any computation starts
"""

import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from core.exceptions import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)

MODES = ("masked", "uniform", "mixture")
OBJECTIVES = ("mse", "ce", "ce_importance")


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"⚠️ Ignoring non-integer {name}={raw!r}, using {default}")
        return default


class Config:
    LOG_LEVEL = os.getenv("SPHEREDIFF_LOG_LEVEL", "WARNING")
    WORKERS = _env_int("SPHEREDIFF_WORKERS", 1)
    ARTIFACT_DIR = os.getenv("SPHEREDIFF_ARTIFACT_DIR", "runs")

    @classmethod
    def validate(cls):
        problems = []
        if cls.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            problems.append(("SPHEREDIFF_LOG_LEVEL", None, f"unknown level {cls.LOG_LEVEL!r}"))
        if cls.WORKERS < 1:
            problems.append(("SPHEREDIFF_WORKERS", None, "must be >= 1"))
        if problems:
            raise ConfigError("Invalid environment settings", problems)
        return True


config = Config()


# ---------------------------------------------------------------------------
# Value parsers
# ---------------------------------------------------------------------------

def _parse_int(raw: str) -> int:
    return int(raw)


def _parse_float(raw: str) -> float:
    return float(raw)


def _parse_split(raw: str) -> Optional[int]:
    # "auto" defers to the vocabulary size; "none" or 0 disables splitting
    value = raw.strip().lower()
    if value in ("", "auto"):
        return None
    if value == "none":
        return 0
    return int(value)


def _parse_float_list(raw: str) -> List[float]:
    return [float(x) for x in raw.replace(" ", "").split(",") if x]


def _parse_int_list(raw: str) -> List[int]:
    return [int(x) for x in raw.replace(" ", "").split(",") if x]


def _parse_matrix(raw: str) -> List[List[float]]:
    """Rows separated by ';', entries by ','"""
    return [_parse_float_list(row) for row in raw.split(";") if row.strip()]


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        value = raw.strip()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return value
    return parse


def _parse_lambda(raw: str) -> float:
    # one constant only; schedules like "0.9,0.1" or "linear" are time-varying
    try:
        return float(raw)
    except ValueError:
        raise ValueError("time-varying mixing schedules are unsupported; give one constant in [0, 1]")


def _parse_path(raw: str) -> str:
    return raw.strip()


# key -> (parser, default). None defaults are resolved from other keys.
SCHEMA: Dict[str, Tuple[Callable[[str], Any], Any]] = {
    "mode": (_choice(*MODES), "masked"),
    "vocab_size": (_parse_int, None),
    "split_base": (_parse_split, None),
    "seed": (_parse_int, 0),
    "sigma0": (_parse_float, 0.1),
    "sigmaT": (_parse_float, 1.0),
    "horizon": (_parse_float, 1.0),
    "is_eps": (_parse_float, 0.05),
    "is_a": (_parse_float, None),
    "is_b": (_parse_float, None),
    "lambda_mask": (_parse_lambda, 0.5),
    "stop_delta": (_parse_float, None),
    "alpha_schedule": (_choice("linear"), "linear"),
    "precompute.trajectories": (_parse_int, 8192),
    "precompute.steps": (_parse_int, 1024),
    "precompute.noise": (_choice("correlated", "independent"), "correlated"),
    "precompute.calibrate": (_choice("auto", "off"), "auto"),
    "model.hidden": (_parse_int_list, [128, 128]),
    "model.context": (_choice("none", "meanpool"), "meanpool"),
    "model.time_features": (_parse_int, 16),
    "train.objective": (_choice(*OBJECTIVES), "ce_importance"),
    "train.batch_size": (_parse_int, 32),
    "train.steps": (_parse_int, 2000),
    "train.lr": (_parse_float, 1e-3),
    "train.weight_decay": (_parse_float, 0.0),
    "train.ema_decay": (_parse_float, 0.9999),
    "train.grad_clip": (_parse_float, 1.0),
    "train.seq_len": (_parse_int, 16),
    "train.log_every": (_parse_int, 100),
    "train.xt_sampler": (_choice("table", "simulate"), "table"),
    "train.sim_steps": (_parse_int, 500),
    "sample.steps": (_parse_int, 200),
    "sample.num": (_parse_int, 16),
    "sample.seq_len": (_parse_int, 16),
    "sample.noise_scale": (_parse_float, 1.0),
    "sample.use_ema": (_parse_bool, True),
    "eval.quad": (_parse_int, 64),
    "eval.draws": (_parse_int, 4),
    "eval.sim_steps": (_parse_int, 8),
    "eval.num_sequences": (_parse_int, 64),
    "data.kind": (_choice("synthetic", "text"), "synthetic"),
    "data.path": (_parse_path, None),
    "source.kind": (_choice("iid", "markov"), "iid"),
    "source.probs": (_parse_float_list, None),
    "source.matrix": (_parse_matrix, None),
    "source.seed": (_parse_int, 0),
    "source.num_sequences": (_parse_int, 4096),
    "diagnose.trajectories": (_parse_int, 2048),
    "diagnose.steps": (_parse_int, 500),
    "diagnose.checkpoints": (_parse_int, 8),
    "diagnose.ablation_steps": (_parse_int, 1500),
    "paths.table": (_parse_path, None),
    "paths.checkpoint": (_parse_path, None),
    "paths.out_dir": (_parse_path, None),
}

TEXT_ALPHABET_SIZE = 27


def _line_numbers(path: Path) -> Dict[str, int]:
    """First line on which each key appears in a dotenv-format file"""
    lines: Dict[str, int] = {}
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#") or "=" not in stripped:
            continue
        key = stripped.split("=", 1)[0].strip()
        if key.startswith("export "):
            key = key[len("export "):].strip()
        lines.setdefault(key, number)
    return lines


class RunConfig:
    """Validated run configuration; values are read with cfg["section.key"]"""

    def __init__(self, values: Dict[str, Any], source: Optional[str] = None):
        self.values = values
        self.source = source

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def as_dict(self) -> Dict[str, Any]:
        return dict(self.values)

    @property
    def mode(self) -> str:
        return self.values["mode"]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @classmethod
    def from_file(cls, path: str, overrides: Iterable[str] = ()) -> "RunConfig":
        file_path = Path(path)
        if not file_path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        raw = {k: v for k, v in dotenv_values(file_path).items()}
        return cls.from_mapping(raw, overrides=overrides, line_numbers=_line_numbers(file_path), source=str(file_path))

    @classmethod
    def from_mapping(cls, raw: Dict[str, Optional[str]], overrides: Iterable[str] = (),
                     line_numbers: Optional[Dict[str, int]] = None,
                     source: Optional[str] = None) -> "RunConfig":
        line_numbers = line_numbers or {}
        problems: List[Tuple[str, Optional[int], str]] = []
        merged: Dict[str, Tuple[str, Optional[int]]] = {}

        for key, value in raw.items():
            merged[key] = ("" if value is None else str(value), line_numbers.get(key))
        for item in overrides:
            if "=" not in item:
                problems.append((item, None, "override must look like key=value"))
                continue
            key, value = item.split("=", 1)
            merged[key.strip()] = (value.strip(), None)

        values: Dict[str, Any] = {key: default for key, (_, default) in SCHEMA.items()}
        for key, (text, line) in merged.items():
            if key not in SCHEMA:
                problems.append((key, line, "unknown key"))
                continue
            parser = SCHEMA[key][0]
            try:
                values[key] = parser(text)
            except (TypeError, ValueError) as e:
                problems.append((key, line, str(e) or "invalid value"))

        if not problems:
            problems.extend(_resolve_and_check(values, {k: line for k, (_, line) in merged.items()}))
        if problems:
            raise ConfigError("Invalid configuration", problems)
        return cls(values, source=source)


def _resolve_and_check(values: Dict[str, Any], lines: Dict[str, Optional[int]]) -> List[Tuple[str, Optional[int], str]]:
    problems: List[Tuple[str, Optional[int], str]] = []

    def bad(key: str, message: str):
        problems.append((key, lines.get(key), message))

    horizon = values["horizon"]
    if horizon <= 0:
        bad("horizon", "must be positive")
        return problems

    if values["data.kind"] == "text":
        if values["vocab_size"] is None:
            values["vocab_size"] = TEXT_ALPHABET_SIZE
        elif values["vocab_size"] != TEXT_ALPHABET_SIZE:
            bad("vocab_size", f"text corpora use the fixed {TEXT_ALPHABET_SIZE}-symbol alphabet")
        if not values["data.path"]:
            bad("data.path", "required when data.kind=text")
    if values["vocab_size"] is None:
        bad("vocab_size", "required")
        return problems
    d = values["vocab_size"]
    if d < 2:
        bad("vocab_size", "must be >= 2")

    if values["split_base"] is None:
        values["split_base"] = 16 if d > 512 else 0
    base = values["split_base"]
    if base != 0 and not 2 <= base < d:
        bad("split_base", "must satisfy 2 <= split_base < vocab_size")

    for key in ("sigma0", "sigmaT"):
        if values[key] <= 0:
            bad(key, "must be positive")
    if values["sigma0"] >= values["sigmaT"]:
        logger.warning("⚠️ sigma0 >= sigmaT: the bridge converges early instead of gradually")

    if values["is_a"] is None:
        values["is_a"] = 0.2 * horizon
    if values["is_b"] is None:
        values["is_b"] = 0.8 * horizon
    if not 0 < values["is_eps"] < 0.5:
        bad("is_eps", "must lie in (0, 0.5)")
    if not 0 <= values["is_a"] < values["is_b"] <= horizon:
        bad("is_a", "need 0 <= is_a < is_b <= horizon")

    if not 0.0 <= values["lambda_mask"] <= 1.0:
        bad("lambda_mask", "must lie in [0, 1]")

    if values["stop_delta"] is None:
        values["stop_delta"] = 1e-3 * horizon
    if not 0 < values["stop_delta"] < horizon:
        bad("stop_delta", "must lie in (0, horizon)")

    for key in ("precompute.trajectories", "precompute.steps", "train.batch_size", "train.steps",
                "train.seq_len", "train.log_every", "train.sim_steps", "sample.steps", "sample.num",
                "sample.seq_len", "eval.draws", "eval.sim_steps", "eval.num_sequences",
                "source.num_sequences", "diagnose.trajectories", "diagnose.steps",
                "diagnose.checkpoints", "diagnose.ablation_steps", "model.time_features"):
        if values[key] < 1:
            bad(key, "must be >= 1")
    if values["eval.quad"] < 8:
        bad("eval.quad", "must be >= 8")
    if values["model.time_features"] % 2:
        bad("model.time_features", "must be even")
    if not 1 <= len(values["model.hidden"]) <= 4 or min(values["model.hidden"], default=0) < 1:
        bad("model.hidden", "give 1 to 4 positive layer widths")
    if values["train.lr"] <= 0:
        bad("train.lr", "must be positive")
    if not 0 <= values["train.ema_decay"] < 1:
        bad("train.ema_decay", "must lie in [0, 1)")
    if values["sample.noise_scale"] < 0:
        bad("sample.noise_scale", "must be >= 0")

    if values["data.kind"] == "synthetic":
        probs = values["source.probs"]
        matrix = values["source.matrix"]
        if values["source.kind"] == "iid":
            if probs is None:
                values["source.probs"] = [1.0 / d] * d
            elif len(probs) != d:
                bad("source.probs", f"expected {d} probabilities, got {len(probs)}")
        else:
            if matrix is None:
                bad("source.matrix", "required when source.kind=markov")
            elif len(matrix) != d or any(len(row) != d for row in matrix):
                bad("source.matrix", f"expected a {d}x{d} matrix")
    return problems

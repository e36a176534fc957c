#!/usr/bin/env python3
"""
Datasets
- Character-level text corpora (27-symbol alphabet) cut into random contiguous chunks
- Seeded synthetic categorical sources (iid / first-order Markov) with exact entropy rates
- JSON-lines export of integer sequences
"""

import json
import logging
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.special import entr

from core.exceptions import DatasetError

logger = logging.getLogger(__name__)

ALPHABET = string.ascii_lowercase + " "
SPACE_ID = ALPHABET.index(" ")
ROW_TOL = 1e-9


@dataclass
class TokenSequence:
    ids: List[int]
    meta: Dict[str, Any] = field(default_factory=dict)

    def check(self, d: int):
        if any(not 0 <= i < d for i in self.ids):
            raise DatasetError(f"token id outside [0, {d})")

    def __len__(self) -> int:
        return len(self.ids)


# ---------------------------------------------------------------------------
# Text
# ---------------------------------------------------------------------------

class TextCorpus:
    """Lower-cased text over a-z plus space; any other character becomes a space"""

    vocab_size = len(ALPHABET)

    def __init__(self, path: str, chunk_len: int):
        if chunk_len < 1:
            raise DatasetError("chunk length must be >= 1")
        self.path = path
        self.chunk_len = chunk_len
        self.ids = tokenize(self._read(path))
        if len(self.ids) < chunk_len:
            raise DatasetError(f"{path} has {len(self.ids)} characters, fewer than the chunk length {chunk_len}")
        logger.info(f"✅ Loaded {len(self.ids)} characters from {path}")

    @staticmethod
    def _read(path: str) -> str:
        try:
            return Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError as e:
            raise DatasetError(f"{path} is not valid UTF-8: {e}")
        except OSError as e:
            raise DatasetError(f"Cannot read {path}: {e}")

    @property
    def num_offsets(self) -> int:
        return len(self.ids) - self.chunk_len + 1

    def chunk_starts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.num_offsets, n)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """(n, chunk_len) array of uniformly placed contiguous chunks"""
        starts = self.chunk_starts(n, rng)
        return self.ids[starts[:, None] + np.arange(self.chunk_len)]

    def stream(self, n: int, rng: np.random.Generator) -> Iterator[TokenSequence]:
        for row in self.sample(n, rng):
            yield TokenSequence(row.tolist(), {"alphabet": "text27", "source": self.path})


def tokenize(text: str) -> np.ndarray:
    lookup = {ch: i for i, ch in enumerate(ALPHABET)}
    return np.array([lookup.get(ch, SPACE_ID) for ch in text.lower()], dtype=np.int64)


def detokenize(ids: Sequence[int]) -> str:
    return "".join(ALPHABET[i] for i in ids)


def load_text(path: str, chunk_len: int, rng: np.random.Generator, n: int) -> Iterator[TokenSequence]:
    return TextCorpus(path, chunk_len).stream(n, rng)


# ---------------------------------------------------------------------------
# Synthetic sources
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSource:
    kind: str
    probs: Optional[np.ndarray] = None
    matrix: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind == "iid":
            if self.probs is None:
                raise DatasetError("iid source needs probs")
            self.probs = self._stochastic(np.atleast_2d(np.asarray(self.probs, dtype=float)))[0]
        elif self.kind == "markov":
            if self.matrix is None:
                raise DatasetError("markov source needs a transition matrix")
            matrix = np.asarray(self.matrix, dtype=float)
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
                raise DatasetError(f"transition matrix must be square, got shape {matrix.shape}")
            self.matrix = self._stochastic(matrix)
        else:
            raise DatasetError(f"unknown source kind {self.kind!r}")

    @staticmethod
    def _stochastic(rows: np.ndarray) -> np.ndarray:
        if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > ROW_TOL):
            raise DatasetError("source rows must be nonnegative and sum to 1")
        return rows

    @classmethod
    def uniform(cls, d: int, seed: int = 0) -> "SyntheticSource":
        return cls("iid", probs=np.full(d, 1.0 / d), seed=seed)

    @classmethod
    def deterministic(cls, d: int, k: int, seed: int = 0) -> "SyntheticSource":
        return cls("iid", probs=np.eye(d)[k], seed=seed)

    @property
    def vocab_size(self) -> int:
        return len(self.probs) if self.kind == "iid" else self.matrix.shape[0]

    def stationary(self) -> np.ndarray:
        if self.kind == "iid":
            return self.probs
        # left eigenvector of the transition matrix for eigenvalue 1
        null = linalg.null_space((self.matrix - np.eye(self.vocab_size)).T)
        if null.shape[1] == 0:
            raise DatasetError("transition matrix has no stationary distribution")
        pi = np.abs(null[:, 0])
        return pi / pi.sum()

    def entropy_rate(self) -> float:
        """Nats per token: -sum p log p, or stationary-weighted row entropies"""
        if self.kind == "iid":
            return float(entr(self.probs).sum())
        return float(self.stationary() @ entr(self.matrix).sum(axis=1))

    def generate(self, n_seqs: int, L: int, rng: np.random.Generator) -> np.ndarray:
        d = self.vocab_size
        if self.kind == "iid":
            return rng.choice(d, size=(n_seqs, L), p=self.probs)
        cdf = np.cumsum(self.matrix, axis=1)
        out = np.empty((n_seqs, L), dtype=np.int64)
        out[:, 0] = rng.choice(d, size=n_seqs, p=self.stationary())
        for j in range(1, L):
            u = rng.random(n_seqs)
            out[:, j] = np.minimum((u[:, None] > cdf[out[:, j - 1]]).sum(axis=1), d - 1)
        return out


def synth_generate(source: SyntheticSource, n_seqs: int, L: int,
                   rng: np.random.Generator) -> Tuple[List[TokenSequence], float]:
    ids = source.generate(n_seqs, L, rng)
    meta = {"alphabet": f"synthetic{source.vocab_size}", "source": source.kind}
    return [TokenSequence(row.tolist(), dict(meta)) for row in ids], source.entropy_rate()


# ---------------------------------------------------------------------------
# Export and batching
# ---------------------------------------------------------------------------

def write_jsonl(path: str, sequences: Sequence[TokenSequence]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(json.dumps([int(i) for i in seq.ids]) + "\n")
    logger.info(f"✅ Wrote {len(sequences)} sequences to {path}")


def read_jsonl(path: str) -> List[TokenSequence]:
    sequences = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                ids = json.loads(line)
                if not isinstance(ids, list) or not all(isinstance(i, int) for i in ids):
                    raise DatasetError(f"{path}:{line_no}: expected a list of integers")
                sequences.append(TokenSequence(ids, {"source": path}))
    except OSError as e:
        raise DatasetError(f"Cannot read {path}: {e}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON ({e})")
    return sequences


def stack_sequences(sequences: Sequence[TokenSequence]) -> np.ndarray:
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise DatasetError(f"sequences have different lengths: {sorted(lengths)}")
    return np.array([s.ids for s in sequences], dtype=np.int64)


class ArraySampler:
    """Draws batches of rows (with replacement) from a fixed (N, L) id array"""

    def __init__(self, ids: np.ndarray):
        self.ids = np.asarray(ids, dtype=np.int64)
        if self.ids.ndim != 2 or len(self.ids) == 0:
            raise DatasetError("sampler needs a non-empty (N, L) id array")

    def __call__(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return self.ids[rng.integers(0, len(self.ids), batch_size)]


class TextSampler:
    def __init__(self, corpus: TextCorpus):
        self.corpus = corpus

    def __call__(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return self.corpus.sample(batch_size, rng)

#!/usr/bin/env python3
"""
Error hierarchy for spherediff.
Validation-type errors also subclass ValueError so plain `except ValueError`
callers keep working.
"""

from typing import Dict, List, Optional, Tuple, Any


class SphereDiffError(Exception):
    """Base class for every error raised by this package"""


class ConfigError(SphereDiffError, ValueError):
    """Invalid run configuration; `problems` holds (key, line, message) triples"""

    def __init__(self, message: str, problems: Optional[List[Tuple[str, Optional[int], str]]] = None):
        self.problems = problems or []
        if self.problems:
            details = "\n".join(
                f"  - {key} (line {line}): {msg}" if line is not None else f"  - {key}: {msg}"
                for key, line, msg in self.problems
            )
            message = f"{message}\n{details}"
        super().__init__(message)


class DimensionMismatchError(SphereDiffError, ValueError):
    pass


class AntipodalPointsError(SphereDiffError, ValueError):
    """Logarithm map requested between (numerically) antipodal points"""


class DomainError(SphereDiffError, ValueError):
    """Argument outside the domain where a numerical routine is valid"""


class DegenerateFlowError(SphereDiffError, ValueError):
    """Flow endpoints coincide or are antipodal"""


class DatasetError(SphereDiffError):
    pass


class ArtifactFormatError(SphereDiffError):
    """A table or checkpoint file is truncated or has the wrong magic"""


class InvariantViolation(SphereDiffError):
    """A runtime invariant was broken (non-finite values, normalization...)"""


class PredictorError(InvariantViolation):
    def __init__(self, message: str, layer: int):
        self.layer = layer
        super().__init__(f"{message} (layer {layer})")


class TrainingError(InvariantViolation):
    def __init__(self, message: str, batch_index: int):
        self.batch_index = batch_index
        super().__init__(f"{message} (batch {batch_index})")


class MissingArtifactError(SphereDiffError):
    def __init__(self, path: str, producer: str):
        self.path = path
        self.producer = producer
        super().__init__(f"Missing artifact {path}; run `{producer}` first")


class ArtifactMismatchError(SphereDiffError):
    """Artifacts disagree with the configuration; `diff` maps field -> (expected, found)"""

    def __init__(self, what: str, diff: Dict[str, Tuple[Any, Any]]):
        self.diff = diff
        lines = "\n".join(f"  - {field}: expected {exp!r}, found {got!r}" for field, (exp, got) in diff.items())
        super().__init__(f"{what} does not match the configuration:\n{lines}")

"""Exception hierarchy shared by every emus module."""
from typing import Any, Optional, Sequence

import numpy as np


class EmusError(Exception):
    """Base class for all errors raised by emus"""


class DomainError(EmusError, ValueError):
    """A point lies outside the declared domain of a bias family or target"""

    def __init__(self, message: str, point: Any = None):
        super().__init__(message)
        self.point = None if point is None else np.asarray(point)


class ReducibleError(EmusError):
    """An overlap matrix or sample set fails the irreducibility criterion"""

    def __init__(self, message: str, witness: Any):
        super().__init__(f"{message}; unreachable strata: {list(witness.subset)}")
        self.witness = witness


class ConvergenceError(EmusError):
    """A fixed-point iteration stopped before reaching its tolerance"""

    def __init__(self, message: str, last_iterate: np.ndarray, iterations: int):
        super().__init__(message)
        self.last_iterate = np.asarray(last_iterate)
        self.iterations = iterations


class SamplingError(EmusError):
    """A sampler could not continue; carries the stratum and offending state"""

    def __init__(self, message: str, stratum: Optional[int] = None, state: Any = None):
        prefix = f"stratum {stratum}: " if stratum is not None else ""
        if state is not None:
            message = f"{message} (state={np.array2string(np.asarray(state), precision=6)})"
        super().__init__(prefix + message)
        self.stratum = stratum
        self.state = None if state is None else np.asarray(state)


class EstimationError(EmusError):
    """Estimator inputs are inconsistent or degenerate"""


class DataFormatError(EmusError, ValueError):
    """An input data file could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(EmusError, ValueError):
    """An experiment configuration is invalid"""

    def __init__(self, message: str, loc: Sequence[Any] = ()):
        path = ".".join(str(p) for p in loc)
        super().__init__(f"{path}: {message}" if path else message)
        self.loc = tuple(loc)

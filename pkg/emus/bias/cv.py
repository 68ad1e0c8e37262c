"""Collective-variable registry for composed bias families.

A collective variable maps states ``X`` of shape ``(n, d)`` to ``(n, l)``.
Variables are looked up by name so composed families stay serializable.
"""
import math
from typing import Callable, Dict

import numpy as np

CVFunction = Callable[..., np.ndarray]

_REGISTRY: Dict[str, CVFunction] = {}


def register_cv(name: str) -> Callable[[CVFunction], CVFunction]:
    """Register a collective variable under ``name``"""

    def decorator(fn: CVFunction) -> CVFunction:
        _REGISTRY[name] = fn
        return fn

    return decorator


def get_cv(name: str) -> CVFunction:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"Unknown collective variable '{name}'. Registered: {sorted(_REGISTRY)}")


def list_cvs() -> list:
    return sorted(_REGISTRY)


@register_cv("identity")
def identity(X: np.ndarray) -> np.ndarray:
    return np.asarray(X, dtype=float)


@register_cv("coordinates")
def coordinates(X: np.ndarray, axes: list) -> np.ndarray:
    """Select a subset of state coordinates"""
    return np.asarray(X, dtype=float)[:, list(axes)]


@register_cv("mixture_log10_lambda")
def mixture_log10_lambda(X: np.ndarray, n_components: int, pair: list = (0, 1)) -> np.ndarray:
    """(log10 lambda_a, log10 lambda_b) from mixture parameter vectors.

    Parameter vectors are laid out as (mu_1..mu_K, log lambda_1..log lambda_K,
    q_1..q_{K-1}, log beta); see ``emus.models.mixture.MixtureParams``.
    """
    X = np.asarray(X, dtype=float)
    cols = [n_components + int(p) for p in pair]
    return X[:, cols] / math.log(10.0)

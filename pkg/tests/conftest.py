from typing import Literal, Tuple

import numpy as np
import pytest
from sqlmodel import Session, SQLModel, create_engine

from emus.bias.families import BiasSet
from emus.db import schema  # noqa: F401  (registers ledger tables)


class Boxes(BiasSet):
    """Indicator functions of arbitrary 1-D intervals [lo_i, hi_i)"""

    kind: Literal["boxes"] = "boxes"
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    @property
    def n_strata(self) -> int:
        return len(self.lo)

    @property
    def input_dim(self) -> int:
        return 1

    @property
    def partition_of_unity(self) -> bool:
        return False

    @property
    def piecewise_constant(self) -> bool:
        return True

    def in_domain(self, X: np.ndarray) -> np.ndarray:
        return np.isfinite(X).all(axis=1)

    def local(self, X: np.ndarray):
        lo, hi = np.array(self.lo), np.array(self.hi)
        x = X[:, :1]
        idx = np.tile(np.arange(self.n_strata), (X.shape[0], 1))
        val = ((x >= lo[None, :]) & (x < hi[None, :])).astype(float)
        return idx, val

    def support_boxes(self):
        return np.array(self.lo)[:, None], np.array(self.hi)[:, None]


@pytest.fixture
def boxes():
    """Factory for interval-indicator bias families"""
    return lambda lo, hi: Boxes(lo=tuple(lo), hi=tuple(hi))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def session():
    """Create a test ledger session"""
    # Use in-memory SQLite for tests
    engine = create_engine(
        "sqlite:///:memory:",
        connect_args={"check_same_thread": False}
    )
    SQLModel.metadata.create_all(engine)

    with Session(engine) as session:
        yield session

"""Support geometry of bias families and the irreducibility test."""
from dataclasses import dataclass
import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from emus.bias.families import BiasSet

logger = logging.getLogger(__name__)

_ROW_BLOCK = 256


@dataclass(frozen=True)
class Irreducible:
    """The overlap structure connects every stratum"""

    def __bool__(self) -> bool:
        return True


@dataclass(frozen=True)
class ReducibleWitness:
    """A nonempty stratum subset A that no stratum outside A reaches"""

    subset: Tuple[int, ...]

    def __bool__(self) -> bool:
        return False


IrreducibilityResult = Union[Irreducible, ReducibleWitness]


@dataclass(frozen=True)
class SupportGraph:
    """Edge (i, j) iff supp psi_i and supp psi_j intersect with positive volume"""

    adjacency: np.ndarray

    @property
    def n_strata(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        row = self.adjacency[i].copy()
        row[i] = False
        return np.flatnonzero(row)

    def degree(self) -> np.ndarray:
        """Number of supports each support meets, itself included"""
        return self.adjacency.sum(axis=1)

    def components(self) -> Tuple[int, np.ndarray]:
        return csgraph.connected_components(sparse.csr_matrix(self.adjacency.astype(float)), directed=False)


def _axis_overlap(lo_i, hi_i, lo_j, hi_j, period: float) -> np.ndarray:
    """Overlap length of intervals [lo_i, hi_i) and [lo_j, hi_j) (broadcast)"""
    if np.isnan(period):
        with np.errstate(invalid="ignore"):
            length = np.minimum(hi_i, hi_j) - np.maximum(lo_i, lo_j)
        return np.where(np.isnan(length), np.inf, np.maximum(length, 0.0))
    len_i = np.minimum(hi_i - lo_i, period)
    len_j = np.minimum(hi_j - lo_j, period)
    total = np.zeros(np.broadcast(lo_i, lo_j).shape)
    for shift in (-period, 0.0, period):
        total += np.maximum(np.minimum(hi_i, hi_j + shift) - np.maximum(lo_i, lo_j + shift), 0.0)
    full = (len_i >= period) | (len_j >= period)
    return np.where(full, np.minimum(len_i, len_j), np.minimum(total, np.minimum(len_i, len_j)))


def overlap_volumes(bias: BiasSet) -> np.ndarray:
    """L x L matrix of |U_i cap U_j| computed from support boxes"""
    lo, hi = bias.support_boxes()
    periods = bias.periods
    L = lo.shape[0]
    vol = np.empty((L, L))
    for start in range(0, L, _ROW_BLOCK):
        stop = min(start + _ROW_BLOCK, L)
        block = np.ones((stop - start, L))
        for a in range(lo.shape[1]):
            block *= _axis_overlap(
                lo[start:stop, a, None], hi[start:stop, a, None],
                lo[None, :, a], hi[None, :, a], periods[a],
            )
        vol[start:stop] = block
    return vol


def support_graph(bias: BiasSet) -> SupportGraph:
    """Build the SupportGraph of a bias family"""
    vol = overlap_volumes(bias)
    own = np.diag(vol)
    scale = np.minimum.outer(own, own)
    # round-off between abutting boxes is not an edge
    adjacency = vol > 1e-9 * np.where(np.isfinite(scale), scale, 1.0)
    np.fill_diagonal(adjacency, True)
    return SupportGraph(adjacency=adjacency)


def overlap_fractions(bias: BiasSet) -> np.ndarray:
    """|U_i cap U_j| / |U_i|; NaN on rows with unbounded support"""
    vol = overlap_volumes(bias)
    own = np.diag(vol).copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = vol / own[:, None]
    frac[~np.isfinite(own)] = np.nan
    return frac


def _witness_from_digraph(adjacency, anchor: int = 0) -> IrreducibilityResult:
    """Witness search on a directed graph where edge j -> i means "j reaches i"."""
    graph = sparse.csr_matrix(np.asarray(adjacency, dtype=float))
    L = graph.shape[0]
    reach = csgraph.breadth_first_order(graph, anchor, directed=True, return_predecessors=False)
    if len(reach) < L:
        # nothing reachable from the anchor enters the rest
        missing = np.setdiff1d(np.arange(L), reach)
        return ReducibleWitness(subset=tuple(int(i) for i in missing))
    back = csgraph.breadth_first_order(graph.T.tocsr(), anchor, directed=True, return_predecessors=False)
    if len(back) < L:
        # strata that can reach the anchor receive no edge from the others
        return ReducibleWitness(subset=tuple(int(i) for i in np.sort(back)))
    return Irreducible()


def check_irreducibility(
    bias: BiasSet,
    samples: Optional[Sequence[np.ndarray]] = None,
) -> IrreducibilityResult:
    """Irreducibility of the stratification.

    With samples, stratum j reaches stratum i when some sample drawn from
    pi_j has psi_i > 0; the stratification is irreducible iff this directed
    graph is strongly connected. Without samples, the support graph must be
    connected.
    """
    if samples is None:
        graph = support_graph(bias)
        return _witness_from_digraph(graph.adjacency)

    L = bias.n_strata
    if len(samples) != L:
        raise ValueError(f"Expected {L} sample sets, got {len(samples)}")
    reach = np.zeros((L, L), dtype=bool)
    for j, pts in enumerate(samples):
        pts = np.asarray(pts, dtype=float)
        if pts.size == 0:
            raise ValueError(f"Sample set for stratum {j} is empty")
        idx, val = bias.local_checked(pts, strict=False)
        hit = np.unique(idx[val > 0])
        reach[j, hit] = True
    result = _witness_from_digraph(reach)
    if not result:
        logger.warning(f"Samples are reducible; witness {list(result.subset)}")
    return result


def transition_witness(F: np.ndarray, anchor: int = 0) -> IrreducibilityResult:
    """Irreducibility of the index chain with transition matrix F"""
    return _witness_from_digraph(np.asarray(F) > 0, anchor)

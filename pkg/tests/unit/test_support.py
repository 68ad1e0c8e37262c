import numpy as np
import pytest

from emus.bias.families import IndicatorGrid, TailFamily
from emus.bias.support import (
    Irreducible,
    ReducibleWitness,
    check_irreducibility,
    overlap_fractions,
    overlap_volumes,
    support_graph,
    transition_witness,
)


# ============= Support Graph Tests =============
def test_tail_family_neighbors():
    """Test the support graph of a small tail family"""
    graph = support_graph(TailFamily(M=2.0, K=2))
    assert graph.neighbors(0).tolist() == [1]
    assert graph.neighbors(1).tolist() == [0, 2]
    assert graph.neighbors(3).tolist() == [2]
    n_components, _ = graph.components()
    assert n_components == 1


def test_periodic_ring_degree():
    """Test that each periodic 1-D box meets itself and two neighbours"""
    graph = support_graph(IndicatorGrid(dim=1, K=4))
    assert graph.degree().tolist() == [3] * 4
    assert graph.neighbors(0).tolist() == [1, 3]


@pytest.mark.parametrize("dim", [2, 3])
def test_grid_degree_and_overlap_in_higher_dimensions(dim):
    """Test that every periodic box meets 3^d boxes and shares at least 1/2^d of its volume"""
    bias = IndicatorGrid(dim=dim, K=4)
    graph = support_graph(bias)
    assert graph.degree().tolist() == [3 ** dim] * bias.n_strata
    frac = overlap_fractions(bias)
    assert frac[graph.adjacency].min() == pytest.approx(0.5 ** dim)
    assert np.all(frac[~graph.adjacency] < 1e-9)


def test_overlap_fractions_periodic():
    """Test overlap fractions on a periodic ring of four boxes"""
    frac = overlap_fractions(IndicatorGrid(dim=1, K=4))
    assert np.allclose(np.diag(frac), 1.0)
    assert frac[0, 1] == pytest.approx(0.5)
    assert frac[0, 3] == pytest.approx(0.5)
    assert frac[0, 2] == pytest.approx(0.0)


def test_overlap_fractions_unbounded_rows():
    """Test that unbounded supports have undefined fractions"""
    frac = overlap_fractions(TailFamily(M=2.0, K=2))
    assert np.all(np.isnan(frac[2:]))
    assert frac[0, 1] == pytest.approx(1.0)


def test_overlap_volumes_disjoint(boxes):
    """Test that disjoint boxes have zero overlap"""
    vol = overlap_volumes(boxes([0.0, 2.0], [1.0, 3.0]))
    assert vol[0, 1] == 0.0
    assert vol[0, 0] == pytest.approx(1.0)


# ============= Irreducibility Tests =============
def test_disjoint_boxes_are_reducible(boxes):
    """Test the witness for two disjoint supports"""
    result = check_irreducibility(boxes([0.0, 2.0], [1.0, 3.0]))
    assert isinstance(result, ReducibleWitness)
    assert not result
    assert result.subset == (1,)


def test_disjoint_boxes_with_samples(boxes):
    """Test the sample-based check on disjoint supports"""
    bias = boxes([0.0, 2.0], [1.0, 3.0])
    result = check_irreducibility(bias, samples=[np.array([[0.5]]), np.array([[2.5]])])
    assert result.subset == (1,)


def test_tail_family_is_irreducible():
    """Test that overlapping tail strata are irreducible"""
    result = check_irreducibility(TailFamily(M=2.0, K=2))
    assert isinstance(result, Irreducible)
    assert result


def test_samples_that_never_reach_the_anchor():
    """Test that samples missing the overlap back into stratum 0 are caught"""
    bias = IndicatorGrid(dim=1, K=3)
    samples = [np.array([[0.1]]), np.array([[0.5]]), np.array([[0.5]])]
    result = check_irreducibility(bias, samples)
    assert not result
    assert result.subset == (0,)


def test_samples_closing_the_ring():
    """Test that one sample in the right overlap restores irreducibility"""
    bias = IndicatorGrid(dim=1, K=3)
    samples = [np.array([[0.1]]), np.array([[0.5]]), np.array([[0.9]])]
    assert check_irreducibility(bias, samples)


def _fill_supports(bias, rng, n=2000):
    """Uniform points over every support box, unbounded sides cut at twice the box width"""
    lo, hi = bias.support_boxes()
    width = np.where(np.isfinite(hi), hi - lo, 0.0)
    hi = np.where(np.isfinite(hi), hi, lo + 2.0 * np.nanmax(width))
    return [rng.uniform(lo[i], hi[i], size=(n, lo.shape[1])) for i in range(bias.n_strata)]


@pytest.mark.parametrize(
    "family",
    [
        lambda boxes: IndicatorGrid(dim=1, K=5),
        lambda boxes: IndicatorGrid(dim=2, K=3, periodic=False),
        lambda boxes: TailFamily(M=3.0, K=3),
        lambda boxes: boxes([0.0, 0.5, 2.0], [1.0, 1.5, 3.0]),
        lambda boxes: boxes([0.0, 0.5, 1.2], [1.0, 1.5, 3.0]),
    ],
)
def test_full_support_samples_agree_with_support_graph(family, boxes, rng):
    """Test that samples filling every support give the same verdict as the support graph"""
    bias = family(boxes)
    assert bool(check_irreducibility(bias, _fill_supports(bias, rng))) == bool(check_irreducibility(bias))


def test_sample_set_count_must_match(boxes):
    """Test that one sample set per stratum is required"""
    with pytest.raises(ValueError):
        check_irreducibility(boxes([0.0, 0.5], [1.0, 1.5]), samples=[np.array([[0.5]])])


def test_empty_sample_set(boxes):
    """Test that an empty sample set is rejected"""
    with pytest.raises(ValueError):
        check_irreducibility(boxes([0.0, 0.5], [1.0, 1.5]), samples=[np.array([[0.5]]), np.empty((0, 1))])


# ============= Transition Matrix Tests =============
def test_transition_witness_absorbing_state():
    """Test the witness when the second state never returns to the anchor"""
    result = transition_witness(np.array([[0.5, 0.5], [0.0, 1.0]]))
    assert result.subset == (0,)


def test_transition_witness_absorbing_anchor():
    """Test the witness when the anchor never leaves"""
    result = transition_witness(np.array([[1.0, 0.0], [0.5, 0.5]]))
    assert result.subset == (1,)


def test_transition_witness_irreducible():
    """Test that a positive matrix is irreducible"""
    assert transition_witness(np.full((3, 3), 1 / 3))

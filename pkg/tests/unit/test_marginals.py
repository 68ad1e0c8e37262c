import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError
from scipy import stats as sps

from emus.bias.families import IndicatorGrid
from emus.errors import EstimationError, SamplingError
from emus.estimation.estimator import run_emus
from emus.estimation.marginals import (
    HistogramGrid,
    build_schedule,
    direct_marginal,
    estimate_marginal,
    run_stratified,
)
from emus.sampling.chains import Trajectory, analytic_stratum_density, iid_chain, rwm_chain, stratum_seed
from emus.sampling.dispatch import SamplerSpec
from emus.sampling.target import Domain, Quadratic, TargetModel

first_coordinate = lambda X: X[:, 0]


@pytest.fixture
def uniform_run(rng):
    """Uniform samples on each of five strata covering [0, 1]"""
    bias = IndicatorGrid(dim=1, K=4, periodic=False)
    lo, hi = bias.support_boxes()
    trajs = [
        Trajectory(states=rng.uniform(lo[i, 0], hi[i, 0], 4000), stratum=i, sampler="iid")
        for i in range(bias.n_strata)
    ]
    return bias, trajs, run_emus(trajs, bias, cv=first_coordinate)


@pytest.fixture
def unit_box():
    return TargetModel(
        log_density=lambda X: np.zeros(X.shape[0]),
        dim=1,
        domain=Domain(kind="box", lo=0.0, hi=1.0),
    )


# ============= Histogram Grid Tests =============
def test_grid_validation():
    """Test axis-count, bin-count and bound checks"""
    with pytest.raises(ValidationError):
        HistogramGrid(lo=(0.0,), hi=(1.0, 1.0), bins=(4,))
    with pytest.raises(ValidationError):
        HistogramGrid.regular(0.0, 1.0, 0)
    with pytest.raises(ValidationError):
        HistogramGrid.regular(1.0, 1.0, 4)


def test_grid_centers_and_index():
    """Test bin centres and out-of-grid indexing"""
    grid = HistogramGrid.regular(0.0, 1.0, 4)
    assert np.allclose(grid.centers()[:, 0], [0.125, 0.375, 0.625, 0.875])
    assert grid.bin_index(np.array([[-0.1], [0.3], [1.0]])).tolist() == [-1, 1, -1]
    assert grid.volume == pytest.approx(0.25)


def test_grid_row_major_index():
    """Test the flat index of a 2-D bin"""
    grid = HistogramGrid(lo=(0.0, 0.0), hi=(1.0, 1.0), bins=(2, 2))
    assert grid.bin_index(np.array([[0.7, 0.2]])).tolist() == [2]
    assert grid.n_bins == 4


# ============= Marginal Estimate Tests =============
def test_uniform_marginal(uniform_run):
    """Test that a uniform target has unit density in every bin"""
    bias, _, result = uniform_run
    report = estimate_marginal(result.stats, result.weights, HistogramGrid.regular(0.0, 1.0, 10), result.overlap, bias)
    density = report.density_array()
    errors = report.error_array()
    assert np.all(np.isfinite(errors)) and np.all(errors > 0)
    assert np.all(np.abs(density - 1.0) <= 4 * errors + 0.02)
    assert report.integral() == pytest.approx(1.0)
    assert sum(report.counts) == 4000 * bias.n_strata


def test_gaussian_marginal_against_exact_bins():
    """Test the marginal of a truncated normal against exact bin averages"""
    bias = IndicatorGrid(dim=1, K=8, periodic=False, lo=-4.0, hi=4.0)
    trajs = [
        iid_chain(analytic_stratum_density(Quadratic(), 1.0, bias, i), 5000, seed=300 + i, stratum=i)
        for i in range(bias.n_strata)
    ]
    result = run_emus(trajs, bias, cv=first_coordinate)
    grid = HistogramGrid.regular(-4.0, 4.0, 80)
    report = estimate_marginal(result.stats, result.weights, grid, result.overlap, bias)

    edges = np.linspace(-4.0, 4.0, 81)
    mass = np.diff(sps.norm.cdf(edges)) / (sps.norm.cdf(4.0) - sps.norm.cdf(-4.0))
    exact = mass / grid.volume
    busy = np.array(report.counts) >= 200
    assert busy.sum() > 40
    density, errors = report.density_array(), report.error_array()
    assert np.all(np.abs(density[busy] - exact[busy]) <= 5 * errors[busy] + 1e-3)


def test_grid_outside_region(uniform_run):
    """Test that a grid away from every stratum is rejected"""
    bias, _, result = uniform_run
    with pytest.raises(EstimationError):
        estimate_marginal(result.stats, result.weights, HistogramGrid.regular(10.0, 11.0, 5), result.overlap, bias)


def test_marginal_needs_cv_values(uniform_run):
    """Test that stats accumulated without a cv cannot give marginals"""
    bias, trajs, _ = uniform_run
    plain = run_emus(trajs, bias)
    with pytest.raises(EstimationError):
        estimate_marginal(plain.stats, plain.weights, HistogramGrid.regular(0.0, 1.0, 10))


def test_empty_bins_are_none(uniform_run):
    """Test that bins without samples report None"""
    _, _, result = uniform_run
    report = estimate_marginal(result.stats, result.weights, HistogramGrid.regular(0.0, 2.0, 10), result.overlap)
    assert all(d is None for d in report.density[5:])
    assert all(e is None for e in report.std_error[5:])
    assert report.empty.tolist() == [False] * 5 + [True] * 5


def test_marginal_without_overlap_has_no_errors(uniform_run):
    """Test that omitting F skips the standard errors"""
    _, _, result = uniform_run
    report = estimate_marginal(result.stats, result.weights, HistogramGrid.regular(0.0, 1.0, 10))
    assert all(e is None for e in report.std_error)
    assert all(d is not None for d in report.density)


def test_marginal_save(tmp_path, uniform_run):
    """Test the three files written for a marginal"""
    _, _, result = uniform_run
    report = estimate_marginal(result.stats, result.weights, HistogramGrid.regular(0.0, 1.0, 10), result.overlap)
    paths = report.save(tmp_path, name="theta")
    assert sorted(p.name for p in paths.values()) == ["theta.csv", "theta.json", "theta_log10.csv"]
    frame = pd.read_csv(paths["csv"])
    assert list(frame.columns) == ["theta0", "density", "std_error", "count", "empty"]
    assert len(frame) == 10


def test_direct_marginal(rng):
    """Test the histogram of unbiased uniform runs"""
    trajs = [Trajectory(states=rng.uniform(0, 1, 10000), stratum=None, sampler="iid") for _ in range(2)]
    report = direct_marginal(trajs, HistogramGrid.regular(0.0, 1.0, 10), first_coordinate)
    assert np.allclose(report.density_array(), 1.0, atol=0.1)
    assert np.all(report.error_array() > 0)
    with pytest.raises(ValueError):
        direct_marginal([], HistogramGrid.regular(0.0, 1.0, 10), first_coordinate)


# ============= Schedule Tests =============
def test_schedule_breadth_first():
    """Test the breadth-first order along a chain of strata"""
    schedule = build_schedule(IndicatorGrid(dim=1, K=4, periodic=False), 2, np.array([0.5]))
    assert schedule.order == [2, 1, 3, 0, 4]
    assert [[e.stratum for e in level] for level in schedule.by_depth()] == [[2], [1, 3], [0, 4]]
    assert schedule.entries[3].parent == 1
    assert schedule.entries[0].source == "external"
    assert schedule.skipped == []


def test_schedule_two_dimensional():
    """Test that the centre box of a 3 x 3 grid reaches every stratum at depth one"""
    schedule = build_schedule(IndicatorGrid(dim=2, K=2, periodic=False), 4, np.array([[0.5, 0.5]]))
    assert len(schedule.entries) == 9
    assert len(schedule.by_depth()) == 2


def test_schedule_skips_unreachable(boxes):
    """Test that strata disconnected from the anchor are skipped"""
    schedule = build_schedule(boxes([0.0, 2.0], [1.0, 3.0]), 0, np.array([0.5]))
    assert schedule.order == [0]
    assert schedule.skipped == [1]


def test_schedule_seed_outside_anchor():
    """Test that seeds must lie in the anchor's support"""
    with pytest.raises(SamplingError):
        build_schedule(IndicatorGrid(dim=1, K=4, periodic=False), 0, np.array([0.9]))


def test_schedule_is_deterministic_from_every_anchor():
    """Test repeatable schedules and marginals, with parents always sampled first"""
    bias = IndicatorGrid(dim=2, K=2, periodic=False)
    target = TargetModel(log_density=lambda X: np.zeros(X.shape[0]), dim=2, domain=Domain(kind="box", lo=0.0, hi=1.0))
    spec = SamplerSpec(kind="rwm", steps=300, step=0.1)
    grid = HistogramGrid(lo=(0.0,), hi=(1.0,), bins=(4,))
    for anchor, centre in enumerate(bias.centers()):
        seeds = centre[None, :]
        schedule = build_schedule(bias, anchor, seeds)
        assert schedule == build_schedule(bias, anchor, seeds)
        position = {s: k for k, s in enumerate(schedule.order)}
        for entry in schedule.entries[1:]:
            assert position[entry.parent] < position[entry.stratum]
            assert entry.depth == schedule.entries[position[entry.parent]].depth + 1
        marginals = []
        for _ in range(2):
            run = run_stratified(target, bias, schedule, spec, seeds, cv=first_coordinate, base_seed=5, max_workers=2)
            marginals.append(estimate_marginal(run.stats, run.result.weights, grid).density_array())
        assert np.array_equal(marginals[0], marginals[1])


# ============= Stratified Run Tests =============
def test_run_stratified_anchor_stream(unit_box):
    """Test that the anchor chain uses its own per-stratum stream"""
    bias = IndicatorGrid(dim=1, K=4, periodic=False)
    schedule = build_schedule(bias, 2, np.array([0.5]))
    spec = SamplerSpec(kind="rwm", steps=500, step=0.1)
    run = run_stratified(unit_box, bias, schedule, spec, np.array([0.5]), base_seed=9, replicate=1, max_workers=1)

    _, chain_seq = stratum_seed(9, 2, 1).spawn(2)
    expected = rwm_chain(unit_box, bias, 2, [0.5], 500, 0.1, chain_seq)
    assert np.array_equal(run.trajectories[2].states, expected.states)
    assert run.visited == [0, 1, 2, 3, 4]
    assert run.result.estimate == pytest.approx(1.0)
    assert set(run.acceptance) == {0, 1, 2, 3, 4}


def test_run_stratified_is_reproducible(unit_box):
    """Test that a scheduled run is a function of its seeds"""
    bias = IndicatorGrid(dim=1, K=4, periodic=False)
    schedule = build_schedule(bias, 0, np.array([0.1]))
    spec = SamplerSpec(kind="rwm", steps=150, step=0.1)
    a = run_stratified(unit_box, bias, schedule, spec, np.array([0.1]), g=first_coordinate, base_seed=4)
    b = run_stratified(unit_box, bias, schedule, spec, np.array([0.1]), g=first_coordinate, base_seed=4)
    assert a.result.estimate == b.result.estimate


def test_run_stratified_across_a_gap():
    """Test that strata beyond a zero-density gap are skipped and dropped"""
    target = TargetModel(
        log_density=lambda X: np.where(np.abs(X[:, 0]) < 0.3, -np.inf, -0.5 * X[:, 0] ** 2),
        dim=1,
    )
    bias = IndicatorGrid(dim=1, K=8, periodic=False, lo=-2.0, hi=2.0)
    seeds = np.array([-1.9])
    schedule = build_schedule(bias, 0, seeds)
    spec = SamplerSpec(kind="rwm", steps=1000, step=0.05)
    run = run_stratified(target, bias, schedule, spec, seeds, base_seed=1, max_workers=1)
    assert run.skipped == [5, 6, 7, 8]
    assert run.result.kept.tolist() == [0, 1, 2, 3, 4]
    assert run.result.dropped.tolist() == [5, 6, 7, 8]
    assert run.trajectories[4].states.max() <= -0.3

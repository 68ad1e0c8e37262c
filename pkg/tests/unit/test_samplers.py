import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from emus.bias.families import BilinearGrid, IndicatorGrid, make_tail_family
from emus.errors import SamplingError
from emus.estimation.error_analysis import integrated_autocov
from emus.sampling.chains import (
    AnalyticStratumDensity,
    StratumDensity,
    TabulatedStratumDensity,
    Trajectory,
    analytic_stratum_density,
    iid_chain,
    langevin_chain,
    pick_start,
    rwm_chain,
    stratum_seed,
)
from emus.sampling.dispatch import SamplerSpec, direct_chain, run_chain
from emus.sampling.ensemble import ensemble_chain, walker_means
from emus.sampling.storage import export_csv, load_trajectory, save_trajectory
from emus.sampling.target import Cosine, Domain, Linear, Quadratic, TargetModel, quadrature_expectation, target_from_potential


def _flat(domain=None):
    return TargetModel(
        log_density=lambda X: np.zeros(X.shape[0]),
        grad_log_density=lambda X: np.zeros_like(X),
        dim=1,
        domain=domain or Domain(),
    )


@pytest.fixture
def unit_box():
    """Flat target on [0, 1]"""
    return _flat(Domain(kind="box", lo=0.0, hi=1.0))


# ============= Random-walk Metropolis Tests =============
def test_rwm_uniform_mean(unit_box):
    """Test that RWM on a flat box has the right mean"""
    traj = rwm_chain(unit_box, None, None, [0.2], n=20000, step=0.3, seed=1)
    assert len(traj) == 20000
    assert abs(traj.states.mean() - 0.5) < 0.05
    assert 0.0 < traj.acceptance_rate < 1.0


def test_rwm_gaussian_variance():
    """Test the variance of RWM draws from a standard normal"""
    target = target_from_potential(Quadratic())
    traj = rwm_chain(target, None, None, [0.0], n=40000, step=2.5, seed=2, burn_in=1000)
    assert abs(traj.states.var() - 1.0) < 0.15


def test_rwm_rejects_everything_outside_stratum():
    """Test that huge proposals never leave a narrow stratum"""
    bias = IndicatorGrid(dim=1, K=10, periodic=False)
    traj = rwm_chain(_flat(), bias, 5, [0.5], n=500, step=1e6, seed=3)
    assert traj.acceptance_rate == 0.0
    assert np.all(traj.states == 0.5)
    assert traj.stratum == 5


def test_rwm_start_outside_stratum(unit_box):
    """Test that a start outside the target domain is an error"""
    with pytest.raises(SamplingError) as exc:
        rwm_chain(unit_box, None, None, [2.0], n=10, step=0.1)
    assert exc.value.state is not None


def test_rwm_is_reproducible(unit_box):
    """Test that equal seeds give equal trajectories"""
    a = rwm_chain(unit_box, None, None, [0.5], n=200, step=0.2, seed=stratum_seed(7, 1))
    b = rwm_chain(unit_box, None, None, [0.5], n=200, step=0.2, seed=stratum_seed(7, 1))
    c = rwm_chain(unit_box, None, None, [0.5], n=200, step=0.2, seed=stratum_seed(7, 2))
    assert np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


def test_rwm_argument_validation(unit_box):
    """Test validation of run lengths and step sizes"""
    with pytest.raises(ValueError):
        rwm_chain(unit_box, None, None, [0.5], n=0, step=0.1)
    with pytest.raises(ValueError):
        rwm_chain(unit_box, None, None, [0.5], n=10, step=0.0)
    with pytest.raises(ValueError):
        rwm_chain(unit_box, None, None, [0.5], n=10, step=0.1, thin=0)


def test_rwm_thinning(unit_box):
    """Test that thinning keeps n states"""
    traj = rwm_chain(unit_box, None, None, [0.5], n=100, step=0.1, seed=4, burn_in=50, thin=5)
    assert len(traj) == 100
    assert traj.thin == 5 and traj.burn_in == 50


def test_rwm_detailed_balance_on_three_levels():
    """Test symmetric cell-to-cell flows and occupancies on a three-level density"""
    w = np.array([1.0, 3.0, 6.0])
    target = TargetModel(
        log_density=lambda X: np.log(w[np.clip(np.floor(X[:, 0]).astype(int), 0, 2)]),
        dim=1,
        domain=Domain(kind="box", lo=0.0, hi=3.0),
    )
    traj = rwm_chain(target, None, None, [1.5], n=200000, step=1.0, seed=8)
    cell = np.minimum(np.floor(traj.states[:, 0]).astype(int), 2)
    flows = np.zeros((3, 3))
    np.add.at(flows, (cell[:-1], cell[1:]), 1.0)
    for a, b in [(0, 1), (0, 2), (1, 2)]:
        assert flows[a, b] > 0
        assert abs(flows[a, b] - flows[b, a]) <= 5.0 * np.sqrt(flows[a, b] + flows[b, a])
    assert np.allclose(np.bincount(cell, minlength=3) / cell.size, w / w.sum(), atol=0.02)


# ============= Langevin Tests =============
def test_reflected_langevin_uniform_mean():
    """Test reflected Brownian motion in a box stratum"""
    bias = IndicatorGrid(dim=1, K=1, periodic=False)
    traj = langevin_chain(_flat(), bias, 0, [0.3], n=50000, dt=1e-3, seed=5, reflected=True)
    assert traj.states.min() >= 0.0 and traj.states.max() <= 1.0
    assert abs(traj.states.mean() - 0.5) < 0.08
    assert traj.acceptance_rate == 1.0


def test_unadjusted_langevin_gaussian_variance():
    """Test the variance of unadjusted Langevin on a standard normal"""
    target = target_from_potential(Quadratic())
    traj = langevin_chain(target, None, None, [0.0], n=50000, dt=0.01, seed=6, burn_in=500)
    assert abs(traj.states.var() - 1.0) < 0.25
    assert traj.params["metropolize"] is False


def test_reflected_langevin_needs_box_stratum():
    """Test that reflection is refused on a smooth bias family"""
    bias = BilinearGrid.square(0.0, 1.0, 3)
    target = target_from_potential(Quadratic(), dim=2)
    with pytest.raises(ValueError):
        langevin_chain(target, bias, 4, [0.5, 0.5], n=10, dt=1e-3, reflected=True)


def test_langevin_nonfinite_drift():
    """Test that a NaN gradient stops the sampler"""
    target = TargetModel(
        log_density=lambda X: np.zeros(X.shape[0]),
        grad_log_density=lambda X: np.full_like(X, np.nan),
        dim=1,
    )
    with pytest.raises(SamplingError):
        langevin_chain(target, None, None, [0.0], n=10, dt=1e-3)


def test_langevin_needs_gradient():
    """Test that a target without a gradient is refused"""
    target = TargetModel(log_density=lambda X: np.zeros(X.shape[0]), dim=1)
    with pytest.raises(ValueError):
        langevin_chain(target, None, None, [0.0], n=10, dt=1e-3)


@pytest.mark.slow
def test_reflected_langevin_variance_shrinks_like_h_squared():
    """Test that the asymptotic variance of a fixed observable scales as h^2 in shrinking boxes"""
    target = target_from_potential(Quadratic())
    left = lambda X: (X[:, 0] < 0.3).astype(float)
    dt, widths, sigma2 = 4e-5, np.array([0.2, 0.1, 0.05]), []
    for k, h in enumerate(widths):
        bias = IndicatorGrid(dim=1, K=1, periodic=False, lo=0.3 - h, hi=0.3 + h)
        traj = langevin_chain(target, bias, 0, [0.3], n=1_000_000, dt=dt, seed=40 + k, reflected=True, burn_in=2000)
        # per unit time
        sigma2.append(dt * integrated_autocov(left(traj.states)).value)
    p = np.polyfit(np.log(widths), np.log(sigma2), 1)[0]
    assert 1.6 <= p <= 2.4


# ============= Ensemble Tests =============
def test_ensemble_gaussian_means(rng):
    """Test the stretch move on a 2-D standard normal"""
    target = target_from_potential(Quadratic(center=1.0), dim=2)
    x0s = rng.normal(size=(100, 2))
    traj = ensemble_chain(target, None, None, 100, x0s, n=2000, seed=8, burn_in=200)
    assert traj.states.shape == (200000, 2)
    assert traj.n_sweeps == 2000
    assert np.allclose(traj.states.mean(axis=0), 1.0, atol=0.1)
    assert 0.2 < traj.acceptance_rate < 0.9


def test_ensemble_needs_two_walkers():
    """Test that a single walker is refused"""
    target = target_from_potential(Quadratic(), dim=2)
    with pytest.raises(ValueError):
        ensemble_chain(target, None, None, 1, [[0.0, 0.0]], n=10)


def test_ensemble_degenerate_start():
    """Test that identical walkers are a sampling error"""
    target = target_from_potential(Quadratic(), dim=2)
    with pytest.raises(SamplingError):
        ensemble_chain(target, None, None, 4, np.zeros((4, 2)), n=10)


def test_ensemble_wrong_start_shape(rng):
    """Test that the start array must hold one row per walker"""
    target = target_from_potential(Quadratic(), dim=2)
    with pytest.raises(ValueError):
        ensemble_chain(target, None, None, 6, rng.normal(size=(4, 2)), n=10)


def test_walker_means():
    """Test averaging over walkers within each sweep"""
    traj = Trajectory(states=np.array([1.0, 3.0, 5.0, 7.0]), stratum=0, sampler="ensemble", n_walkers=2)
    assert walker_means(traj, traj.states[:, 0]).tolist() == [2.0, 6.0]


# ============= i.i.d. Tests =============
def test_iid_truncated_exponential_mean():
    """Test inverse-CDF draws on a bounded exponential interval"""
    density = AnalyticStratumDensity(form="exponential", lo=1.0, hi=3.0, rate=1.0)
    traj = iid_chain(density, 200000, seed=9)
    assert traj.states.min() >= 1.0 and traj.states.max() < 3.0
    assert abs(traj.states.mean() - density.mean_value()) < 0.01


def test_iid_uniform_mean():
    """Test inverse-CDF draws on a uniform interval"""
    density = AnalyticStratumDensity(form="uniform", lo=0.0, hi=0.25)
    traj = iid_chain(density, 20000, seed=10)
    assert abs(traj.states.mean() - 0.125) < 0.005


def test_iid_last_tail_stratum():
    """Test that the unbounded tail stratum stays above its threshold"""
    bias = make_tail_family(20.0, Linear())
    density = analytic_stratum_density(Linear(), 1.0, bias, 21)
    assert density.lo == 20.0 and np.isinf(density.hi)
    traj = iid_chain(density, 5000, seed=11, stratum=21)
    assert traj.states.min() >= 20.0
    assert abs(traj.states.mean() - 21.0) < 0.1


def test_iid_gaussian_stratum():
    """Test truncated normal draws for a quadratic potential"""
    bias = IndicatorGrid(dim=1, K=8, periodic=False, lo=-4.0, hi=4.0)
    density = analytic_stratum_density(Quadratic(), 1.0, bias, 4)
    assert density.form == "gaussian"
    traj = iid_chain(density, 20000, seed=12)
    assert abs(traj.states.mean() - density.mean_value()) < 0.02


def test_iid_tabulated_cosine_stratum():
    """Test tabulated inverse-CDF draws for a potential without a closed form"""
    bias = IndicatorGrid(dim=1, K=10)
    potential = Cosine(freq=2, tilt=0.1)
    density = analytic_stratum_density(potential, 5.0, bias, 0)
    assert isinstance(density, TabulatedStratumDensity)
    assert density.lo == pytest.approx(-0.1) and density.hi == pytest.approx(0.1)
    exact = quadrature_expectation(potential, lambda X: X[:, 0], 5.0, (-0.1, 0.1))
    assert density.mean_value() == pytest.approx(exact, abs=1e-5)

    traj = iid_chain(density, 100000, seed=13, stratum=0)
    assert traj.states.min() >= -0.1 and traj.states.max() < 0.1
    assert abs(traj.states.mean() - exact) < 0.002
    assert traj.params["form"] == "tabulated"


def test_iid_unsupported_inputs():
    """Test the cases with no inverse CDF"""
    with pytest.raises(ValueError):
        analytic_stratum_density(Cosine(), 1.0, IndicatorGrid(dim=2, K=4), 0)
    with pytest.raises(ValueError):
        iid_chain("exponential", 10)
    with pytest.raises(ValidationError):
        AnalyticStratumDensity(form="uniform", lo=0.0)
    with pytest.raises(ValidationError):
        AnalyticStratumDensity(form="exponential", lo=0.0, rate=-1.0)


# ============= Trajectory Tests =============
def test_trajectory_acceptance_range():
    """Test that acceptance rates outside [0, 1] are rejected"""
    with pytest.raises(ValueError):
        Trajectory(states=np.zeros(3), stratum=0, sampler="rwm", acceptance_rate=1.5)


def test_save_and_load_trajectory(tmp_path, unit_box):
    """Test writing a trajectory and reading it back"""
    traj = rwm_chain(unit_box, None, None, [0.5], n=50, step=0.1, seed=stratum_seed(1, 3))
    traj.stratum = 3
    path = save_trajectory(traj, tmp_path)
    assert path.name == "stratum_00003.npz"
    assert (tmp_path / "stratum_00003.json").exists()

    loaded = load_trajectory(path)
    assert np.array_equal(loaded.states, traj.states)
    assert loaded.stratum == 3
    assert loaded.sampler == "rwm"
    assert loaded.params["step"] == 0.1


def test_export_csv_ensemble(tmp_path, rng):
    """Test the CSV export of an ensemble trajectory"""
    target = target_from_potential(Quadratic(), dim=2)
    traj = ensemble_chain(target, None, None, 4, rng.normal(size=(4, 2)), n=5, seed=13)
    frame = pd.read_csv(export_csv(traj, tmp_path / "traj.csv"))
    assert list(frame.columns) == ["sweep", "walker", "x0", "x1"]
    assert len(frame) == 20
    assert frame["walker"].tolist()[:4] == [0, 1, 2, 3]


# ============= Dispatch Tests =============
def test_sampler_spec_budget():
    """Test kept-state arithmetic"""
    spec = SamplerSpec(kind="ensemble", steps=1000, burn_in=200, thin=4, walkers=10)
    assert spec.kept == 200
    assert spec.n_starts == 10
    assert spec.samples_per_stratum() == 2000


def test_sampler_spec_burn_in_must_leave_steps():
    """Test that burn-in cannot consume the whole run"""
    with pytest.raises(ValidationError, match="steps must exceed burn_in"):
        SamplerSpec(steps=100, burn_in=100)


def test_run_chain_iid_on_stratum():
    """Test dispatching an i.i.d. stratum run"""
    bias = make_tail_family(4.0, Linear())
    spec = SamplerSpec(kind="iid", steps=300)
    target = target_from_potential(Linear(), domain=Domain(kind="half_line"))
    traj = run_chain(spec, target, bias, 2, None, seed=1, potential=Linear())
    assert len(traj) == 300
    assert traj.states.min() >= 1.0 and traj.states.max() < 3.0


def test_run_chain_errors(unit_box):
    """Test missing inputs to run_chain"""
    with pytest.raises(ValueError):
        run_chain(SamplerSpec(kind="iid", steps=10), unit_box, None, None, None)
    with pytest.raises(ValueError):
        run_chain(SamplerSpec(kind="rwm", steps=10), unit_box, None, None, None)
    with pytest.raises(ValueError):
        run_chain(SamplerSpec(kind="ensemble", steps=10, walkers=4), unit_box, None, None, [[0.5], [0.4]])


def test_direct_chain_matched_budget():
    """Test that direct runs honour the kept override"""
    target = target_from_potential(Linear(), domain=Domain(kind="half_line"))
    traj = direct_chain(SamplerSpec(kind="iid", steps=10), target, None, seed=2, potential=Linear(), kept=500)
    assert len(traj) == 500
    assert traj.states.min() >= 0.0


# ============= Start Point Tests =============
def test_pick_start_in_stratum(unit_box, rng):
    """Test that start points are drawn from in-stratum candidates"""
    density = StratumDensity(unit_box, IndicatorGrid(dim=1, K=4, periodic=False), 0)
    starts = pick_start(np.array([0.9, 0.05, 0.1]), density, rng, size=5)
    assert starts.shape == (5, 1)
    assert set(starts[:, 0].tolist()) <= {0.05, 0.1}


def test_pick_start_without_candidates(unit_box, rng):
    """Test that no usable candidate is a sampling error"""
    density = StratumDensity(unit_box, IndicatorGrid(dim=1, K=4, periodic=False), 0)
    with pytest.raises(SamplingError):
        pick_start(np.array([0.9]), density, rng)

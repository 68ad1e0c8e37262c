import json

import numpy as np
import pytest

from emus.config import Settings
from emus.errors import ConfigError
from emus.experiments.config import (
    ObservableSpec,
    check_config,
    load_config,
    load_preset,
    with_overrides,
)


def _tail_config(**changes):
    data = {
        "name": "tiny-tail",
        "experiment": "tail",
        "target": {"potential": "linear", "params": {"slope": 1.0}, "domain": {"kind": "half_line"}},
        "bias": {"kind": "tail", "M": 4.0},
        "sampler": {"kind": "iid", "steps": 2000},
        "observable": {"kind": "indicator_above", "threshold": 4.0},
    }
    data.update(changes)
    return data


# ============= Preset Tests =============
@pytest.mark.parametrize(
    "name, n_strata",
    [("tail", 22), ("lowtemp", 25), ("lowtemp15", 75), ("lowtemp30", 150), ("mixture", 2500)],
)
def test_presets_validate(name, n_strata):
    """Test that every shipped preset loads and builds its bias family"""
    config = load_preset(name)
    assert config.experiment == name.rstrip("0123456789")
    assert check_config(config).n_strata == n_strata


def test_tail_preset_budget():
    """Test that the direct budget matches strata times samples"""
    config = load_preset("tail")
    assert config.matched_budget(22) == config.direct.total_samples == 220000


def test_unknown_preset():
    """Test that only shipped presets can be named"""
    with pytest.raises(ConfigError) as exc:
        load_preset("highdim")
    assert exc.value.loc == ("preset",)


# ============= Validation Tests =============
def test_burn_in_exceeds_steps():
    """Test that a sampler keeping no states is rejected"""
    with pytest.raises(ConfigError) as exc:
        load_config(_tail_config(sampler={"kind": "rwm", "steps": 100, "burn_in": 200}))
    assert exc.value.loc[0] == "sampler"
    assert "burn_in" in str(exc.value)


def test_budget_mismatch():
    """Test that the direct budget must equal the stratified one"""
    with pytest.raises(ConfigError) as exc:
        load_config(_tail_config(direct={"total_samples": 1000}))
    assert exc.value.loc == ("direct", "total_samples")


def test_unknown_potential():
    """Test that potentials come from the registry"""
    with pytest.raises(ConfigError) as exc:
        load_config(_tail_config(target={"potential": "morse"}))
    assert exc.value.loc[:2] == ("target", "potential")


def test_bias_without_kind():
    """Test that a bias descriptor must name its family"""
    with pytest.raises(ConfigError) as exc:
        load_config(_tail_config(bias={"M": 4.0}))
    assert exc.value.loc[0] == "bias"


def test_iid_needs_one_dimension():
    """Test that i.i.d. sampling is refused for a 2-D target"""
    config = _tail_config(
        target={"potential": "quadratic", "dim": 2},
        bias={"kind": "indicator_grid", "K": 2, "dim": 2, "periodic": False, "lo": -1.0, "hi": 1.0},
    )
    with pytest.raises(ConfigError) as exc:
        load_config(config)
    assert exc.value.loc == ("sampler", "kind")


def test_marginal_with_unknown_cv():
    """Test that marginal variables must be registered"""
    with pytest.raises(ConfigError) as exc:
        load_config(_tail_config(marginals=[{"name": "x", "cv": "dihedral", "lo": [0.0], "hi": [4.0], "bins": [8]}]))
    assert exc.value.loc == ("marginals", 0, "cv")


def test_missing_file(tmp_path):
    """Test a config path that does not exist"""
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_invalid_json(tmp_path):
    """Test a config file that is not JSON"""
    path = tmp_path / "broken.json"
    path.write_text("{\"name\": ")
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert "Invalid JSON" in str(exc.value)


def test_load_from_file(tmp_path):
    """Test reading a valid config from disk"""
    path = tmp_path / "tail.json"
    path.write_text(json.dumps(_tail_config()))
    config = load_config(path)
    assert config.name == "tiny-tail"
    assert config.sampler.kept == 2000


# ============= Resolution Tests =============
def test_tail_family_size_from_slope():
    """Test K = M * ceil(max |V'|) for the tail family"""
    config = load_config(_tail_config(bias={"kind": "tail", "M": 20.0}))
    assert config.resolved_bias()["K"] == 20
    assert check_config(config).n_strata == 22


def test_indicator_grid_size_from_beta():
    """Test K = ceil(beta) when the grid leaves K out"""
    config = load_config(_tail_config(
        target={"potential": "cosine", "beta": 2.5, "domain": {"kind": "periodic"}},
        bias={"kind": "indicator_grid", "periodic": True},
        sampler={"kind": "rwm", "steps": 100},
    ))
    desc = config.resolved_bias()
    assert desc["K"] == 3
    assert desc["dim"] == 1
    assert "K" not in config.bias


def test_indicator_grid_strata_per_beta():
    """Test K = strata_per_beta * ceil(beta) and rejection of a bad multiplier"""
    config = load_config(_tail_config(
        target={"potential": "cosine", "beta": 14.2, "domain": {"kind": "periodic"}},
        bias={"kind": "indicator_grid", "strata_per_beta": 5, "periodic": True},
        sampler={"kind": "rwm", "steps": 100},
    ))
    desc = config.resolved_bias()
    assert desc["K"] == 75
    assert "strata_per_beta" not in desc
    assert check_config(config).n_strata == 75

    with pytest.raises(ConfigError) as exc:
        load_config(_tail_config(
            target={"potential": "cosine", "beta": 5.0, "domain": {"kind": "periodic"}},
            bias={"kind": "indicator_grid", "strata_per_beta": 0, "periodic": True},
            sampler={"kind": "rwm", "steps": 100},
        ))
    assert exc.value.loc == ("bias",)


def test_run_dir(tmp_path):
    """Test the explicit output directory and the default under runs_dir"""
    config = load_config(_tail_config(output_dir=str(tmp_path / "out")))
    assert config.run_dir == tmp_path / "out"
    assert load_config(_tail_config()).run_dir.name == "tiny-tail"


def test_overrides_are_revalidated(tmp_path):
    """Test command-line overrides and their validation"""
    config = load_config(_tail_config())
    changed = with_overrides(config, replicates=5, seed=11, out=str(tmp_path))
    assert (changed.replicates, changed.seed, changed.output_dir) == (5, 11, str(tmp_path))
    assert config.replicates == 1
    with pytest.raises(ConfigError):
        with_overrides(config, replicates=0)


# ============= Observable Tests =============
@pytest.mark.parametrize(
    "spec, expected",
    [
        ({"kind": "one"}, [1.0, 1.0, 1.0]),
        ({"kind": "indicator_above", "threshold": 1.0}, [0.0, 1.0, 1.0]),
        ({"kind": "indicator_below", "threshold": 1.0}, [1.0, 0.0, 0.0]),
        ({"kind": "indicator_interval", "lo": 0.5, "hi": 2.0}, [0.0, 1.0, 0.0]),
        ({"kind": "coordinate"}, [0.0, 1.0, 2.5]),
    ],
)
def test_observables(spec, expected):
    """Test the scalar observables on three points"""
    g = ObservableSpec(**spec).build()
    assert g(np.array([[0.0], [1.0], [2.5]])).tolist() == expected


def test_observable_on_second_axis():
    """Test an observable of one coordinate of a 2-D state"""
    g = ObservableSpec(kind="coordinate", axis=1).build()
    assert g(np.array([[0.0, 3.0], [1.0, -2.0]])).tolist() == [3.0, -2.0]


# ============= Settings Tests =============
def test_settings_from_environment(monkeypatch, tmp_path):
    """Test EMUS_-prefixed environment overrides"""
    monkeypatch.setenv("EMUS_DATA_DIR", str(tmp_path / "data"))
    monkeypatch.setenv("EMUS_RUNS_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("EMUS_ITER_MAX", "7")
    monkeypatch.setenv("EMUS_STATIONARY_METHOD", "qr")

    s = Settings()
    assert s.runs_dir == tmp_path / "runs"
    assert s.iter_max == 7
    assert s.stationary_method == "qr"
    assert (tmp_path / "data").is_dir() and (tmp_path / "runs").is_dir()

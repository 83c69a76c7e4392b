"""Tests for run configuration loading, validation, presets and sampler construction"""

import json

import pytest
import yaml

from collapsar import __version__
from collapsar.config import (
    CollapseSection,
    EnsembleSection,
    GridSection,
    HamiltonianSection,
    InitialStateSection,
    IntegratorSection,
    LatticeSection,
    MeasurementSection,
    RunConfig,
    build_initial_state,
    build_sampler,
    config_from_dict,
    load_config,
    outcome_weights,
    preset,
    resolve_workers,
)
from collapsar.csl import CslSampler
from collapsar.errors import ConfigurationError
from collapsar.measurement import MeasurementSampler
from collapsar.qmupl import GaussianSampler, QmuplSampler


class TestLoading:
    """Parsing JSON and YAML configurations"""

    def test_defaults_are_valid(self):
        config = config_from_dict({})
        assert config.model == "qmupl"
        assert config.grid.n_points == 128

    def test_unknown_keys_are_rejected(self):
        with pytest.raises(ConfigurationError) as info:
            config_from_dict({"model": "qmupl", "bogus": 1})
        assert info.value.problems

    def test_malformed_input(self):
        with pytest.raises(ConfigurationError):
            config_from_dict(["not", "a", "mapping"])

    def test_yaml_and_json_files(self, tmp_path):
        data = {"model": "gaussian", "hamiltonian": {"kind": "harmonic", "omega": 1.0},
                "ensemble": {"n": 20, "master_seed": 4}}
        (tmp_path / "run.yaml").write_text(yaml.safe_dump(data))
        (tmp_path / "run.json").write_text(json.dumps(data))
        from_yaml = load_config(tmp_path / "run.yaml")
        from_json = load_config(tmp_path / "run.json")
        assert from_yaml == from_json
        assert from_yaml.ensemble.master_seed == 4

    def test_missing_and_unparsable_files(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "absent.json")
        (tmp_path / "broken.json").write_text("{")
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "broken.json")


class TestValidation:
    """Every problem is reported at once"""

    def test_collects_problems(self):
        config = RunConfig(model="bogus", ensemble=EnsembleSection(n=0, chunk_size=0))
        with pytest.raises(ConfigurationError) as info:
            config.validate()
        assert len(info.value.problems) == 3
        assert any(p.startswith("ensemble.n:") for p in info.value.problems)

    def test_grid_and_centers(self):
        config = RunConfig(grid=GridSection(-1.0, 1.0, 100), initial_state=InitialStateSection(centers=[3.0]))
        with pytest.raises(ConfigurationError) as info:
            config.validate()
        fields = [p.split(":")[0] for p in info.value.problems]
        assert fields == ["grid.n_points", "initial_state.centers[0]"]

    def test_model_specific_sections(self):
        measurement = RunConfig(model="measurement", measurement=MeasurementSection(weight_plus=1.5, window=5.0))
        with pytest.raises(ConfigurationError) as info:
            measurement.validate()
        assert len(info.value.problems) == 2
        lattice = RunConfig(model="csl", lattice=LatticeSection(n_sites=3, initial_occupations=[[1, 0]]))
        with pytest.raises(ConfigurationError) as info:
            lattice.validate()
        assert len(info.value.problems) == 2

    def test_manifest_omits_runtime_settings(self):
        manifest = RunConfig(ensemble=EnsembleSection(workers=4)).manifest_dict()
        assert manifest["version"] == __version__
        assert "workers" not in manifest["config"]["ensemble"]
        assert "directory" not in manifest["config"]["output"]


class TestPresets:
    """Named presets and overrides"""

    def test_born_default(self):
        config = preset("born_default")
        assert config.initial_state.weights == [0.3, 0.7]
        assert outcome_weights(config) == pytest.approx((0.3, 0.7))
        assert isinstance(build_sampler(config), QmuplSampler)

    def test_preset_override(self):
        config = config_from_dict({"preset": "born_default", "ensemble": {"n": 10}})
        assert config.ensemble.n == 10
        assert config.ensemble.master_seed == 7
        assert config.integrator.dt == 2e-3

    def test_pointer_default(self):
        config = preset("pointer_default")
        assert outcome_weights(config) == (0.5, 0.5)
        assert isinstance(build_sampler(config), MeasurementSampler)

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            preset("nope")


class TestBuilders:
    """Configured samplers and initial states"""

    def test_gaussian_sampler(self):
        config = RunConfig(model="gaussian", hamiltonian=HamiltonianSection(kind="harmonic", omega=1.0))
        sampler = build_sampler(config)
        assert isinstance(sampler, GaussianSampler)
        assert len(sampler.times) == 101
        assert outcome_weights(config) is None

    def test_csl_sampler(self):
        config = RunConfig(model="csl", collapse=CollapseSection(alpha=20.0, gamma=0.1),
                           integrator=IntegratorSection(dt=0.01, horizon=0.1, output_every=5),
                           lattice=LatticeSection())
        sampler = build_sampler(config)
        assert isinstance(sampler, CslSampler)
        assert sampler.config.gamma == 0.1

    def test_product_initial_state(self):
        config = config_from_dict({"particles": [{"mass": 1.0}, {"mass": 2.0}],
                                   "grid": {"x_min": -4.0, "x_max": 4.0, "n_points": 32},
                                   "initial_state": {"centers": [-1.0, 1.0], "width": 0.5}})
        psi = build_initial_state(config)
        assert psi.n_particles == 2
        assert psi.norm_squared() == pytest.approx(1.0, rel=1e-6)


class TestWorkers:
    """Worker count resolution order"""

    def test_explicit_then_config_then_environment(self, monkeypatch):
        monkeypatch.setenv("COLLAPSAR_WORKERS", "3")
        assert resolve_workers(2) == 2
        assert resolve_workers(None, RunConfig(ensemble=EnsembleSection(workers=5))) == 5
        assert resolve_workers(None, RunConfig()) == 3
        monkeypatch.delenv("COLLAPSAR_WORKERS")
        assert resolve_workers(None) == 1

    def test_invalid_values(self, monkeypatch):
        monkeypatch.setenv("COLLAPSAR_WORKERS", "many")
        with pytest.raises(ConfigurationError):
            resolve_workers(None)
        with pytest.raises(ConfigurationError):
            resolve_workers(0)

"""
Run Config Test

Checks strict parsing of the run configuration, path resolution, command line
overrides and the worker count.
"""

import json
import os
import sys
from pathlib import Path

import pytest

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.errors import ConfigError
from src.run_config import (THREADS_ENV, RunConfig, default_threads, load_run_config, parse_run_config,
                            with_overrides)


@pytest.fixture
def inputs(tmp_path):
    """A config directory with empty input files"""
    for name in ("scan.mhd", "cortex.ply", "psf.json"):
        (tmp_path / name).write_text("")
    return tmp_path


def write_config(directory: Path, data) -> str:
    path = directory / "run.json"
    path.write_text(json.dumps(data))
    return str(path)


BASE = {"paths": {"volume": "scan.mhd", "mesh": "cortex.ply", "psf_model": "psf.json"}}


def test_defaults():
    config = parse_run_config({})
    assert config == RunConfig()
    assert config.patches.target_count == 48
    assert config.mcem.build().stop_threshold == 0.05


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError) as info:
        parse_run_config({"mcem": {"k_zero": 10}})
    assert "mcem.k_zero" in str(info.value)


def test_wrong_types_are_rejected():
    with pytest.raises(ConfigError):
        parse_run_config({"seed": "1"})
    with pytest.raises(ConfigError):
        parse_run_config({"dump_profiles": 1})
    with pytest.raises(ConfigError):
        parse_run_config({"patches": 3})
    assert parse_run_config({"profiles": {"step_mm": 1}}).profiles.step_mm == 1.0
    with pytest.raises(ConfigError):
        parse_run_config({"profiles": {"voxel_model": "yes"}})


def test_grid_model_keys():
    config = parse_run_config({"profiles": {"voxel_model": False}, "noise": {"sigma_grid": 20}})
    assert config.profiles.voxel_model is False
    assert config.noise.sigma_grid == 20.0
    assert RunConfig().profiles.voxel_model is True
    assert RunConfig().noise.sigma_grid is None


def test_relative_paths_resolve_against_config_directory(inputs):
    config = load_run_config(write_config(inputs, BASE))
    assert config.paths.volume == str(inputs / "scan.mhd")
    assert config.paths.psf_model == str(inputs / "psf.json")
    assert config.paths.output_dir == str(inputs / "output")


def test_missing_files(inputs):
    with pytest.raises(ConfigError):
        load_run_config(str(inputs / "absent.json"))
    data = json.loads(json.dumps(BASE))
    data["paths"]["mesh"] = "missing.ply"
    with pytest.raises(ConfigError) as info:
        load_run_config(write_config(inputs, data))
    assert "paths.mesh" in str(info.value)


def test_exactly_one_psf_source(inputs):
    (inputs / "mtf.csv").write_text("")
    data = json.loads(json.dumps(BASE))
    data["paths"]["mtf"] = "mtf.csv"
    with pytest.raises(ConfigError):
        load_run_config(write_config(inputs, data))


def test_invalid_json(inputs):
    path = inputs / "run.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_prior_and_mcem_build():
    config = parse_run_config({"prior": {"rho_ct": {"mu0": 1000.0}}, "mcem": {"k0": 80, "max_iterations": 5}})
    prior = config.prior.build()
    assert prior.rho_ct.mu0 == 1000.0
    assert prior.rho_tr.mu0 == 200.0
    settings = config.mcem.build()
    assert settings.k0 == 80 and settings.max_iterations == 5
    with pytest.raises(ConfigError):
        parse_run_config({"mcem": {"growth_factor": 0.5}}).mcem.build()
    with pytest.raises(ConfigError):
        parse_run_config({"prior": {"w": {"nu0": -1.0}}}).prior.build()


def test_overrides():
    config = with_overrides(RunConfig(), seed=9, threads=2, output_dir="elsewhere", plots=True)
    assert config.seed == 9
    assert config.threads == 2
    assert config.paths.output_dir == "elsewhere"
    assert config.plots
    assert with_overrides(config) == config


def test_thread_count(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert default_threads(RunConfig()) == 3
    assert default_threads(RunConfig(threads=5)) == 5
    monkeypatch.setenv(THREADS_ENV, "many")
    assert default_threads(RunConfig()) == (os.cpu_count() or 1)

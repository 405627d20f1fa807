from pathlib import Path

import pytest

from config import ConfigError, apply_overrides, config_echo, load_config, parse_config
from conftest import SMALL_CONFIG_TEXT
from harness import ExperimentConfig, build_params

DESK_CFG = Path(__file__).resolve().parent.parent / "desk.cfg"


def test_small_config_parses():
    config = parse_config(SMALL_CONFIG_TEXT)
    assert config.n_particles == 27
    assert config.dt_base == 1e-3
    assert config.flow_rates == (0.2, -0.1, -0.1)
    assert config.schemes == ("em", "se_b")
    # keys not given keep their defaults
    assert config.ladder_levels == 5
    assert config.use_cells is True


def test_echo_round_trips():
    config = parse_config(SMALL_CONFIG_TEXT)
    assert parse_config(config_echo(config)) == config


def test_desk_config_loads():
    config = load_config(DESK_CFG)
    assert config == ExperimentConfig(schemes=("em", "se_a", "se_b", "se_ac", "abapo", "abapo_c",
                                               "soile_a", "soile_b"))


def test_unknown_key_names_file_and_line():
    text = "time_step = 1e-3\n# a comment\nfoo = 1\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text, "run.cfg")
    assert info.value.line == 3
    assert str(info.value) == "run.cfg:3: unknown key 'foo'"


def test_duplicate_key():
    with pytest.raises(ConfigError) as info:
        parse_config("runs = 2\n\nruns = 3\n", "run.cfg")
    assert info.value.line == 3
    assert "first set on line 1" in str(info.value)


@pytest.mark.parametrize("line", [
    "runs = two",
    "runs = 2.5",
    "flow_rates = 0.2, -0.1",
    "use_cell_list = maybe",
    "schemes = ,",
    "runs =",
    "time_step 1e-3",
])
def test_malformed_lines(line):
    with pytest.raises(ConfigError) as info:
        parse_config(line + "\n")
    assert info.value.line == 1


def test_invalid_values_fail_validation():
    with pytest.raises(ConfigError):
        parse_config(SMALL_CONFIG_TEXT.replace("simulation_time = 0.016", "simulation_time = 0.017"))
    with pytest.raises(ConfigError):
        parse_config(SMALL_CONFIG_TEXT.replace("em, se_b", "em, verlet"))
    with pytest.raises(ConfigError):
        parse_config("inverse_temperature = -1\n")
    with pytest.raises(ConfigError):
        parse_config("mid_step_wrap_time = middle\n")


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.cfg")


def test_overrides():
    config = parse_config(SMALL_CONFIG_TEXT)
    assert apply_overrides(config) is config
    changed = apply_overrides(config, runs=5, seed=11, schemes="soile_a,abapo")
    assert (changed.runs, changed.seed, changed.schemes) == (5, 11, ("soile_a", "abapo"))
    with pytest.raises(ConfigError):
        apply_overrides(config, runs=0)
    with pytest.raises(ConfigError):
        apply_overrides(config, schemes="rk4")


def test_mid_step_wrap_time_reaches_the_integrators():
    config = parse_config(SMALL_CONFIG_TEXT + "mid_step_wrap_time = start\n")
    assert config.mid_wrap_at == "start"
    assert build_params(config).mid_wrap_at == "start"
    assert "mid_step_wrap_time = start" in config_echo(config)

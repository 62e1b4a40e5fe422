from pathlib import Path

import numpy as np
import pytest
import tomli

from fbcbf.config import ConfigError, ScenarioConfig, dumps_toml, from_dict, load_config, to_dict, validate

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def failing(checks):
    return [c.name for c in checks if not c.ok]


def test_default_passes_validation():
    assert failing(validate(ScenarioConfig())) == []


@pytest.mark.parametrize("name", ["baseline.toml", "ablation_unfiltered.toml"])
def test_shipped_configs_validate(name):
    assert failing(validate(load_config(CONFIGS / name))) == []


def test_baseline_file_is_the_default():
    assert load_config(CONFIGS / "baseline.toml") == ScenarioConfig()


def test_toml_round_trip():
    cfg = ScenarioConfig().replace(**{"contact.kind": "linear", "sim.seed": 7, "velocity.rho": [0.3] * 10})
    back = from_dict(tomli.loads(dumps_toml(cfg)))
    assert back == cfg
    assert back.content_hash() == cfg.content_hash()


def test_partial_file_fills_defaults(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[contact]\nstiffness = 600\n")
    cfg = load_config(p)
    assert cfg.contact.stiffness == 600.0 and isinstance(cfg.contact.stiffness, float)
    assert cfg.replace(**{"contact.stiffness": 300.0}) == ScenarioConfig()


@pytest.mark.parametrize("text,fragment", [
    ("[contact]\nstifness = 1.0\n", "contact: unknown key(s) stifness"),
    ("[nope]\nx = 1\n", "config: unknown key(s) nope"),
    ("[contact]\nstiffness = \"hard\"\n", "contact.stiffness: expected a number"),
    ("[sim]\nseed = 1.5\n", "sim.seed: expected an integer"),
    ("[kin_cbf]\nenabled = 1\n", "kin_cbf.enabled: expected a boolean"),
    ("[velocity]\nrho = 0.5\n", "velocity.rho: expected an array"),
    ("contact = 3\n", "contact: expected a table"),
    ("[reference.force]\nofset = 1.0\n", "reference.force: unknown key(s) ofset"),
])
def test_bad_files_name_the_offending_key(tmp_path, text, fragment):
    p = tmp_path / "bad.toml"
    p.write_text(text)
    with pytest.raises(ConfigError, match=fragment.replace("(", r"\(").replace(")", r"\)")):
        load_config(p)


def test_malformed_toml(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[contact\n")
    with pytest.raises(ConfigError, match="bad.toml"):
        load_config(p)


def test_replace_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ScenarioConfig().replace(**{"contact.nope": 1.0})
    with pytest.raises(ConfigError):
        ScenarioConfig().replace(**{"nope.stiffness": 1.0})


def test_content_hash_tracks_content():
    a, b = ScenarioConfig(), ScenarioConfig()
    assert a.content_hash() == b.content_hash()
    assert a.replace(**{"sim.seed": 1}).content_hash() != a.content_hash()


def test_force_reference_above_ceiling_is_rejected():
    cfg = ScenarioConfig().replace(**{"reference.force.offset": 2.0, "bounds.tighten_force_limits": False})
    assert "sup{M_upper_f + f_d} < f_ceiling" in failing(validate(cfg))


def test_tightening_cannot_rescue_an_infeasible_reference():
    cfg = ScenarioConfig().replace(**{"reference.force.offset": 2.0})
    assert "force limits positive" in failing(validate(cfg))


def test_force_limits_are_tightened_into_the_corridor():
    cfg = ScenarioConfig().replace(**{"reference.force.amplitude": 0.4, "reference.force.period": 10.0,
                                      "initial.force": 0.8})
    lo, hi = cfg.force_limits()
    assert lo == pytest.approx(1.0 - 0.4 - 0.2 - 0.01, abs=1e-6)
    assert hi == pytest.approx(1.8 - 1.4 - 0.01, abs=1e-6)
    assert failing(validate(cfg)) == []


def test_initial_error_outside_band_is_rejected():
    bad = failing(validate(ScenarioConfig().replace(**{"initial.e_y": 0.2})))
    assert "initial error e_y inside bounds" in bad and "b_k(0) > 0" in bad


def test_initial_force_outside_band_is_rejected():
    bad = failing(validate(ScenarioConfig().replace(**{"initial.force": 1.6})))
    assert "initial error e_f inside bounds" in bad


def test_dimension_and_sign_checks():
    cfg = ScenarioConfig()
    assert "rho has one entry per DoF" in failing(validate(cfg.replace(**{"velocity.rho": [0.5] * 9})))
    assert "dt > 0" in failing(validate(cfg.replace(**{"sim.dt": 0.0})))
    assert "0 < grad_lower <= grad_nominal <= grad_upper" in failing(
        validate(cfg.replace(**{"kin_cbf.grad_nominal": 100.0})))
    assert "pitch inside (-pi/2, pi/2)" in failing(
        validate(cfg.replace(**{"initial.vehicle_rpy": [0.0, 1.5707, 0.0]})))


def test_initial_state_places_tool_at_configured_errors():
    cfg = ScenarioConfig()
    from fbcbf.contact import deformation_for_force
    from fbcbf.kinematics import forward_kinematics
    q0, z0 = cfg.initial_state()
    x = forward_kinematics(cfg.kinematic_model(), q0).position
    assert np.all(z0 == 0)
    assert x[0] == pytest.approx(deformation_for_force(cfg.plant_contact(), 0.45))
    assert x[1] == pytest.approx(cfg.task_reference().p_d(0.0)[0] + 0.04)


def test_to_dict_is_plain():
    d = to_dict(ScenarioConfig())
    assert isinstance(d["model"]["joint_offsets"], list) and isinstance(d["sim"]["dt"], float)


def test_initial_force_margin_must_exceed_noise_bound():
    cfg = ScenarioConfig().replace(**{"reference.force.amplitude": 0.2, "reference.force.period": 2.0,
                                      "sim.duration": 10.0})
    assert failing(validate(cfg)) == ["initial force margin exceeds force noise bound"]
    assert failing(validate(cfg.replace(**{"noise.fraction": 0.0}))) == []

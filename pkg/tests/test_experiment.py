import numpy as np
import pytest
import yaml

from ddstc import experiment, trajectory
from ddstc.experiment import (ConfigError, collect_data, emit_config, load_config,
                              parse_config, prepare_output_feedback, shipped_presets)
from ddstc.statefb import state_gain_oracle

PRESETS = ["double-integrator", "four-tank", "inverted-pendulum", "inverted-pendulum-text"]


def test_shipped_presets_listed():
    assert shipped_presets() == PRESETS


@pytest.mark.parametrize("name", PRESETS)
def test_round_trip(name):
    cfg = load_config(name)
    again = parse_config(yaml.safe_load(emit_config(cfg)))
    assert again == cfg
    assert again.json() == cfg.json()


@pytest.mark.parametrize("name", PRESETS)
def test_presets_resolve(name):
    cfg = load_config(name)
    if cfg["mode"] == "output-feedback":
        assert cfg["state_feedback"] is None
        assert cfg["output_feedback"]["eta"] == 2
        assert cfg["data"]["order"] == 11 + 4 + 2
    else:
        assert cfg["output_feedback"] is None
        assert cfg["data"]["order"] == cfg["state_feedback"]["L"] + cfg.plant().n_x + 1


def test_load_from_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(emit_config(load_config("four-tank")))
    assert load_config(str(p)) == load_config("four-tank")


def test_missing_config():
    with pytest.raises(ConfigError, match="no file or preset"):
        load_config("no-such-thing")


def test_malformed_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("a: [1, 2\n")
    with pytest.raises(ConfigError, match="malformed YAML"):
        load_config(str(p))


def _tank(**changes):
    d = load_config("four-tank").to_dict()
    for path, val in changes.items():
        node = d
        keys = path.split("__")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = val
    return d


@pytest.mark.parametrize("change, field", [
    ({"output_feedback__sigma": 1.5}, "output_feedback.sigma"),
    ({"output_feedback__L": 2}, "output_feedback.L"),
    ({"output_feedback__error_index": "other"}, "output_feedback.error_index"),
    ({"noise__distribution": "gauss"}, "noise.distribution"),
    ({"noise__bound": 0.0}, "noise.bound"),
    ({"mode": "open-loop"}, "mode"),
    ({"plant__preset": "nope"}, "plant.preset"),
    ({"data__N": 20}, "data.N"),
    ({"output_feedback__terminal": "magic"}, "output_feedback.terminal"),
])
def test_field_errors(change, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        parse_config(_tank(**change))


def test_unknown_field_named():
    d = _tank()
    d["output_feedback"]["sigmaa"] = 0.5
    with pytest.raises(ConfigError, match=r"output_feedback\.sigmaa: unknown field"):
        parse_config(d)


def test_short_data_reports_minimum():
    with pytest.raises(ConfigError, match=r"need N >= 50"):
        parse_config(_tank(data__N=20))


def test_state_mode_needs_state_output():
    d = _tank(mode="state-feedback")
    d["output_feedback"] = None
    with pytest.raises(ConfigError, match="C = I"):
        parse_config(d)


def test_overrides():
    cfg = load_config("four-tank")
    c2 = cfg.with_overrides(seed=9, out="x", sigma=0.7)
    assert (c2["noise"]["seed"], c2["out"], c2["output_feedback"]["sigma"]) == (9, "x", 0.7)
    assert cfg["noise"]["seed"] == 3


def test_matrix_plant():
    d = load_config("double-integrator").to_dict()
    sys = load_config("double-integrator").plant()
    d["plant"] = {"A": sys.A.tolist(), "B": sys.B.tolist()}
    cfg = parse_config(d)
    assert np.allclose(cfg.plant().A, sys.A)


def test_collect_deterministic():
    cfg = load_config("four-tank")
    a, b = collect_data(cfg), collect_data(cfg)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.outputs, b.outputs)
    assert trajectory.is_persistently_exciting(a.inputs, cfg["data"]["order"])


def test_prestabilized_collection_records_applied_input():
    cfg = load_config("inverted-pendulum")
    data = collect_data(cfg)
    sys = cfg.plant()
    K = experiment.state_gain(cfg, sys)
    u = trajectory.generate_pe_input(1, cfg["data"]["N"], cfg["data"]["order"],
                                     cfg["data"]["seed"])
    assert np.allclose(data.inputs, u + data.outputs @ K.T)
    assert np.max(np.abs(data.outputs)) < 1e3


def test_user_terminal_ingredients_validated():
    cfg = load_config("four-tank")
    data = collect_data(cfg)
    good = prepare_output_feedback(cfg, data)
    t = good.term
    supplied = {"P": t.P.tolist(), "K": t.K.tolist(), "eps": float(t.eps),
                "P_r": t.P_r.tolist(), "K_r": t.K_r.tolist(), "r": float(t.r)}
    d = cfg.to_dict()
    d["output_feedback"]["terminal"] = supplied
    ok = prepare_output_feedback(parse_config(d), data, rho=good.rho)
    assert ok.term.r == pytest.approx(t.r)
    supplied["eps"] = float(t.eps) * 100
    d["output_feedback"]["terminal"] = supplied
    with pytest.raises(ConfigError, match="terminal"):
        prepare_output_feedback(parse_config(d), data, rho=good.rho)


def test_state_gain_override():
    d = load_config("double-integrator").to_dict()
    d["state_feedback"]["K"] = [[-1.0, -2.0]]
    cfg = parse_config(d)
    assert np.array_equal(experiment.state_gain(cfg, cfg.plant()), [[-1.0, -2.0]])
    cfg0 = load_config("double-integrator")
    sys = cfg0.plant()
    assert np.allclose(experiment.state_gain(cfg0, sys),
                       state_gain_oracle(sys, np.eye(2), [[1e-2]]))

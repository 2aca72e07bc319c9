import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stvs.errors import ValidationError
from stvs.scenario import (BUNDLED, load_bundled, load_scenario, scenario_from_dict, synthetic_grid,
                           write_scenario)
from stvs.tuning import read_tunings, write_tunings


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_parse_and_round_trip(name, tmp_path):
    sc = load_bundled(name)
    back = load_scenario(write_scenario(sc, tmp_path / "s.scn"))
    assert back == sc


def test_two_device_topology(two_device):
    assert [d.kind for d in two_device.devices] == ["gfm", "gfl"]
    assert len(two_device.loads) == 1
    assert two_device.monitored_buses == (3,)
    assert all(d.i_max == 1.2 for d in two_device.devices)


def test_ieee14_devices(ieee14):
    assert sorted(d.bus for d in ieee14.gfm_devices) == [1, 3, 6]
    assert sorted(d.bus for d in ieee14.gfl_devices) == [2, 8]
    assert len(ieee14.buses) == 14 and len(ieee14.lines) == 20
    assert len(ieee14.faults) >= 5


def test_dispatch_converges(ieee14):
    disp = ieee14.dispatch
    assert disp.mismatch <= 1e-10
    for d in ieee14.gfl_devices:
        assert disp.power[d.name].real == pytest.approx(d.p_sp, abs=1e-9)


def test_empty_file_is_schema_error(tmp_path):
    p = tmp_path / "empty.scn"
    p.write_text("")
    with pytest.raises(ValidationError, match="schema_version"):
        load_scenario(p)


def test_schema_version_mismatch(two_device):
    data = two_device.to_dict()
    data["schema_version"] = 7
    with pytest.raises(ValidationError, match="schema_version"):
        scenario_from_dict(data)


def test_fault_at_unknown_bus_names_entry(two_device):
    data = two_device.to_dict()
    data["faults"][0]["bus"] = 99
    with pytest.raises(ValidationError) as exc:
        scenario_from_dict(data)
    assert any(path.startswith("faults[0]") and "F3" in msg for path, msg in exc.value.issues)


def test_dangling_line_and_bad_reactance(two_device):
    data = two_device.to_dict()
    data["lines"][0]["to"] = 42
    data["lines"][1]["x"] = -0.1
    with pytest.raises(ValidationError) as exc:
        scenario_from_dict(data)
    paths = [p for p, _ in exc.value.issues]
    assert "lines[0]" in paths and "lines[1].x" in paths


def test_unknown_field_rejected(two_device):
    data = two_device.to_dict()
    data["gfm"][0]["colour"] = "red"
    with pytest.raises(ValidationError, match="unknown field"):
        scenario_from_dict(data)


def test_tuning_file_round_trip_and_bounds(two_device, two_device_opt, tmp_path):
    tun = two_device_opt.tunings
    back = read_tunings(write_tunings(tun, tmp_path / "t.scn"))
    assert back.virtual == tun.virtual and back.presets == tun.presets
    back.validate_against(two_device)
    back.virtual["GFM1"] = 5.0
    with pytest.raises(ValidationError, match="outside"):
        back.validate_against(two_device)


@settings(max_examples=15)
@given(st.integers(10, 40), st.integers(0, 1000))
def test_synthetic_round_trip(n_bus, seed):
    sc = synthetic_grid(n_bus=n_bus, n_gfm=2, n_gfl=2, n_faults=2, seed=seed)
    data = sc.to_dict()
    back = scenario_from_dict(data)
    assert back == sc
    np.testing.assert_allclose(np.asarray(back.network.y), np.asarray(sc.network.y))


def test_synthetic_is_deterministic():
    assert synthetic_grid(seed=3) == synthetic_grid(seed=3)
    assert synthetic_grid(seed=3) != synthetic_grid(seed=4)

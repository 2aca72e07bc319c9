import cmath
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stvs import critmoments as cm
from stvs import devices as dv
from stvs.errors import ValidationError
from stvs.netmodel import Bus, FaultSpec, Line, LoadZ
from stvs.scenario import GridScenario
from stvs.simulator import baseline_tunings


class _Dispatch:
    def __init__(self, v, cur):
        self.v, self.current = v, cur

    def bus_voltage(self, bus):
        return self.v[bus]


def _state(v, i, moment=cm.MomentTag.TAU1, buses=(1,), names=("D",)):
    return cm.CriticalMomentState(moment, "F", buses, np.asarray(v, dtype=complex), names,
                                  np.asarray(i, dtype=complex), np.zeros(len(names), dtype=complex), 0.0)


def _tunings_strategy(scenario):
    return st.fixed_dictionaries({d.name: (st.floats(0.05, 1.0) if d.kind == "gfm" else st.floats(0.0, 20.0))
                                  for d in scenario.devices})


def test_backsolve_limits_and_values():
    gfm = dv.GfmDevice("M", 1)
    gfl = dv.GflDevice("L", 2, p_sp=1.0)
    disp = _Dispatch({1: 1.0 + 0.1j, 2: 1 + 0j}, {"M": 0.5 - 0.2j, "L": 1 + 0j})
    src = cm.backsolve_internal_sources(disp, [gfm, gfl], {"M": 1e-12, "L": 0.5})
    assert src.e0["M"] == pytest.approx(1.0 + 0.1j, abs=1e-11)
    assert src.i0["L"] == pytest.approx(1 - 0.5j)
    src = cm.backsolve_internal_sources(disp, [gfm, gfl], {"M": 0.3, "L": 0.0})
    assert src.i0["L"] == 1 + 0j


def _divider_scenario(x_line=0.1):
    return GridScenario(name="div", buses=(Bus(1), Bus(2, is_monitored=True)), lines=(Line(1, 2, 0.0, x_line),),
                        loads=(LoadZ(2, 1.0, 0.0),), gfm_devices=(dv.GfmDevice("M", 1, slack=True),),
                        faults=(FaultSpec("F2", 2, 0.0, 0.01),))


def test_fault_divider_oracle():
    sc = _divider_scenario()
    src = cm.InternalSources(e0={"M": 1 + 0j}, i0={}, delta0={"M": 0.0}, theta_pll0={})
    st_ = cm.eval_moment(sc, sc.faults[0], {"M": 0.1}, src, None, cm.MomentTag.TAU1)
    zp = 1.0 / (1.0 + 1.0 / 0.01j)
    want = zp / (zp + 1j * (0.1 + 0.1))
    assert st_.bus_v(2) == pytest.approx(want, abs=1e-12)
    assert st_.residual <= 1e-10
    np.testing.assert_allclose(st_.v_mag ** 2, st_.v_x ** 2 + st_.v_y ** 2, atol=1e-15)


def test_presets_required_after_inception(two_device):
    src = cm.backsolve_internal_sources(two_device.dispatch, two_device.devices, baseline_tunings(two_device))
    with pytest.raises(ValidationError):
        cm.eval_moment(two_device, two_device.faults[0], baseline_tunings(two_device), src, None,
                       cm.MomentTag.TAU2)


def test_optimized_tuning_lifts_fault_instant_voltage(two_device, two_device_opt):
    tun = baseline_tunings(two_device)
    src = cm.backsolve_internal_sources(two_device.dispatch, two_device.devices, tun)
    f = two_device.faults[0]
    base = cm.eval_moment(two_device, f, tun, src, None, cm.MomentTag.TAU1)
    opt = two_device_opt.tunings
    osrc = cm.backsolve_internal_sources(two_device.dispatch, two_device.devices, opt.virtual)
    best = cm.eval_moment(two_device, f, opt.virtual, osrc, None, cm.MomentTag.TAU1)
    assert abs(best.bus_v(3)) > abs(base.bus_v(3))


def test_security_examples():
    lim = dv.SecurityLimits()
    dev = [dv.GfmDevice("D", 1)]
    assert cm.check_security([_state([1.0], [0.0])], dev, lim).secure
    assert cm.check_security([_state([1.0], [1.2])], dev, lim).secure
    rep = cm.check_security([_state([0.179], [0.5])], dev, lim)
    assert [v.kind for v in rep.violations] == ["lvrt"]
    assert rep.violations[0].margin < 0
    with pytest.raises(ValidationError):
        cm.check_security([], dev, lim)


def test_mode_consistency_checks_each_moment():
    frt = dv.FrtThresholds()
    dev = [dv.GfmDevice("D", 1)]
    ok = [_state([0.5], [0], cm.MomentTag.TAU1), _state([0.5], [0], cm.MomentTag.TAU2),
          _state([0.95], [0], cm.MomentTag.TAU3)]
    assert cm.check_mode_consistency(ok, dev, frt, 0.05).secure
    bad = [_state([0.78], [0], cm.MomentTag.TAU1), _state([0.5], [0], cm.MomentTag.TAU2),
           _state([0.88], [0], cm.MomentTag.TAU3)]
    rep = cm.check_mode_consistency(bad, dev, frt, 0.05)
    assert [v.moment for v in rep.violations] == [cm.MomentTag.TAU1, cm.MomentTag.TAU3]


def test_error_report_examples(two_device):
    tun = baseline_tunings(two_device)
    src = cm.backsolve_internal_sources(two_device.dispatch, two_device.devices, tun)
    states = cm.eval_all_moments(two_device, two_device.faults[0], tun, src,
                                 {d.name: src.source(d.name) for d in two_device.devices})
    same = {st_.moment: st_.v for st_ in states}
    rep = cm.moment_error_report({"F3": states}, {"F3": same})
    assert all(r.max_error <= 1e-15 for r in rep.rows)
    flat = [_state(np.ones(3), [0], m, (1, 2, 3)) for m in cm.MOMENTS]
    off = {m: np.full(3, 1.001) for m in cm.MOMENTS}
    rep = cm.moment_error_report({"F": flat}, {"F": off})
    assert [r.max_error for r in rep.rows] == pytest.approx([1e-3] * 3, abs=1e-12)
    assert set(rep.summary()) == {"TAU1", "TAU2", "TAU3"}
    with pytest.raises(ValidationError):
        cm.moment_error_report({"F": flat}, {"F": {cm.MomentTag.TAU1: np.ones(3)}})


@pytest.mark.parametrize("name", ["two_device", "ieee14"])
def test_intact_network_reproduces_dispatch(name, request):
    sc = request.getfixturevalue(name)
    tun = {d.name: (0.3 if d.kind == "gfm" else 2.0) for d in sc.devices}
    src = cm.backsolve_internal_sources(sc.dispatch, sc.devices, tun)
    st_ = cm.eval_moment(sc, None, tun, src, None, cm.MomentTag.TAU1)
    np.testing.assert_allclose(st_.v, sc.dispatch.v, atol=1e-10)
    want = np.array([sc.dispatch.current[d.name] for d in sc.devices])
    np.testing.assert_allclose(st_.i, want, atol=1e-10)


@given(st.data())
def test_backsolve_round_trip_random_tunings(ieee14, data):
    tun = data.draw(_tunings_strategy(ieee14))
    src = cm.backsolve_internal_sources(ieee14.dispatch, ieee14.devices, tun)
    st_ = cm.eval_moment(ieee14, None, tun, src, None, cm.MomentTag.TAU1)
    np.testing.assert_allclose(st_.v, ieee14.dispatch.v, atol=1e-10)


@given(st.data(), st.floats(0.1, 3.0), st.floats(-np.pi, np.pi),
       st.sampled_from([cm.MomentTag.TAU2, cm.MomentTag.TAU3]))
def test_homogeneous_in_sources(two_device, data, mag, ang, moment):
    tun = data.draw(_tunings_strategy(two_device))
    src = cm.backsolve_internal_sources(two_device.dispatch, two_device.devices, tun)
    pre = {d.name: src.source(d.name) for d in two_device.devices}
    k = mag * cmath.exp(1j * ang)
    f = two_device.faults[0]
    a = cm.eval_moment(two_device, f, tun, src, pre, moment)
    b = cm.eval_moment(two_device, f, tun, src, {n: k * p for n, p in pre.items()}, moment)
    np.testing.assert_allclose(b.v, k * a.v, atol=1e-11)
    np.testing.assert_allclose(b.i, k * a.i, atol=1e-11)


@given(st.lists(st.floats(0.0, 1.5), min_size=1, max_size=5), st.lists(st.floats(0.0, 2.0), min_size=5, max_size=5),
       st.floats(0.05, 0.6), st.floats(1.05, 1.5), st.floats(0.0, 0.2), st.floats(0.0, 0.2))
def test_security_monotone_under_tightening(volts, currents, lv, hv, d_lv, d_hv):
    devs = [dv.GfmDevice(f"D{k}", k + 1, i_max=1.2) for k in range(len(volts))]
    st_ = _state(volts, currents[:len(volts)], buses=tuple(range(1, len(volts) + 1)),
                 names=tuple(d.name for d in devs))
    loose = cm.check_security([st_], devs, dv.SecurityLimits(lv, hv))
    tight_devs = [replace(d, i_max=1.0) for d in devs]
    tight = cm.check_security([st_], tight_devs, dv.SecurityLimits(min(lv + d_lv, 0.99), max(hv - d_hv, 1.01)))
    key = {(v.subject, v.kind) for v in loose.violations}
    assert key <= {(v.subject, v.kind) for v in tight.violations}


def test_tau2_matches_settled_simulation(two_device, two_device_opt, two_device_proposed):
    tun = two_device_opt.tunings
    f = two_device.faults[0]
    src = cm.backsolve_internal_sources(two_device.dispatch, two_device.devices, tun.virtual)
    tau2 = cm.eval_moment(two_device, f, tun.virtual, src, tun.presets_for(f.id), cm.MomentTag.TAU2)
    traj = two_device_proposed.trajectory
    window = (traj.t >= f.t_clear - 0.01) & (traj.t < f.t_clear - 1e-12)
    err = np.abs(np.abs(traj.v[window]) - tau2.v_mag).max()
    assert err <= 1e-3

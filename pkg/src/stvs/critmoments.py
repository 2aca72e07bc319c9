"""Algebraic evaluation of the grid at the three critical fault moments.

* ``TAU1`` fault inception: faulted network, pre-fault internal sources.
* ``TAU2`` fault steady state: faulted network, frozen preset references.
* ``TAU3`` fault clearance: pre-fault network, the same frozen presets.

Every evaluation is a single linear solve of the augmented nodal equations.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import devices as dv
from .errors import ValidationError
from .netmodel import aggregate_devices, apply_fault, solve_network


class MomentTag(enum.Enum):
    TAU1 = 1
    TAU2 = 2
    TAU3 = 3

    @property
    def faulted(self) -> bool:
        return self is not MomentTag.TAU3


MOMENTS = (MomentTag.TAU1, MomentTag.TAU2, MomentTag.TAU3)


@dataclass(frozen=True)
class InternalSources:
    """Pre-fault internal phasors consistent with the dispatch and the tunings."""

    e0: dict                # GFM name -> internal voltage E0
    i0: dict                # GFL name -> internal current I'0
    delta0: dict            # GFM name -> angle of E0
    theta_pll0: dict        # GFL name -> pre-fault PLL angle (terminal voltage angle)
    dq: dict = field(default_factory=dict)   # name -> dq projection of the source

    def source(self, name: str) -> complex:
        return self.e0[name] if name in self.e0 else self.i0[name]


def backsolve_internal_sources(dispatch, devices: Sequence, tunings: Mapping[str, float]) -> InternalSources:
    e0, i0, delta0, theta0, dq = {}, {}, {}, {}, {}
    issues = []
    for d in devices:
        if d.name not in dispatch.current:
            issues.append((f"devices.{d.name}", "no dispatch for device bus"))
            continue
        v = dispatch.bus_voltage(d.bus)
        i = dispatch.current[d.name]
        val = tunings[d.name]
        if d.kind == "gfm":
            e = v + 1j * val * i
            e0[d.name] = e
            delta0[d.name] = math.atan2(e.imag, e.real)
            dq[d.name] = dv.xy_to_dq(e, delta0[d.name])
        else:
            ip = dv.gfl_internal_from_terminal(i, v, val)
            i0[d.name] = ip
            theta0[d.name] = math.atan2(v.imag, v.real)
            dq[d.name] = dv.xy_to_dq(ip, theta0[d.name])
    if issues:
        raise ValidationError(issues)
    return InternalSources(e0=e0, i0=i0, delta0=delta0, theta_pll0=theta0, dq=dq)


@dataclass(frozen=True)
class CriticalMomentState:
    moment: MomentTag
    fault_id: str | None
    bus_ids: tuple
    v: np.ndarray
    device_names: tuple
    i: np.ndarray
    sources: np.ndarray
    residual: float

    @property
    def v_x(self):
        return self.v.real

    @property
    def v_y(self):
        return self.v.imag

    @property
    def v_mag(self):
        return np.sqrt(self.v.real ** 2 + self.v.imag ** 2)

    @property
    def theta(self):
        return np.arctan2(self.v.imag, self.v.real)

    @property
    def i_mag(self):
        return np.sqrt(self.i.real ** 2 + self.i.imag ** 2)

    def bus_v(self, bus: int) -> complex:
        return complex(self.v[self.bus_ids.index(bus)])


def device_nortons(devices: Sequence, tunings: Mapping[str, float], sources: Mapping[str, complex]):
    out = []
    for d in devices:
        if d.kind == "gfm":
            out.append(dv.gfm_norton(d.bus, sources[d.name], tunings[d.name]))
        else:
            out.append(dv.gfl_norton(d.bus, sources[d.name], tunings[d.name]))
    return out


def eval_moment(scenario, fault, tunings: Mapping[str, float], sources: InternalSources,
                presets: Mapping[str, complex] | None, moment: MomentTag) -> CriticalMomentState:
    """Solve the network at ``moment``; ``fault=None`` evaluates the intact grid."""
    devs = scenario.devices
    net = scenario.network
    if fault is not None and moment.faulted:
        net = apply_fault(net, fault)
    if moment is MomentTag.TAU1:
        src = {d.name: sources.source(d.name) for d in devs}
    else:
        if presets is None:
            raise ValidationError([("presets", f"{moment.name} needs frozen presets")])
        src = {d.name: complex(presets[d.name]) for d in devs}
    nortons = device_nortons(devs, tunings, src)
    sol = solve_network(aggregate_devices(net, nortons))
    return CriticalMomentState(
        moment=moment,
        fault_id=None if fault is None else fault.id,
        bus_ids=net.bus_ids,
        v=sol.v,
        device_names=tuple(d.name for d in devs),
        i=sol.device_currents,
        sources=np.array([src[d.name] for d in devs], dtype=complex),
        residual=sol.residual,
    )


def eval_all_moments(scenario, fault, tunings, sources, presets):
    return [eval_moment(scenario, fault, tunings, sources, presets, m) for m in MOMENTS]


# --------------------------------------------------------------------------
# security
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    moment: MomentTag
    fault_id: str | None
    subject: str
    kind: str            # "overcurrent" | "lvrt" | "hvrt" | "mode"
    value: float
    limit: float

    @property
    def margin(self) -> float:
        """Signed distance to the limit; negative means violated."""
        if self.kind in ("overcurrent", "hvrt", "mode"):
            return self.limit - self.value
        return self.value - self.limit


@dataclass
class SecurityReport:
    violations: list
    max_violation: float

    @property
    def secure(self) -> bool:
        return not self.violations


def check_security(states: Sequence[CriticalMomentState], devices: Sequence, limits: dv.SecurityLimits,
                   rel_tol: float = 1e-9) -> SecurityReport:
    if not states:
        raise ValidationError([("states", "at least one moment state is required")])
    out = []
    worst = 0.0
    dev_buses = sorted({d.bus for d in devices})
    for st in states:
        for k, d in enumerate(devices):
            mag = float(st.i_mag[st.device_names.index(d.name)])
            worst = max(worst, mag * mag - d.i_max * d.i_max)
            if mag > d.i_max * (1 + rel_tol):
                out.append(Violation(st.moment, st.fault_id, d.name, "overcurrent", mag, d.i_max))
        for bus in dev_buses:
            mag = abs(st.bus_v(bus))
            worst = max(worst, limits.v_lvrt_th ** 2 - mag * mag, mag * mag - limits.v_hvrt_th ** 2)
            if mag < limits.v_lvrt_th * (1 - rel_tol):
                out.append(Violation(st.moment, st.fault_id, f"bus{bus}", "lvrt", mag, limits.v_lvrt_th))
            elif mag > limits.v_hvrt_th * (1 + rel_tol):
                out.append(Violation(st.moment, st.fault_id, f"bus{bus}", "hvrt", mag, limits.v_hvrt_th))
    return SecurityReport(violations=out, max_violation=max(worst, 0.0))


def check_mode_consistency(states: Sequence[CriticalMomentState], devices: Sequence,
                           frt: dv.FrtThresholds, margin: float) -> SecurityReport:
    """Device terminal voltages must be low enough to enter FRT (TAU1) and stay in it
    (TAU2), and high enough after clearance (TAU3) to leave it."""
    out = []
    worst = 0.0
    dev_buses = sorted({d.bus for d in devices})
    for st in states:
        for bus in dev_buses:
            mag = abs(st.bus_v(bus))
            if st.moment is MomentTag.TAU3:
                floor = frt.v_exit + margin
                gap = floor * floor - mag * mag
                bad = mag < floor * (1 - 1e-9)
                limit = floor
            else:
                cap = (frt.v_enter if st.moment is MomentTag.TAU1 else frt.v_exit) - margin
                gap = mag * mag - cap * cap
                bad = mag > cap * (1 + 1e-9)
                limit = cap
            worst = max(worst, gap)
            if bad:
                out.append(Violation(st.moment, st.fault_id, f"bus{bus}", "mode", mag, limit))
    return SecurityReport(violations=out, max_violation=max(worst, 0.0))


def moment_objective(states: Sequence[CriticalMomentState], monitored: Sequence[int],
                     v_ref: Mapping[int, float], weights: Sequence[float]) -> float:
    total = 0.0
    for st in states:
        w = weights[st.moment.value - 1]
        for bus in monitored:
            total += w * abs(v_ref[bus] - abs(st.bus_v(bus)))
    return total


# --------------------------------------------------------------------------
# analytic vs. simulated errors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorRow:
    fault_id: str
    moment: MomentTag
    max_error: float
    mean_error: float


@dataclass
class ErrorReport:
    rows: list

    def summary(self) -> dict:
        """Per-moment max and mean absolute voltage error across faults and buses."""
        out = {}
        for m in MOMENTS:
            rs = [r for r in self.rows if r.moment is m]
            if rs:
                out[m.name] = {"max": max(r.max_error for r in rs),
                               "mean": float(np.mean([r.mean_error for r in rs]))}
        return out


def moment_error_report(analytic: Mapping[str, Sequence[CriticalMomentState]],
                        samples: Mapping[str, Mapping[MomentTag, np.ndarray]]) -> ErrorReport:
    """Compare analytic moment voltages with sampled trajectory voltages.

    ``samples[fault_id][moment]`` holds the complex bus voltages (or magnitudes)
    taken from a trajectory at the moment's sampling instant.
    """
    rows = []
    for fid, states in analytic.items():
        if fid not in samples:
            raise ValidationError([(f"trajectory.{fid}", "no trajectory for fault")])
        got = samples[fid]
        for st in states:
            if st.moment not in got or got[st.moment] is None:
                raise ValidationError([(f"trajectory.{fid}", f"trajectory lacks the {st.moment.name} window")])
            err = np.abs(st.v_mag - np.abs(np.asarray(got[st.moment])))
            rows.append(ErrorRow(fid, st.moment, float(err.max()), float(err.mean())))
    return ErrorReport(rows=rows)

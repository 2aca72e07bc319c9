"""Phasor (quasi-static RMS) time-domain simulation of a fault event.

This is a fidelity reduction with respect to an electromagnetic-transient
study: the network is algebraic at every instant, and only controller states
(droop, PLL, PI integrators, measurement filters, source-tracking lags)
evolve in time.

Hybrid step order at ``t_k = k * dt``:

1. select the network (faulted when ``t_fault <= t_k < t_clear``);
2. solve the network with the device Norton sources given by the states,
   applying the current limiter;
3. record the sample (and moment samples: TAU1 at the first step at or after
   ``t_fault``, TAU2 at the last step before ``t_clear``, TAU3 at the first
   step at or after ``t_clear``);
4. update every device's control mode from its filtered voltage;
5. integrate the states to ``t_{k+1}`` with modes and network held fixed.
"""

from __future__ import annotations

import cmath
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import devices as dv
from .critmoments import MomentTag, backsolve_internal_sources, device_nortons
from .errors import SimulationAborted, ValidationError
from .netmodel import FactorizedNetwork, aggregate_devices, apply_fault

logger = logging.getLogger(__name__)

RK4 = "rk4"
TRAPEZOIDAL = "trapezoidal"
PROPOSED = "proposed"
BASELINE = "baseline"
LIMIT_REL_TOL = 1e-6


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-4
    t_end: float = 0.9
    integration: str = RK4
    detection_tau: float = 0.02
    record_decimation: int = 1

    def validate(self, path="sim", fault=None):
        issues = []
        if not self.dt > 0:
            issues.append((f"{path}.dt", "must be positive"))
        if self.integration not in (RK4, TRAPEZOIDAL):
            issues.append((f"{path}.integration", "rk4 or trapezoidal"))
        if not self.detection_tau > 0:
            issues.append((f"{path}.detection_tau", "must be positive"))
        if self.record_decimation < 1:
            issues.append((f"{path}.record_decimation", "must be >= 1"))
        if fault is not None and not self.t_end > fault.t_clear + 0.5:
            issues.append((f"{path}.t_end", f"must exceed fault clearance + 0.5 s ({fault.t_clear + 0.5})"))
        return issues


@dataclass(frozen=True)
class Event:
    time: float
    kind: str            # FAULT_ON | FAULT_CLEAR | MODE_SWITCH | CURRENT_LIMIT | DISCONNECT_RISK
    subject: str
    detail: str = ""


@dataclass
class Trajectory:
    t: np.ndarray
    bus_ids: tuple
    device_names: tuple
    v: np.ndarray          # (samples, buses) complex
    i: np.ndarray          # (samples, devices) complex
    p: np.ndarray
    q: np.ndarray
    mode: np.ndarray       # (samples, devices) int
    ref: np.ndarray        # (samples, devices) internal source magnitude
    device_buses: tuple
    fault_id: str | None = None
    moments: dict = field(default_factory=dict)    # MomentTag -> complex bus voltages
    moment_times: dict = field(default_factory=dict)
    moment_currents: dict = field(default_factory=dict)

    @property
    def v_mag(self):
        return np.abs(self.v)

    @property
    def i_mag(self):
        return np.abs(self.i)

    def terminal_v_mag(self):
        idx = {b: k for k, b in enumerate(self.bus_ids)}
        return self.v_mag[:, [idx[b] for b in self.device_buses]]

    def write_csv(self, path) -> Path:
        path = Path(path)
        header = ["t"] + [f"vmag_{b}" for b in self.bus_ids]
        for n in self.device_names:
            header += [f"imag_{n}", f"p_{n}", f"q_{n}", f"mode_{n}"]
        vm = self.v_mag
        im = self.i_mag
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k in range(len(self.t)):
                row = [repr(float(self.t[k]))] + [repr(float(x)) for x in vm[k]]
                for j in range(len(self.device_names)):
                    row += [repr(float(im[k, j])), repr(float(self.p[k, j])), repr(float(self.q[k, j])),
                            str(int(self.mode[k, j]))]
                w.writerow(row)
        return path


@dataclass
class SimResult:
    trajectory: Trajectory
    events: list
    steps: int


# --------------------------------------------------------------------------
# integration
# --------------------------------------------------------------------------


def integrate_step(deriv, x: np.ndarray, dt: float, method: str = RK4) -> np.ndarray:
    """Advance ``x' = deriv(x)`` by one step; ``deriv`` closes over the algebraic solve."""
    if method == RK4:
        k1 = deriv(x)
        k2 = deriv(x + 0.5 * dt * k1)
        k3 = deriv(x + 0.5 * dt * k2)
        k4 = deriv(x + dt * k3)
        out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    elif method == TRAPEZOIDAL:
        f0 = deriv(x)
        out = x + dt * f0
        for _ in range(30):
            nxt = x + 0.5 * dt * (f0 + deriv(out))
            done = np.max(np.abs(nxt - out), initial=0.0) <= 1e-13 * (1.0 + np.max(np.abs(nxt), initial=0.0))
            out = nxt
            if done:
                break
    else:
        raise ValidationError([("sim.integration", f"unknown method {method}")])
    if not np.all(np.isfinite(out)):
        raise SimulationAborted("non-finite state after integration step", snapshot=x.copy())
    return out


# --------------------------------------------------------------------------
# events and assessment
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    t: float
    faulted: bool
    modes: tuple
    limited: tuple
    v_term: tuple
    names: tuple


def detect_events(prev: Sample, curr: Sample, limits: dv.SecurityLimits | None = None) -> list:
    out = []
    if curr.faulted and not prev.faulted:
        out.append(Event(curr.t, "FAULT_ON", "network", "fault overlay applied"))
    if prev.faulted and not curr.faulted:
        out.append(Event(curr.t, "FAULT_CLEAR", "network", "pre-fault network restored"))
    for k, name in enumerate(curr.names):
        if curr.modes[k] != prev.modes[k]:
            out.append(Event(curr.t, "MODE_SWITCH", name,
                             f"{dv.Mode(prev.modes[k]).name}->{dv.Mode(curr.modes[k]).name}"))
        if curr.limited[k] and not prev.limited[k]:
            out.append(Event(curr.t, "CURRENT_LIMIT", name, "current limiter engaged"))
        if limits is not None:
            was = not (limits.v_lvrt_th <= prev.v_term[k] <= limits.v_hvrt_th)
            now = not (limits.v_lvrt_th <= curr.v_term[k] <= limits.v_hvrt_th)
            if now and not was:
                out.append(Event(curr.t, "DISCONNECT_RISK", name,
                                 f"terminal voltage {curr.v_term[k]:.4f} outside ride-through band"))
    return out


@dataclass
class RideThroughVerdict:
    device: str
    intervals: list            # (kind, t_start, t_end, extreme value)
    marginal: list
    verdict: str               # secure | marginal | at_risk

    @property
    def total_duration(self) -> float:
        return sum(b - a for _, a, b, _ in self.intervals)


def _runs(mask):
    """Start/stop index pairs of consecutive True values."""
    edges = np.diff(np.r_[0, mask.astype(np.int8), 0])
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def ride_through_assessment(traj: Trajectory, limits: dv.SecurityLimits, marginal_band: float = 0.02,
                            min_steps: int = 1) -> dict:
    vt = traj.terminal_v_mag()
    dt = float(traj.t[1] - traj.t[0]) if len(traj.t) > 1 else 0.0
    out = {}
    for k, name in enumerate(traj.device_names):
        col = vt[:, k]
        intervals, marginal = [], []
        for kind, mask in (("lvrt", col < limits.v_lvrt_th), ("hvrt", col > limits.v_hvrt_th)):
            for a, b in _runs(mask):
                if b - a >= min_steps:
                    seg = col[a:b]
                    ext = float(seg.min() if kind == "lvrt" else seg.max())
                    intervals.append((kind, float(traj.t[a]), float(traj.t[b - 1]) + dt, ext))
        near = ((col >= limits.v_lvrt_th) & (col < limits.v_lvrt_th + marginal_band)) | \
               ((col <= limits.v_hvrt_th) & (col > limits.v_hvrt_th - marginal_band))
        for a, b in _runs(near):
            marginal.append((float(traj.t[a]), float(traj.t[b - 1]) + dt))
        verdict = "at_risk" if intervals else ("marginal" if marginal else "secure")
        out[name] = RideThroughVerdict(name, intervals, marginal, verdict)
    return out


# --------------------------------------------------------------------------
# simulation context
# --------------------------------------------------------------------------


class _Context:
    """Mutable state of one run; never shared between runs."""

    def __init__(self, scenario, tunings, presets, fault, cfg: SimConfig, control: str):
        self.sc = scenario
        self.cfg = cfg
        self.control = control
        self.frt = scenario.frt
        self.devs = list(scenario.devices)
        self.names = tuple(d.name for d in self.devs)
        self.tun = dict(tunings)
        net = scenario.network
        self.bus_ids = net.bus_ids
        idx = net.bus_index
        self.rows = np.array([idx[d.bus] for d in self.devs], dtype=int)
        self.n_bus = net.n_bus
        disp = scenario.dispatch
        self.src0 = backsolve_internal_sources(disp, self.devs, self.tun)
        nortons = device_nortons(self.devs, self.tun, {d.name: self.src0.source(d.name) for d in self.devs})
        self.shunts = np.array([nt.shunt for nt in nortons], dtype=complex)
        self.factor_pre = FactorizedNetwork(aggregate_devices(net, nortons).y_aug, net.bus_ids)
        self.factor_fault = None
        if fault is not None:
            fnet = apply_fault(net, fault)
            self.factor_fault = FactorizedNetwork(aggregate_devices(fnet, nortons).y_aug, net.bus_ids)
        self.is_gfm = np.array([d.kind == "gfm" for d in self.devs])
        self.x_virtual = np.array([self.tun[d.name] if d.kind == "gfm" else 0.0 for d in self.devs])
        self.i_max = np.array([d.i_max for d in self.devs])

        # setpoints re-derived from the converged dispatch so the initial point is an equilibrium
        self.p0 = np.array([disp.power[d.name].real for d in self.devs])
        self.q0 = np.array([disp.power[d.name].imag for d in self.devs])
        self.e0 = {}
        self.presets = {}
        for d in self.devs:
            if d.kind == "gfm":
                self.e0[d.name] = abs(self.src0.e0[d.name])
            if presets is not None:
                self.presets[d.name] = complex(presets[d.name])
            else:
                self.presets[d.name] = self.src0.source(d.name)
        self.theta_ref = {**self.src0.delta0, **self.src0.theta_pll0}

        # state layout
        self.offsets = []
        n = 0
        for d in self.devs:
            self.offsets.append(n)
            n += 5 if d.kind == "gfm" else 9
        self.n_state = n
        self.modes = [dv.ControlMode() for _ in self.devs]

    # ---- states ----------------------------------------------------------

    def initial_state(self) -> np.ndarray:
        x = np.zeros(self.n_state)
        disp = self.sc.dispatch
        for k, d in enumerate(self.devs):
            o = self.offsets[k]
            vmag = abs(disp.bus_voltage(d.bus))
            if d.kind == "gfm":
                e = self.src0.e0[d.name]
                x[o:o + 5] = [cmath.phase(e), abs(e), self.p0[k], self.q0[k], vmag]
            else:
                ip = self.src0.i0[d.name]
                th = self.src0.theta_pll0[d.name]
                idq = dv.xy_to_dq(ip, th)
                x[o:o + 9] = [ip.real, ip.imag, idq.real, -idq.imag, th, 0.0, self.p0[k], self.q0[k], vmag]
        return x

    def sources(self, x: np.ndarray) -> np.ndarray:
        j = np.empty(len(self.devs), dtype=complex)
        for k, d in enumerate(self.devs):
            o = self.offsets[k]
            if d.kind == "gfm":
                e = x[o + 1] * cmath.exp(1j * x[o])
                j[k] = e / (1j * self.x_virtual[k])
            else:
                j[k] = complex(x[o], x[o + 1])
        return j

    def solve(self, x: np.ndarray, factor: FactorizedNetwork):
        src = self.sources(x)
        scale = np.ones(len(self.devs))
        limited = np.zeros(len(self.devs), dtype=bool)
        for _ in range(20):
            j = src * scale
            inj = np.bincount(self.rows, weights=j.real, minlength=self.n_bus) + \
                1j * np.bincount(self.rows, weights=j.imag, minlength=self.n_bus)
            v = factor.solve(inj)
            cur = j - self.shunts * v[self.rows]
            mag = np.abs(cur)
            over = mag > self.i_max * (1.0 + LIMIT_REL_TOL)
            if not over.any():
                break
            limited |= over
            scale[over] *= self.i_max[over] / mag[over]
        return v, cur, limited

    # ---- dynamics --------------------------------------------------------

    def deriv(self, x, t, factor):
        v, cur, _ = self.solve(x, factor)
        dx = np.zeros_like(x)
        tau_det = self.cfg.detection_tau
        frt = self.frt
        for k, d in enumerate(self.devs):
            o = self.offsets[k]
            vt = v[self.rows[k]]
            s = vt * cur[k].conjugate()
            mode = self.modes[k]
            if d.kind == "gfm":
                delta, e, p_f, q_f, v_f = x[o:o + 5]
                st = mode.state
                if st is dv.Mode.NORMAL:
                    dd = dv.OMEGA_NOM * d.m_p * (self.p0[k] - p_f)
                    de = (self.e0[d.name] + d.n_q * (self.q0[k] - q_f) - e) / d.tau_v
                elif st is dv.Mode.FRT:
                    if self.control == PROPOSED:
                        pre = self.presets[d.name]
                        dd = dv.wrap_angle(cmath.phase(pre) - delta) / d.track_tau
                        de = (abs(pre) - e) / d.track_tau
                    else:
                        dd = de = 0.0
                else:
                    snap = mode.snapshot
                    e_ref = dv.recovery_reference(snap["e_frozen"], snap["e_prefreeze"],
                                                  t - mode.entered_at, frt.tau_rec)
                    de = (e_ref - e) / d.track_tau
                    # power-synchronizing droop re-locks the angle to the grid
                    dd = dv.OMEGA_NOM * d.m_p * (self.p0[k] - p_f)
                dx[o:o + 5] = [dd, de, (s.real - p_f) / tau_det, (s.imag - q_f) / tau_det,
                               (abs(vt) - v_f) / tau_det]
            else:
                ix, iy, xi_p, xi_q, th, xi_pll, p_f, q_f, v_f = x[o:o + 9]
                v_q = (vt * cmath.exp(-1j * th)).imag
                st = mode.state
                d_xi_p = d_xi_q = 0.0
                d_th = d.pll_kp * v_q + xi_pll
                d_xi_pll = d.pll_ki * v_q
                if st is dv.Mode.NORMAL:
                    ost = dv.GflOuterState(xi_p, xi_q, th, xi_pll)
                    ref_dq = dv.gfl_outer_reference(d, ost, p_f, q_f)
                    der = dv.gfl_outer_derivatives(d, ost, p_f, q_f, v_q)
                    d_xi_p, d_xi_q = der.xi_p, der.xi_q
                elif st is dv.Mode.FRT:
                    if self.control == PROPOSED:
                        th_ref = self.theta_ref[d.name]
                        ref_dq = dv.xy_to_dq(self.presets[d.name], th_ref)
                        d_th = dv.wrap_angle(th_ref - th) / d.i_track_tau
                        d_xi_pll = 0.0
                    else:
                        i_d, i_r = dv.gfl_lvrt_baseline(v_f, d.k_q, d.i_max, mode.snapshot["ref_prefreeze"].real)
                        ref_dq = complex(i_d, -i_r)
                else:
                    snap = mode.snapshot
                    ref_dq = dv.recovery_reference(snap["ref_frozen"], snap["ref_prefreeze"],
                                                   t - mode.entered_at, frt.tau_rec)
                ref_xy = dv.dq_to_xy(ref_dq, th)
                dx[o:o + 9] = [(ref_xy.real - ix) / d.i_track_tau, (ref_xy.imag - iy) / d.i_track_tau,
                               d_xi_p, d_xi_q, d_th, d_xi_pll,
                               (s.real - p_f) / tau_det, (s.imag - q_f) / tau_det, (abs(vt) - v_f) / tau_det]
        return dx

    # ---- mode machine ----------------------------------------------------

    def gfl_reference_dq(self, k, x, t) -> complex:
        """The dq reference the device is currently tracking (used for snapshots)."""
        d = self.devs[k]
        o = self.offsets[k]
        mode = self.modes[k]
        p_f, q_f, v_f = x[o + 6:o + 9]
        if mode.state is dv.Mode.NORMAL:
            return dv.gfl_outer_reference(d, dv.GflOuterState(x[o + 2], x[o + 3], x[o + 4], x[o + 5]), p_f, q_f)
        if mode.state is dv.Mode.FRT:
            if self.control == PROPOSED:
                return dv.xy_to_dq(self.presets[d.name], self.theta_ref[d.name])
            i_d, i_r = dv.gfl_lvrt_baseline(v_f, d.k_q, d.i_max, mode.snapshot["ref_prefreeze"].real)
            return complex(i_d, -i_r)
        snap = mode.snapshot
        return dv.recovery_reference(snap["ref_frozen"], snap["ref_prefreeze"], t - mode.entered_at,
                                     self.frt.tau_rec)

    def update_modes(self, x, v, t):
        for k, d in enumerate(self.devs):
            o = self.offsets[k]
            mode = self.modes[k]
            v_f = x[o + 4] if d.kind == "gfm" else x[o + 8]
            gap = math.inf
            if mode.state is dv.Mode.RECOVERY:
                snap = mode.snapshot
                if d.kind == "gfm":
                    e_ref = dv.recovery_reference(snap["e_frozen"], snap["e_prefreeze"],
                                                  t - mode.entered_at, self.frt.tau_rec)
                    gap = abs(e_ref - snap["e_prefreeze"])
                else:
                    gap = abs(self.gfl_reference_dq(k, x, t) - snap["ref_prefreeze"])
            new = dv.frt_mode_step(mode, v_f, t, self.frt, gap)
            if new is mode:
                continue
            snap = dict(mode.snapshot)
            if new.state is dv.Mode.FRT and mode.state is dv.Mode.NORMAL:
                if d.kind == "gfm":
                    snap["e_prefreeze"] = x[o + 1]
                else:
                    snap["ref_prefreeze"] = self.gfl_reference_dq(k, x, t)
            elif new.state is dv.Mode.RECOVERY:
                if d.kind == "gfm":
                    snap["e_frozen"] = x[o + 1]
                else:
                    # relock the PLL on the PCC phase; the frozen reference is re-expressed
                    # in the new frame so the commanded xy current does not jump
                    ref_xy = dv.dq_to_xy(self.gfl_reference_dq(k, x, t), x[o + 4])
                    th_new = cmath.phase(v[self.rows[k]])
                    x[o + 4] = th_new + 2 * math.pi * round((x[o + 4] - th_new) / (2 * math.pi))
                    x[o + 5] = 0.0
                    snap["ref_frozen"] = dv.xy_to_dq(ref_xy, x[o + 4])
            self.modes[k] = dv.ControlMode(new.state, new.entered_at, new.cause, snap)


def _step_index(t: float, dt: float) -> int:
    return int(math.ceil(t / dt - 1e-9))


def run_simulation(scenario, tunings: dict, presets: dict | None, fault, config: SimConfig | None = None,
                   control: str = PROPOSED) -> SimResult:
    cfg = config or scenario.sim
    issues = cfg.validate(fault=fault)
    if control not in (PROPOSED, BASELINE):
        issues.append(("control", "proposed or baseline"))
    if issues:
        raise ValidationError(issues)
    ctx = _Context(scenario, tunings, presets, fault, cfg, control)
    dt = cfg.dt
    n_steps = _step_index(cfg.t_end, dt) + 1
    k_on = _step_index(fault.t_fault, dt) if fault is not None else None
    k_off = _step_index(fault.t_clear, dt) if fault is not None else None
    dec = cfg.record_decimation
    n_rec = (n_steps + dec - 1) // dec
    nd = len(ctx.devs)
    t_rec = np.empty(n_rec)
    v_rec = np.empty((n_rec, ctx.n_bus), dtype=complex)
    i_rec = np.empty((n_rec, nd), dtype=complex)
    p_rec = np.empty((n_rec, nd))
    q_rec = np.empty((n_rec, nd))
    m_rec = np.empty((n_rec, nd), dtype=np.int8)
    r_rec = np.empty((n_rec, nd))
    moments, moment_t, moment_i = {}, {}, {}
    events = []
    limits = scenario.limits
    x = ctx.initial_state()
    prev = None
    r = 0
    for k in range(n_steps):
        t = k * dt
        faulted = fault is not None and k_on <= k < k_off
        factor = ctx.factor_fault if faulted else ctx.factor_pre
        try:
            v, cur, limited = ctx.solve(x, factor)
        except Exception as exc:
            raise SimulationAborted(f"network solve failed at t={t:.4f}s: {exc}", time=t, snapshot=x.copy()) from exc
        if fault is not None:
            if k == k_on:
                moments[MomentTag.TAU1], moment_t[MomentTag.TAU1], moment_i[MomentTag.TAU1] = v.copy(), t, cur.copy()
            if k == k_off - 1:
                moments[MomentTag.TAU2], moment_t[MomentTag.TAU2], moment_i[MomentTag.TAU2] = v.copy(), t, cur.copy()
            if k == k_off:
                moments[MomentTag.TAU3], moment_t[MomentTag.TAU3], moment_i[MomentTag.TAU3] = v.copy(), t, cur.copy()
        if k % dec == 0:
            s = v[ctx.rows] * cur.conjugate()
            t_rec[r] = t
            v_rec[r] = v
            i_rec[r] = cur
            p_rec[r] = s.real
            q_rec[r] = s.imag
            m_rec[r] = [int(m.state) for m in ctx.modes]
            r_rec[r] = np.abs(ctx.sources(x) * np.where(ctx.is_gfm, 1j * ctx.x_virtual, 1.0))
            r += 1

        ctx.update_modes(x, v, t)
        sample = Sample(t, faulted, tuple(int(m.state) for m in ctx.modes), tuple(bool(b) for b in limited),
                        tuple(float(a) for a in np.abs(v[ctx.rows])), ctx.names)
        if prev is not None:
            events.extend(detect_events(prev, sample, limits))
        else:
            events.extend(detect_events(Sample(t, False, sample.modes, (False,) * nd, sample.v_term, ctx.names),
                                        sample, limits))
        prev = sample
        if k == n_steps - 1:
            break
        try:
            x = integrate_step(lambda y: ctx.deriv(y, t, factor), x, dt, cfg.integration)
        except SimulationAborted as exc:
            exc.time = t
            raise
    traj = Trajectory(t=t_rec[:r], bus_ids=ctx.bus_ids, device_names=ctx.names, v=v_rec[:r], i=i_rec[:r],
                      p=p_rec[:r], q=q_rec[:r], mode=m_rec[:r], ref=r_rec[:r],
                      device_buses=tuple(d.bus for d in ctx.devs),
                      fault_id=None if fault is None else fault.id,
                      moments=moments, moment_times=moment_t, moment_currents=moment_i)
    return SimResult(trajectory=traj, events=events, steps=n_steps)


def baseline_tunings(scenario) -> dict:
    """Common-FRT comparator: configured GFM virtual reactance, GFL correction disabled."""
    return {d.name: (d.x_virtual if d.kind == "gfm" else 0.0) for d in scenario.devices}

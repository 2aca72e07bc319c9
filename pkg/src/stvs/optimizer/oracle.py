"""Exhaustive grid search over tunings and presets, used to bound the IPM from above.

For fixed tunings the TAU2/TAU3 voltages and currents are linear in the
presets, so each tuning combination costs ``n_dev`` unit solves per fault and
moment; every preset combination is then scored with array arithmetic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .. import critmoments as cm
from ..errors import ValidationError
from ..tuning import SHARED_KEY
from .assemble import PER_FAULT, OptimizationConfig, reference_voltages, resolve_faults

MAX_DEVICES = 3
REL_TOL = 1e-9


@dataclass
class OracleResult:
    feasible: bool
    best_objective: float
    tunings: dict = field(default_factory=dict)
    presets: dict = field(default_factory=dict)     # preset key -> device -> phasor
    evaluated: int = 0
    n_feasible: int = 0
    message: str = ""


def default_axes(scenario, config: OptimizationConfig, resolution: int, radius: float = 1.5) -> dict:
    """Tuning values over their bounds, preset offsets around the pre-fault source."""
    axes = {}
    for d in scenario.devices:
        lo, hi = (config.x_min, config.x_max) if d.kind == "gfm" else (config.b_min, config.b_max)
        axes[d.name] = np.linspace(lo, hi, resolution)
    offs = np.linspace(-radius, radius, resolution)
    axes["preset_offset"] = offs
    return axes


def _moment_maps(scenario, fault, tunings, sources, moment):
    """Columns mapping each device's preset phasor to bus voltages and device currents."""
    names = [d.name for d in scenario.devices]
    vcols, icols = [], []
    for n in names:
        unit = {m: (1.0 + 0j if m == n else 0j) for m in names}
        st = cm.eval_moment(scenario, fault, tunings, sources, unit, moment)
        vcols.append(st.v)
        icols.append(st.i)
    return np.array(vcols).T, np.array(icols).T          # (n_bus, n_dev), (n_dev, n_dev)


def _moment_score(states, scenario, cfg, v_ref, mon, dev_rows, mon_rows):
    """Objective contribution and feasibility of already-evaluated states (vectorized over axis 0)."""
    limits = scenario.limits
    frt = scenario.frt
    i_max = np.array([d.i_max for d in scenario.devices])
    obj = 0.0
    ok = True
    for moment, v, i in states:
        vm = np.abs(v)
        w = cfg.moment_weights[moment.value - 1]
        ref = np.array([v_ref[b] for b in mon])
        obj = obj + w * np.abs(ref - vm[..., mon_rows]).sum(axis=-1)
        vd = vm[..., dev_rows]
        ok = ok & np.all(np.abs(i) <= i_max * (1 + REL_TOL), axis=-1)
        ok = ok & np.all(vd >= limits.v_lvrt_th * (1 - REL_TOL), axis=-1)
        ok = ok & np.all(vd <= limits.v_hvrt_th * (1 + REL_TOL), axis=-1)
        if cfg.frt_consistency:
            if moment is cm.MomentTag.TAU3:
                ok = ok & np.all(vd >= (frt.v_exit + cfg.consistency_margin) * (1 - REL_TOL), axis=-1)
            else:
                cap = (frt.v_enter if moment is cm.MomentTag.TAU1 else frt.v_exit) - cfg.consistency_margin
                ok = ok & np.all(vd <= cap * (1 + REL_TOL), axis=-1)
    return obj, ok


def evaluate_point(scenario, config: OptimizationConfig, tunings: dict, presets: dict):
    """Objective and feasibility of one point via the scalar critical-moment path."""
    cfg = config
    v_ref = reference_voltages(scenario, cfg)
    src = cm.backsolve_internal_sources(scenario.dispatch, scenario.devices, tunings)
    total = 0.0
    feasible = True
    for f in resolve_faults(scenario, cfg):
        per = presets.get(f.id, presets.get(SHARED_KEY))
        states = cm.eval_all_moments(scenario, f, tunings, src, per)
        total += cm.moment_objective(states, scenario.monitored_buses, v_ref, cfg.moment_weights)
        feasible &= cm.check_security(states, scenario.devices, scenario.limits).secure
        if cfg.frt_consistency:
            feasible &= cm.check_mode_consistency(states, scenario.devices, scenario.frt,
                                                  cfg.consistency_margin).secure
    return total, bool(feasible)


def grid_search_oracle(scenario, config: OptimizationConfig | None = None, resolution: int = 5,
                       axes: dict | None = None) -> OracleResult:
    """Best feasible objective over a tensor grid.

    ``axes`` may give explicit value lists per device tuning (key = device
    name) and either ``preset_offset`` (offsets applied to both xy components
    around each device's pre-fault source) or ``preset_points`` (device ->
    list of absolute complex phasors).
    """
    cfg = config or scenario.opt
    devs = list(scenario.devices)
    if len(devs) > MAX_DEVICES:
        raise ValidationError([("devices", f"grid search supports at most {MAX_DEVICES} devices, got {len(devs)}")])
    if resolution < 2:
        raise ValidationError([("resolution", "need at least 2 points per dimension")])
    ax = default_axes(scenario, cfg, resolution)
    ax.update(axes or {})
    faults = resolve_faults(scenario, cfg)
    groups = ({f.id: [f] for f in faults} if cfg.preset_sharing == PER_FAULT else {SHARED_KEY: faults})
    v_ref = reference_voltages(scenario, cfg)
    mon = list(scenario.monitored_buses)
    idx = scenario.network.bus_index
    mon_rows = [idx[b] for b in mon]
    dev_rows = sorted({idx[d.bus] for d in devs})
    names = [d.name for d in devs]

    best = OracleResult(feasible=False, best_objective=np.inf)
    evaluated = 0
    n_ok = 0
    for combo in itertools.product(*[np.asarray(ax[n], dtype=float) for n in names]):
        tun = dict(zip(names, (float(c) for c in combo)))
        src = cm.backsolve_internal_sources(scenario.dispatch, devs, tun)
        # candidate presets per device, absolute phasors
        cands = []
        for n in names:
            if "preset_points" in ax and n in ax["preset_points"]:
                cands.append(np.asarray(ax["preset_points"][n], dtype=complex))
            else:
                off = np.asarray(ax["preset_offset"], dtype=float)
                base = src.source(n)
                cands.append((base + off[:, None] + 1j * off[None, :]).ravel())
        grid = np.array(list(itertools.product(*cands)))          # (n_combo, n_dev)

        total = 0.0
        feasible = True
        chosen = {}
        for key, fl in groups.items():
            obj_p = np.zeros(len(grid))
            ok_p = np.ones(len(grid), dtype=bool)
            for f in fl:
                st1 = cm.eval_moment(scenario, f, tun, src, None, cm.MomentTag.TAU1)
                o1, k1 = _moment_score([(cm.MomentTag.TAU1, st1.v, st1.i)], scenario, cfg, v_ref, mon,
                                       dev_rows, mon_rows)
                total += float(o1)
                feasible &= bool(k1)
                for m in (cm.MomentTag.TAU2, cm.MomentTag.TAU3):
                    vmap, imap = _moment_maps(scenario, f, tun, src, m)
                    v = grid @ vmap.T
                    i = grid @ imap.T
                    o, k = _moment_score([(m, v, i)], scenario, cfg, v_ref, mon, dev_rows, mon_rows)
                    obj_p += o
                    ok_p &= k
            evaluated += len(grid)
            if not ok_p.any():
                feasible = False
                break
            n_ok += int(ok_p.sum())
            masked = np.where(ok_p, obj_p, np.inf)
            j = int(np.argmin(masked))
            total += float(masked[j])
            chosen[key] = dict(zip(names, (complex(z) for z in grid[j])))
        if feasible and total < best.best_objective:
            best = OracleResult(True, total, tun, chosen)
    best.evaluated = evaluated
    best.n_feasible = n_ok
    if not best.feasible:
        best.message = "no feasible point on the grid"
    return best

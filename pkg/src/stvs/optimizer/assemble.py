"""Build the critical-moment tuning problem as a QCQP and drive the solver.

Variable layout (``n_dev`` devices, ``n_bus`` buses, ``n_mon`` monitored
buses, ``n_f`` contingencies, ``n_p`` preset groups = ``n_f`` or 1)::

    tunings            n_dev          GFM x', GFL b'
    pre-fault sources  2 n_dev        GFM E0, GFL I'0 (xy)
    presets            2 n_dev n_p    GFM E_opt, GFL I_opt (xy)
    per fault, moment  2 n_bus + 2 n_dev + 2 n_mon
                                      bus V (xy), device I (xy), |V| and
                                      epigraph slack at monitored buses

so ``n_var = 3 n_dev + 2 n_dev n_p + 3 n_f (2 n_bus + 2 n_dev + 2 n_mon)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .. import critmoments as cm
from ..errors import SolverError, ValidationError
from ..netmodel import apply_fault
from ..tuning import SHARED_KEY, TuningSet
from .ipm import NlpSolution, Status, Tolerances, solve_interior_point
from .qcqp import Expr, ProblemBuilder, var

logger = logging.getLogger(__name__)

PER_FAULT = "per_fault"
SHARED = "shared"


@dataclass(frozen=True)
class OptimizationConfig:
    contingencies: tuple = ()           # fault ids; empty means every scenario fault
    v_ref: dict = field(default_factory=dict)   # bus -> p.u.; default pre-fault |V|
    moment_weights: tuple = (1.0, 1.0, 1.0)
    x_min: float = 0.05
    x_max: float = 1.0
    b_min: float = 0.0
    b_max: float = 20.0
    preset_sharing: str = PER_FAULT
    frt_consistency: bool = True
    consistency_margin: float = 0.05
    anchor_presets: bool = True
    multistart: int = 3
    seed: int = 0
    max_iter: int = 300

    def validate(self, path="opt"):
        issues = []
        w = self.moment_weights
        if len(w) != 3 or min(w) < 0 or max(w) == 0:
            issues.append((f"{path}.moment_weights", "three non-negative weights, not all zero"))
        if not (0 < self.x_min < self.x_max):
            issues.append((f"{path}.x_min", "require 0 < x_min < x_max"))
        if not (0 <= self.b_min < self.b_max):
            issues.append((f"{path}.b_min", "require 0 <= b_min < b_max"))
        if self.preset_sharing not in (PER_FAULT, SHARED):
            issues.append((f"{path}.preset_sharing", "per_fault or shared"))
        if self.multistart < 1:
            issues.append((f"{path}.multistart", "at least one start"))
        return issues


def resolve_faults(scenario, config: OptimizationConfig):
    if not config.contingencies:
        return list(scenario.faults)
    by_id = {f.id: f for f in scenario.faults}
    missing = [c for c in config.contingencies if c not in by_id]
    if missing:
        raise ValidationError([("opt.contingencies", f"unknown fault ids {missing}")])
    return [by_id[c] for c in config.contingencies]


def reference_voltages(scenario, config: OptimizationConfig) -> dict:
    disp = scenario.dispatch
    return {b: float(config.v_ref.get(b, abs(disp.bus_voltage(b)))) for b in scenario.monitored_buses}


def _network_terms(net):
    g = sp.coo_matrix(net.g)
    bm = sp.coo_matrix(net.b)
    return list(zip(g.row, g.col, g.data)), list(zip(bm.row, bm.col, bm.data))


def assemble_nlp(scenario, config: OptimizationConfig | None = None):
    cfg = config or scenario.opt
    issues = cfg.validate()
    if issues:
        raise ValidationError(issues)
    mon = list(scenario.monitored_buses)
    if not mon:
        raise ValidationError([("buses", "no monitored bus; the objective would be empty")])
    faults = resolve_faults(scenario, cfg)
    if not faults:
        raise ValidationError([("faults", "contingency set is empty")])
    devs = list(scenario.devices)
    disp = scenario.dispatch
    missing = [d.name for d in devs if d.name not in disp.current]
    if missing:
        raise ValidationError([(f"devices.{n}", "device bus without dispatch") for n in missing])
    net = scenario.network
    idx = net.bus_index
    nb = net.n_bus
    v_ref = reference_voltages(scenario, cfg)
    limits = scenario.limits
    frt = scenario.frt

    pb = ProblemBuilder()
    layout = {"tune": {}, "src0": {}, "preset": {}, "v": {}, "i": {}, "vm": {}, "t": {},
              "devices": [d.name for d in devs], "faults": [f.id for f in faults],
              "bus_ids": net.bus_ids, "monitored": mon}

    for d in devs:
        if d.kind == "gfm":
            layout["tune"][d.name] = pb.add_var(f"x_virtual[{d.name}]", cfg.x_min, cfg.x_max)
        else:
            layout["tune"][d.name] = pb.add_var(f"b_virtual[{d.name}]", cfg.b_min, cfg.b_max)
    for d in devs:
        layout["src0"][d.name] = (pb.add_var(f"src0[{d.name}].x"), pb.add_var(f"src0[{d.name}].y"))
    preset_keys = [f.id for f in faults] if cfg.preset_sharing == PER_FAULT else [SHARED_KEY]
    for key in preset_keys:
        layout["preset"][key] = {
            d.name: (pb.add_var(f"preset[{key}][{d.name}].x"), pb.add_var(f"preset[{key}][{d.name}].y"))
            for d in devs}

    # steady-state consistency of the internal sources with the dispatch
    for d in devs:
        sx, sy = layout["src0"][d.name]
        tv = layout["tune"][d.name]
        v0 = disp.bus_voltage(d.bus)
        i0 = disp.current[d.name]
        if d.kind == "gfm":
            # V0 = E0 - j x' I0
            pb.add_eq(var(sx).term(tv, i0.imag).add(Expr(const=-v0.real)), f"ss[{d.name}].x")
            pb.add_eq(var(sy).term(tv, -i0.real).add(Expr(const=-v0.imag)), f"ss[{d.name}].y")
        else:
            # I0 = I'0 + j b' V0
            pb.add_eq(var(sx).term(tv, -v0.imag).add(Expr(const=-i0.real)), f"ss[{d.name}].x")
            pb.add_eq(var(sy).term(tv, v0.real).add(Expr(const=-i0.imag)), f"ss[{d.name}].y")

    # At TAU2/TAU3 every source is a preset, so a common rotation of all presets
    # leaves every magnitude unchanged.  Pin that symmetry by aligning the first
    # GFM preset with its pre-fault internal voltage: Im(E_opt conj(E0)) = 0,
    # Re(E_opt conj(E0)) >= 0.
    if cfg.anchor_presets:
        ref = next(d for d in devs if d.kind == "gfm")
        ex, ey = layout["src0"][ref.name]
        for key in preset_keys:
            px, py = layout["preset"][key][ref.name]
            pb.add_eq(Expr().bilinear(py, ex, 1.0).bilinear(px, ey, -1.0), f"anchor[{key}]")
            pb.add_ineq(Expr().bilinear(px, ex, -1.0).bilinear(py, ey, -1.0), f"anchor+[{key}]")

    nets = {}
    for f in faults:
        nets[(f.id, True)] = _network_terms(apply_fault(net, f))
    base_terms = _network_terms(net)
    dev_buses = sorted({d.bus for d in devs})
    w = cfg.moment_weights

    for f in faults:
        pkey = f.id if cfg.preset_sharing == PER_FAULT else SHARED_KEY
        for m in cm.MOMENTS:
            tag = f"{f.id}|{m.name}"
            vx = np.array([pb.add_var(f"vx[{tag}][{b}]") for b in net.bus_ids])
            vy = np.array([pb.add_var(f"vy[{tag}][{b}]") for b in net.bus_ids])
            ix = np.array([pb.add_var(f"ix[{tag}][{d.name}]") for d in devs])
            iy = np.array([pb.add_var(f"iy[{tag}][{d.name}]") for d in devs])
            vm = {b: pb.add_var(f"vm[{tag}][{b}]", 0.0) for b in mon}
            tt = {b: pb.add_var(f"t[{tag}][{b}]", 0.0) for b in mon}
            layout["v"][(f.id, m)] = (vx, vy)
            layout["i"][(f.id, m)] = (ix, iy)
            layout["vm"][(f.id, m)] = vm
            layout["t"][(f.id, m)] = tt

            # device laws
            for k, d in enumerate(devs):
                sx, sy = layout["src0"][d.name] if m is cm.MomentTag.TAU1 else layout["preset"][pkey][d.name]
                tv = layout["tune"][d.name]
                r = idx[d.bus]
                if d.kind == "gfm":
                    # V = S - j x' I  ->  Vx = Sx + x' Iy ; Vy = Sy - x' Ix
                    pb.add_eq(var(vx[r]).term(sx, -1.0).bilinear(tv, iy[k], -1.0), f"dev[{tag}][{d.name}].x")
                    pb.add_eq(var(vy[r]).term(sy, -1.0).bilinear(tv, ix[k], 1.0), f"dev[{tag}][{d.name}].y")
                else:
                    # I = S + j b' V  ->  Ix = Sx - b' Vy ; Iy = Sy + b' Vx
                    pb.add_eq(var(ix[k]).term(sx, -1.0).bilinear(tv, vy[r], 1.0), f"dev[{tag}][{d.name}].x")
                    pb.add_eq(var(iy[k]).term(sy, -1.0).bilinear(tv, vx[r], -1.0), f"dev[{tag}][{d.name}].y")

            # network balance: sum of device currents = (G + jB) V
            g_terms, b_terms = nets[(f.id, True)] if m.faulted else base_terms
            rows_x = [Expr() for _ in range(nb)]
            rows_y = [Expr() for _ in range(nb)]
            for k, d in enumerate(devs):
                r = idx[d.bus]
                rows_x[r].term(ix[k], 1.0)
                rows_y[r].term(iy[k], 1.0)
            for i, j, gij in g_terms:
                rows_x[i].term(vx[j], -gij)
                rows_y[i].term(vy[j], -gij)
            for i, j, bij in b_terms:
                rows_x[i].term(vy[j], bij)
                rows_y[i].term(vx[j], -bij)
            for r, b in enumerate(net.bus_ids):
                pb.add_eq(rows_x[r], f"net[{tag}][{b}].x")
                pb.add_eq(rows_y[r], f"net[{tag}][{b}].y")

            # magnitudes and epigraph of |v_ref - V|
            for b in mon:
                r = idx[b]
                pb.add_eq(Expr().bilinear(vm[b], vm[b], 1.0).bilinear(vx[r], vx[r], -1.0)
                          .bilinear(vy[r], vy[r], -1.0), f"mag[{tag}][{b}]")
                pb.add_ineq(Expr(const=v_ref[b]).term(vm[b], -1.0).term(tt[b], -1.0), f"epi+[{tag}][{b}]")
                pb.add_ineq(Expr(const=-v_ref[b]).term(vm[b], 1.0).term(tt[b], -1.0), f"epi-[{tag}][{b}]")
                pb.obj.term(tt[b], w[m.value - 1])

            # security: current capacity and ride-through voltage band
            for k, d in enumerate(devs):
                pb.add_ineq(Expr(const=-d.i_max ** 2).bilinear(ix[k], ix[k], 1.0).bilinear(iy[k], iy[k], 1.0),
                            f"imax[{tag}][{d.name}]")
            for b in dev_buses:
                r = idx[b]
                pb.add_ineq(Expr(const=limits.v_lvrt_th ** 2).bilinear(vx[r], vx[r], -1.0)
                            .bilinear(vy[r], vy[r], -1.0), f"lvrt[{tag}][{b}]")
                pb.add_ineq(Expr(const=-limits.v_hvrt_th ** 2).bilinear(vx[r], vx[r], 1.0)
                            .bilinear(vy[r], vy[r], 1.0), f"hvrt[{tag}][{b}]")
                if not cfg.frt_consistency:
                    continue
                if m is cm.MomentTag.TAU3:
                    floor = frt.v_exit + cfg.consistency_margin
                    pb.add_ineq(Expr(const=floor ** 2).bilinear(vx[r], vx[r], -1.0)
                                .bilinear(vy[r], vy[r], -1.0), f"mode[{tag}][{b}]")
                else:
                    cap = (frt.v_enter if m is cm.MomentTag.TAU1 else frt.v_exit) - cfg.consistency_margin
                    pb.add_ineq(Expr(const=-cap ** 2).bilinear(vx[r], vx[r], 1.0)
                                .bilinear(vy[r], vy[r], 1.0), f"mode[{tag}][{b}]")

    meta = {"v_ref": v_ref, "config": cfg, "scenario": scenario.name}
    return pb.build(layout=layout, meta=meta)


def variable_count(n_dev, n_bus, n_mon, n_fault, shared=False) -> int:
    n_p = 1 if shared else n_fault
    return 3 * n_dev + 2 * n_dev * n_p + 3 * n_fault * (2 * n_bus + 2 * n_dev + 2 * n_mon)


# --------------------------------------------------------------------------
# starting points
# --------------------------------------------------------------------------


def initial_point(problem, scenario, tunings: dict, presets: dict | None = None) -> np.ndarray:
    """Fill every variable from analytic moment evaluations at the given tunings.

    ``presets`` maps preset key -> device -> phasor; missing entries default to
    the pre-fault internal sources.
    """
    lay = problem.layout
    x = np.zeros(problem.n)
    src = cm.backsolve_internal_sources(scenario.dispatch, scenario.devices, tunings)
    for name, k in lay["tune"].items():
        x[k] = tunings[name]
    for name, (ix_, iy_) in lay["src0"].items():
        s = src.source(name)
        x[ix_], x[iy_] = s.real, s.imag
    full = {}
    for key, per in lay["preset"].items():
        chosen = dict((presets or {}).get(key, {}))
        full[key] = {n: complex(chosen.get(n, src.source(n))) for n in per}
        for n, (ix_, iy_) in per.items():
            x[ix_], x[iy_] = full[key][n].real, full[key][n].imag
    v_ref = problem.meta["v_ref"]
    by_id = {f.id: f for f in scenario.faults}
    for fid in lay["faults"]:
        pkey = fid if fid in full else SHARED_KEY
        for st in cm.eval_all_moments(scenario, by_id[fid], tunings, src, full[pkey]):
            vx, vy = lay["v"][(fid, st.moment)]
            x[vx], x[vy] = st.v.real, st.v.imag
            ix_, iy_ = lay["i"][(fid, st.moment)]
            x[ix_], x[iy_] = st.i.real, st.i.imag
            for b, k in lay["vm"][(fid, st.moment)].items():
                x[k] = abs(st.bus_v(b))
                x[lay["t"][(fid, st.moment)][b]] = abs(v_ref[b] - x[k]) + 1e-2
    return x


def _clip_tunings(scenario, cfg, values: dict) -> dict:
    out = {}
    for d in scenario.devices:
        lo, hi = (cfg.x_min, cfg.x_max) if d.kind == "gfm" else (cfg.b_min, cfg.b_max)
        out[d.name] = float(np.clip(values[d.name], lo, hi))
    return out


def start_points(problem, scenario, cfg):
    """Flat (mid-bound), pre-fault-values and seeded random starting points."""
    devs = scenario.devices
    mid = {d.name: 0.5 * ((cfg.x_min + cfg.x_max) if d.kind == "gfm" else (cfg.b_min + cfg.b_max))
           for d in devs}
    configured = _clip_tunings(scenario, cfg, {d.name: d.x_virtual if d.kind == "gfm" else d.b_virtual
                                               for d in devs})
    rng = np.random.default_rng(cfg.seed)
    starts = [("flat", initial_point(problem, scenario, mid)),
              ("prefault", initial_point(problem, scenario, configured))]
    while len(starts) < cfg.multistart:
        rnd = {d.name: float(rng.uniform(cfg.x_min, cfg.x_max) if d.kind == "gfm"
                             else rng.uniform(cfg.b_min, cfg.b_max)) for d in devs}
        starts.append((f"random{len(starts) - 1}", initial_point(problem, scenario, rnd)))
    return starts[: cfg.multistart]


# --------------------------------------------------------------------------
# solve + extract
# --------------------------------------------------------------------------


@dataclass
class OptimizationResult:
    problem: object
    best: NlpSolution
    runs: list                 # (start label, NlpSolution)
    tunings: TuningSet | None

    @property
    def objective_spread(self) -> float:
        objs = [s.objective for _, s in self.runs if s.optimal]
        return max(objs) - min(objs) if objs else float("nan")

    @property
    def multistart_disagreement(self) -> bool:
        return self.objective_spread > 1e-5


def solve_multistart(problem, starts, tol: Tolerances):
    runs = []
    for label, x0 in starts:
        sol = solve_interior_point(problem, x0, tol)
        logger.info("start %-9s status=%s obj=%.6g viol=%.1e iters=%d time=%.2fs", label,
                    sol.status.value, sol.objective, sol.max_constraint_violation, sol.iterations,
                    sol.wall_time_s)
        runs.append((label, sol))
    opt = [s for _, s in runs if s.optimal]
    if opt:
        best = min(opt, key=lambda s: s.objective)
    else:
        best = min((s for _, s in runs), key=lambda s: s.max_constraint_violation)
    return best, runs


def optimize(scenario, config: OptimizationConfig | None = None, tol: Tolerances | None = None,
             starts=None) -> OptimizationResult:
    cfg = config or scenario.opt
    tol = tol or Tolerances(max_iter=cfg.max_iter)
    problem = assemble_nlp(scenario, cfg)
    if starts is None:
        starts = start_points(problem, scenario, cfg)
    best, runs = solve_multistart(problem, starts, tol)
    tunings = extract_tunings(best, problem, scenario) if best.optimal else None
    return OptimizationResult(problem=problem, best=best, runs=runs, tunings=tunings)


def extract_tunings(solution: NlpSolution, problem, scenario) -> TuningSet:
    if solution.status is not Status.OPTIMAL:
        raise SolverError(f"refusing to extract tunings from a {solution.status.value} solution: "
                          f"{solution.message} (violation {solution.max_constraint_violation:.3e})")
    lay = problem.layout
    x = solution.x_star
    virtual = {name: float(x[k]) for name, k in lay["tune"].items()}
    presets = {key: {n: complex(x[a], x[b]) for n, (a, b) in per.items()}
               for key, per in lay["preset"].items()}
    src = cm.backsolve_internal_sources(scenario.dispatch, scenario.devices, virtual)
    theta = {**src.delta0, **src.theta_pll0}
    kinds = {d.name: d.kind for d in scenario.devices}
    cfg = problem.meta["config"]
    return TuningSet(virtual=virtual, presets=presets, theta_ref=theta, kinds=kinds,
                     sharing=cfg.preset_sharing, scenario=scenario.name)


def solution_moment_voltages(solution: NlpSolution, problem) -> dict:
    """(fault id, moment) -> complex bus voltages held in the solution vector."""
    x = solution.x_star
    return {key: x[vx] + 1j * x[vy] for key, (vx, vy) in problem.layout["v"].items()}


def with_config(scenario, **changes):
    return replace(scenario, opt=replace(scenario.opt, **changes))

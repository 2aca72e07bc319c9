"""Command-line entry point: ``stvs optimize|simulate|verify|sweep <scenario.scn>``.

Exit codes: 0 success/secure, 1 usage or validation error, 2 security
violation, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import critmoments as cm
from .errors import SimulationAborted, SolverError, StvsError, ValidationError
from .optimizer import SHARED, PER_FAULT, optimize
from .optimizer.assemble import resolve_faults, with_config
from .scenario import load_scenario
from .simulator import BASELINE, PROPOSED, baseline_tunings, ride_through_assessment, run_simulation
from .tuning import read_tunings, write_tunings

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INSECURE = 2
EXIT_SOLVER = 3

ERROR_TOL = {"TAU1": 5e-3, "TAU2": 1e-3, "TAU3": 5e-3}
CURRENT_TOL = 1e-3          # p.u. above i_max tolerated in simulation
CURRENT_MIN_STEPS = 2       # overcurrent shorter than this many steps is a transient
TABLE1 = ("objective", "constraint_violation", "solution_time_s", "iterations")

logger = logging.getLogger("stvs")


class UsageError(StvsError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; our contract reserves 2 for insecurity."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def max_workers(n_items: int) -> int:
    raw = os.environ.get("STVS_THREADS", "")
    if not raw:
        return max(1, min(n_items, os.cpu_count() or 1))
    try:
        cap = int(raw)
    except ValueError:
        raise ValidationError([("STVS_THREADS", f"expected a positive integer, got {raw!r}")]) from None
    if cap < 1:
        raise ValidationError([("STVS_THREADS", f"expected a positive integer, got {raw!r}")])
    return max(1, min(n_items, cap))


def fan_out(fn, items: list) -> list:
    """Map ``fn`` over ``items``; results come back in input order whatever the worker count."""
    workers = max_workers(len(items))
    if workers == 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(report: dict, out: Path, name: str, command: str) -> Path:
    path = out / f"{name}.{command}.report.json"
    report["outputs"] = [str(p) for p in report.get("outputs", [])] + [str(path)]
    path.write_text(json.dumps(report, indent=2, sort_keys=False) + "\n")
    return path


def _emit_paths(paths):
    for p in paths:
        print(f"wrote {p}")


def _load_tunings(args, scenario):
    if args.baseline:
        return None
    path = args.tunings or (Path(args.out) / f"{scenario.name}.tunings.scn")
    if not Path(path).exists():
        raise ValidationError([("tunings", f"tuning file {path} not found; pass --tunings or --baseline")])
    tun = read_tunings(path)
    tun.validate_against(scenario)
    return tun


def _selected_faults(scenario, ids):
    if not ids:
        return list(scenario.faults)
    return [scenario.fault(f) for f in ids]


def _overcurrent_runs(traj, scenario) -> list:
    """Intervals where |I| exceeds i_max + CURRENT_TOL for at least CURRENT_MIN_STEPS samples."""
    out = []
    i_max = np.array([scenario.device(n).i_max for n in traj.device_names])
    over = traj.i_mag > i_max + CURRENT_TOL
    for j, name in enumerate(traj.device_names):
        col = over[:, j]
        edges = np.diff(np.r_[0, col.astype(np.int8), 0])
        for a, b in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
            if b - a >= CURRENT_MIN_STEPS:
                out.append({"device": name, "t_start": float(traj.t[a]), "t_end": float(traj.t[b - 1])})
    return out


def _sim_job(job):
    """One simulation; module-level so worker processes can run it."""
    scenario, tunings, presets, fault, sim_cfg, control = job
    return run_simulation(scenario, tunings, presets, fault, sim_cfg, control)


def _sim_summary(res, scenario) -> dict:
    traj = res.trajectory
    verdicts = ride_through_assessment(traj, scenario.limits)
    over = _overcurrent_runs(traj, scenario)
    secure = not over and all(v.verdict != "at_risk" for v in verdicts.values())
    return {
        "secure": secure,
        "devices": {n: {"verdict": v.verdict, "intervals": v.intervals} for n, v in verdicts.items()},
        "max_current": float(traj.i_mag.max()),
        "overcurrent": over,
        "events": len(res.events),
    }


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_optimize(args) -> int:
    scenario = load_scenario(args.scenario)
    changes = {}
    if args.preset_sharing:
        changes["preset_sharing"] = args.preset_sharing
    if args.fault:
        changes["contingencies"] = tuple(args.fault)
    if args.multistart:
        changes["multistart"] = args.multistart
    if changes:
        scenario = with_config(scenario, **changes)
        scenario.validate()
    cfg = scenario.opt
    res = optimize(scenario, cfg)
    best = res.best
    summary = {
        "status": best.status.value,
        "objective": best.objective,
        "constraint_violation": best.max_constraint_violation,
        "kkt_residual": best.kkt_residual,
        "solution_time_s": sum(s.wall_time_s for _, s in res.runs),
        "iterations": best.iterations,
        "starts": [{"start": lab, "status": s.status.value, "objective": s.objective,
                    "iterations": s.iterations} for lab, s in res.runs],
        "multistart_disagreement": bool(res.multistart_disagreement),
    }
    report = {"command": "optimize", "scenario": scenario.name, "optimizer": summary, "faults": {}, "outputs": []}
    out = _out_dir(args)
    if not best.optimal:
        report["certificate"] = _certificate(res.problem, best.x_star)
        path = _write_report(report, out, scenario.name, "optimize")
        print(f"solver failed: {best.status.value} ({best.message}); "
              f"max violation {best.max_constraint_violation:.3e}", file=sys.stderr)
        for row in report["certificate"]:
            print(f"  {row['constraint']}: {row['violation']:.3e}", file=sys.stderr)
        _emit_paths([path])
        return EXIT_SOLVER
    tun = res.tunings
    secure = True
    src = cm.backsolve_internal_sources(scenario.dispatch, scenario.devices, tun.virtual)
    for f in resolve_faults(scenario, cfg):
        states = cm.eval_all_moments(scenario, f, tun.virtual, src, tun.presets_for(f.id))
        sec = cm.check_security(states, scenario.devices, scenario.limits)
        secure &= sec.secure
        report["faults"][f.id] = {"secure": sec.secure, "max_violation": sec.max_violation,
                                  "violations": [f"{v.moment.name} {v.subject} {v.kind} {v.value:.4f}"
                                                 for v in sec.violations]}
    tpath = write_tunings(tun, out / f"{scenario.name}.tunings.scn")
    report["outputs"].append(tpath)
    if args.report == "table1":
        print(_table1(scenario.name, summary))
    else:
        print(f"{scenario.name}: {best.status.value} objective={best.objective:.6g} "
              f"violation={best.max_constraint_violation:.2e} kkt={best.kkt_residual:.2e} "
              f"iterations={best.iterations} time={summary['solution_time_s']:.2f}s")
    path = _write_report(report, out, scenario.name, "optimize")
    _emit_paths([tpath, path])
    return EXIT_OK if secure else EXIT_INSECURE


def _certificate(problem, x, top: int = 5) -> list:
    """The most violated constraints at ``x``."""
    rows = []
    if problem.eq_labels:
        g = np.abs(problem.eq.value(x))
        rows += list(zip(problem.eq_labels, g))
    if problem.ineq_labels:
        h = np.maximum(problem.ineq.value(x), 0.0)
        rows += list(zip(problem.ineq_labels, h))
    rows.sort(key=lambda r: -r[1])
    return [{"constraint": lab, "violation": float(v)} for lab, v in rows[:top] if v > 0]


def _table1(name, summary) -> str:
    head = f"{'system':<16}{'objective':>14}{'violation':>14}{'time (s)':>12}{'iterations':>12}"
    row = (f"{name:<16}{summary['objective']:>14.6g}{summary['constraint_violation']:>14.2e}"
           f"{summary['solution_time_s']:>12.2f}{summary['iterations']:>12d}")
    return head + "\n" + row


def _sim_config(scenario, args):
    cfg = scenario.sim
    if getattr(args, "decimate", None):
        cfg = replace(cfg, record_decimation=args.decimate)
    return cfg


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    tun = _load_tunings(args, scenario)
    faults = _selected_faults(scenario, args.fault)
    if not faults:
        raise ValidationError([("faults", "scenario defines no faults to simulate")])
    sim_cfg = _sim_config(scenario, args)
    if tun is None:
        jobs = [(scenario, baseline_tunings(scenario), None, f, sim_cfg, BASELINE) for f in faults]
    else:
        jobs = [(scenario, tun.virtual, tun.presets_for(f.id), f, sim_cfg, PROPOSED) for f in faults]
    results = fan_out(_sim_job, jobs)
    out = _out_dir(args)
    tag = ".baseline" if tun is None else ""
    report = {"command": "simulate", "scenario": scenario.name,
              "control": BASELINE if tun is None else PROPOSED, "faults": {}, "outputs": []}
    secure = True
    for f, res in zip(faults, results):
        csv_path = res.trajectory.write_csv(out / f"{scenario.name}.{f.id}{tag}.traj.csv")
        report["outputs"].append(csv_path)
        summ = _sim_summary(res, scenario)
        secure &= summ["secure"]
        report["faults"][f.id] = summ
        print(f"{f.id}: {'secure' if summ['secure'] else 'VIOLATION'} max|I|={summ['max_current']:.4f} "
              + " ".join(f"{n}={d['verdict']}" for n, d in summ["devices"].items()))
    path = _write_report(report, out, scenario.name, "simulate" + tag.replace(".", "_"))
    _emit_paths(report["outputs"])
    return EXIT_OK if secure else EXIT_INSECURE


def cmd_verify(args) -> int:
    scenario = load_scenario(args.scenario)
    args.baseline = False
    tun = _load_tunings(args, scenario)
    faults = _selected_faults(scenario, args.fault)
    if not faults:
        raise ValidationError([("faults", "scenario defines no faults to verify")])
    sim_cfg = _sim_config(scenario, args)
    jobs = [(scenario, tun.virtual, tun.presets_for(f.id), f, sim_cfg, PROPOSED) for f in faults]
    results = fan_out(_sim_job, jobs)
    src = cm.backsolve_internal_sources(scenario.dispatch, scenario.devices, tun.virtual)
    analytic, sampled = {}, {}
    report = {"command": "verify", "scenario": scenario.name, "faults": {}, "errors": [], "outputs": []}
    ok = True
    for f, res in zip(faults, results):
        states = cm.eval_all_moments(scenario, f, tun.virtual, src, tun.presets_for(f.id))
        analytic[f.id] = states
        sampled[f.id] = res.trajectory.moments
        sec = cm.check_security(states, scenario.devices, scenario.limits)
        summ = _sim_summary(res, scenario)
        summ["analytic_secure"] = sec.secure
        report["faults"][f.id] = summ
        if sec.secure and not summ["secure"]:
            ok = False
        if not sec.secure:
            ok = False
    err = cm.moment_error_report(analytic, sampled)
    within = True
    print(f"{'fault':<8}{'moment':<8}{'max err':>12}{'mean err':>12}")
    for row in err.rows:
        good = row.max_error <= ERROR_TOL[row.moment.name]
        within &= good
        report["errors"].append({"fault": row.fault_id, "moment": row.moment.name, "max": row.max_error,
                                 "mean": row.mean_error, "within_tolerance": good})
        print(f"{row.fault_id:<8}{row.moment.name:<8}{row.max_error:>12.3e}{row.mean_error:>12.3e}")
    report["errors_within_tolerance"] = within
    report["secure"] = ok
    print("security: " + ("consistent" if ok else "VIOLATION") +
          "; moment errors: " + ("within tolerance" if within else "EXCEED tolerance"))
    path = _write_report(report, _out_dir(args), scenario.name, "verify")
    _emit_paths([path])
    return EXIT_OK if ok else EXIT_INSECURE


def sweep_parameters(scenario) -> list:
    names = []
    for d in scenario.devices:
        if d.kind == "gfm":
            names.append(f"{d.name}.x_virtual")
        else:
            names += [f"{d.name}.b_virtual", f"{d.name}.k_q"]
    return names


def sweep_metrics(res, scenario, fault) -> dict:
    traj = res.trajectory
    idx = {b: k for k, b in enumerate(traj.bus_ids)}
    mon = [idx[b] for b in scenario.monitored_buses]
    tau1 = np.abs(traj.moments[cm.MomentTag.TAU1])
    after = traj.t >= fault.t_clear - 1e-12
    return {
        "min_fault_instant_v": float(tau1[mon].min()),
        "max_i": float(traj.i_mag.max()),
        "max_clearance_v": float(traj.v_mag[after].max()),
    }


def cmd_sweep(args) -> int:
    scenario = load_scenario(args.scenario)
    valid = sweep_parameters(scenario)
    if args.param not in valid:
        raise ValidationError([("param", f"unknown parameter {args.param!r}; valid: {', '.join(valid)}")])
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ValidationError([("values", f"expected comma-separated numbers, got {args.values!r}")]) from None
    if not values:
        raise ValidationError([("values", "at least one value")])
    tun = _load_tunings(args, scenario)
    fault = scenario.fault(args.fault[0]) if args.fault else (scenario.faults[0] if scenario.faults else None)
    if fault is None:
        raise ValidationError([("faults", "scenario defines no faults")])
    dev_name, field_name = args.param.rsplit(".", 1)
    sim_cfg = _sim_config(scenario, args)
    jobs = []
    for val in values:
        sc = scenario
        if tun is None:
            tunings, presets, control = baseline_tunings(scenario), None, BASELINE
        else:
            tunings, presets, control = dict(tun.virtual), tun.presets_for(fault.id), PROPOSED
        if field_name == "k_q":
            gfl = tuple(replace(d, k_q=val) if d.name == dev_name else d for d in scenario.gfl_devices)
            sc = replace(scenario, gfl_devices=gfl)
        else:
            tunings[dev_name] = val
        jobs.append((sc, tunings, presets, fault, sim_cfg, control))
    results = fan_out(_sim_job, jobs)
    out = _out_dir(args)
    path = out / f"{scenario.name}.sweep.csv"
    rows = []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "min_fault_instant_v", "max_i", "max_clearance_v"])
        for val, res, job in zip(values, results, jobs):
            m = sweep_metrics(res, job[0], fault)
            rows.append({"value": val, **m})
            w.writerow([repr(val), repr(m["min_fault_instant_v"]), repr(m["max_i"]), repr(m["max_clearance_v"])])
            print(f"{args.param}={val:g}: min fault-instant |V|={m['min_fault_instant_v']:.4f} "
                  f"max|I|={m['max_i']:.4f} max clearance |V|={m['max_clearance_v']:.4f}")
    report = {"command": "sweep", "scenario": scenario.name, "fault": fault.id, "param": args.param,
              "control": BASELINE if tun is None else PROPOSED, "rows": rows, "outputs": [path]}
    rpath = _write_report(report, out, scenario.name, "sweep")
    _emit_paths([path, rpath])
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stvs", description="Co-tune inverter fault-ride-through parameters for voltage security.")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("scenario", help="scenario file (.scn)")
        sp.add_argument("--out", default=".", help="output directory (default: current)")
        sp.add_argument("--fault", action="append", default=[], help="fault id; repeat for several")

    sp = sub.add_parser("optimize", help="solve for tunings and frozen presets")
    common(sp)
    sp.add_argument("--preset-sharing", choices=(PER_FAULT, SHARED), help="per-fault or shared presets")
    sp.add_argument("--multistart", type=int, help="number of solver starts")
    sp.add_argument("--report", choices=("summary", "table1"), default="summary")
    sp.set_defaults(func=cmd_optimize)

    for name, func, hlp in (("simulate", cmd_simulate, "time-domain run with a tuning file or baseline"),
                            ("sweep", cmd_sweep, "simulate over a list of values of one parameter")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--tunings", help="tuning file (default: <out>/<name>.tunings.scn)")
        sp.add_argument("--baseline", action="store_true", help="common-FRT control instead of tunings")
        sp.add_argument("--decimate", type=int, help="record every n-th step")
        if name == "sweep":
            sp.add_argument("--param", required=True, help="<device>.x_virtual, <device>.b_virtual or <device>.k_q")
            sp.add_argument("--values", required=True, help="comma-separated values")
        sp.set_defaults(func=func)

    sp = sub.add_parser("verify", help="compare analytic moments with simulation")
    common(sp)
    sp.add_argument("--tunings", help="tuning file (default: <out>/<name>.tunings.scn)")
    sp.add_argument("--decimate", type=int, help="record every n-th step")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "decimate", None) is not None and args.decimate < 1:
        print("stvs: error: --decimate must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ValidationError as exc:
        print("stvs: invalid input:", file=sys.stderr)
        for path, msg in exc.issues:
            print(f"  {path}: {msg}" if path else f"  {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, SimulationAborted) as exc:
        print(f"stvs: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"stvs: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

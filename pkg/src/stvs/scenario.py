"""Grid scenarios: the unit of work for every command, and their TOML file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from . import devices as dv
from .errors import ValidationError
from .netmodel import Bus, FaultSpec, Line, LoadZ, build_admittance
from .optimizer.assemble import OptimizationConfig
from .powerflow import solve_power_flow
from .scenario_io import read_toml, write_toml
from .simulator import SimConfig

SCHEMA_VERSION = 1
BUNDLED = ("two_device", "ieee14_ibr")

# file key -> dataclass field, where they differ
_RENAMES = {
    Bus: {"monitored": "is_monitored"},
    Line: {"from": "from_bus", "to": "to_bus"},
}


@dataclass(frozen=True)
class GridScenario:
    name: str
    buses: tuple
    lines: tuple
    loads: tuple = ()
    gfm_devices: tuple = ()
    gfl_devices: tuple = ()
    faults: tuple = ()
    limits: dv.SecurityLimits = field(default_factory=dv.SecurityLimits)
    frt: dv.FrtThresholds = field(default_factory=dv.FrtThresholds)
    sim: SimConfig = field(default_factory=SimConfig)
    opt: OptimizationConfig = field(default_factory=OptimizationConfig)

    @property
    def devices(self) -> tuple:
        """Grid-forming devices first, then grid-following; order is stable."""
        return tuple(self.gfm_devices) + tuple(self.gfl_devices)

    @property
    def monitored_buses(self) -> tuple:
        return tuple(b.id for b in self.buses if b.is_monitored)

    @cached_property
    def network(self):
        return build_admittance(self.buses, self.lines, self.loads)

    @cached_property
    def dispatch(self):
        return solve_power_flow(self.network, list(self.gfm_devices), list(self.gfl_devices))

    def fault(self, fault_id: str) -> FaultSpec:
        for f in self.faults:
            if f.id == fault_id:
                return f
        raise ValidationError([("fault", f"unknown fault id {fault_id!r}; known: {[f.id for f in self.faults]}")])

    def device(self, name: str):
        for d in self.devices:
            if d.name == name:
                return d
        raise ValidationError([("device", f"unknown device {name!r}")])

    def validate(self) -> None:
        issues = []
        ids = [b.id for b in self.buses]
        known = set(ids)
        if len(known) != len(ids):
            issues.append(("buses", "bus ids must be unique"))
        if not self.monitored_buses:
            issues.append(("buses", "at least one bus must be monitored"))
        for k, ln in enumerate(self.lines):
            for end in (ln.from_bus, ln.to_bus):
                if end not in known:
                    issues.append((f"lines[{k}]", f"unknown bus id {end}"))
            if ln.from_bus == ln.to_bus:
                issues.append((f"lines[{k}]", "from and to must differ"))
            if not ln.r ** 2 + ln.x ** 2 > 0:
                issues.append((f"lines[{k}].x", "zero series impedance"))
            elif ln.x < 0:
                issues.append((f"lines[{k}].x", "non-positive reactance"))
        for k, ld in enumerate(self.loads):
            if ld.bus not in known:
                issues.append((f"loads[{k}].bus", f"unknown bus id {ld.bus}"))
        names = [d.name for d in self.devices]
        if len(set(names)) != len(names):
            issues.append(("devices", "device names must be unique"))
        if not self.devices:
            issues.append(("devices", "at least one device is required"))
        if not self.gfm_devices:
            issues.append(("gfm", "at least one grid-forming device is required"))
        gfm_buses = [d.bus for d in self.gfm_devices]
        if len(set(gfm_buses)) != len(gfm_buses):
            issues.append(("gfm", "at most one grid-forming device per bus"))
        for kind, devs in (("gfm", self.gfm_devices), ("gfl", self.gfl_devices)):
            for k, d in enumerate(devs):
                if d.bus not in known:
                    issues.append((f"{kind}[{k}].bus", f"unknown bus id {d.bus}"))
                issues.extend(d.validate(f"{kind}[{k}]"))
        fids = [f.id for f in self.faults]
        if len(set(fids)) != len(fids):
            issues.append(("faults", "fault ids must be unique"))
        for k, f in enumerate(self.faults):
            if f.bus not in known:
                issues.append((f"faults[{k}].bus", f"fault {f.id!r} at unknown bus id {f.bus}"))
            if not f.t_clear > f.t_fault:
                issues.append((f"faults[{k}].t_clear", "must exceed t_fault"))
            if not f.r_f ** 2 + f.x_f ** 2 > 0:
                issues.append((f"faults[{k}]", "fault impedance must be nonzero"))
            issues.extend(self.sim.validate("sim", f))
        issues.extend(self.opt.validate("opt"))
        for c in self.opt.contingencies:
            if c not in fids:
                issues.append(("opt.contingencies", f"unknown fault id {c!r}"))
        if issues:
            raise ValidationError(issues)

    def to_dict(self) -> dict:
        def rec(obj):
            ren = {v: k for k, v in _RENAMES.get(type(obj), {}).items()}
            return {ren.get(f.name, f.name): getattr(obj, f.name) for f in dataclasses.fields(obj)}

        opt = rec(self.opt)
        opt["contingencies"] = list(opt["contingencies"])
        opt["moment_weights"] = list(opt["moment_weights"])
        opt["v_ref"] = {str(k): v for k, v in opt["v_ref"].items()}
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "buses": [rec(b) for b in self.buses],
            "lines": [rec(x) for x in self.lines],
            "loads": [rec(x) for x in self.loads],
            "gfm": [rec(x) for x in self.gfm_devices],
            "gfl": [rec(x) for x in self.gfl_devices],
            "faults": [rec(x) for x in self.faults],
            "limits": rec(self.limits),
            "frt": rec(self.frt),
            "sim": rec(self.sim),
            "opt": opt,
        }


def _build(cls, data, path, issues):
    if not isinstance(data, dict):
        issues.append((path, "expected a table"))
        return None
    ren = _RENAMES.get(cls, {})
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        fname = ren.get(key, key)
        if fname not in names:
            issues.append((f"{path}.{key}", "unknown field"))
            continue
        kwargs[fname] = val
    try:
        return cls(**kwargs)
    except ValidationError as exc:
        issues.extend((f"{path}.{p}", m) for p, m in exc.issues)
    except TypeError as exc:
        issues.append((path, str(exc)))
    return None


def scenario_from_dict(data: dict, source: str = "<scenario>") -> GridScenario:
    if "schema_version" not in data:
        raise ValidationError([("schema_version", f"missing in {source}")])
    if data["schema_version"] != SCHEMA_VERSION:
        raise ValidationError([("schema_version", f"expected {SCHEMA_VERSION}, got {data['schema_version']!r}")])
    issues = []
    known = {"schema_version", "name", "buses", "lines", "loads", "gfm", "gfl", "faults",
             "limits", "frt", "sim", "opt"}
    for key in data:
        if key not in known:
            issues.append((key, "unknown section"))

    def many(cls, key):
        out = [_build(cls, r, f"{key}[{k}]", issues) for k, r in enumerate(data.get(key, []))]
        return tuple(x for x in out if x is not None)

    buses = many(Bus, "buses")
    lines = many(Line, "lines")
    loads = many(LoadZ, "loads")
    gfm = many(dv.GfmDevice, "gfm")
    gfl = many(dv.GflDevice, "gfl")
    faults = many(FaultSpec, "faults")
    limits = _build(dv.SecurityLimits, data.get("limits", {}), "limits", issues)
    frt = _build(dv.FrtThresholds, data.get("frt", {}), "frt", issues)
    sim = _build(SimConfig, data.get("sim", {}), "sim", issues)
    opt_raw = dict(data.get("opt", {}))
    if "contingencies" in opt_raw:
        opt_raw["contingencies"] = tuple(opt_raw["contingencies"])
    if "moment_weights" in opt_raw:
        opt_raw["moment_weights"] = tuple(float(w) for w in opt_raw["moment_weights"])
    if "v_ref" in opt_raw:
        try:
            opt_raw["v_ref"] = {int(k): float(v) for k, v in opt_raw["v_ref"].items()}
        except (ValueError, AttributeError):
            issues.append(("opt.v_ref", "expected a table of bus id -> p.u."))
    opt = _build(OptimizationConfig, opt_raw, "opt", issues)
    if issues:
        raise ValidationError(issues)
    sc = GridScenario(name=str(data.get("name", Path(source).stem)), buses=buses, lines=lines, loads=loads,
                      gfm_devices=gfm, gfl_devices=gfl, faults=faults, limits=limits, frt=frt, sim=sim, opt=opt)
    sc.validate()
    return sc


def load_scenario(path) -> GridScenario:
    path = Path(path)
    return scenario_from_dict(read_toml(path), str(path))


def write_scenario(scenario: GridScenario, path) -> Path:
    return write_toml(scenario.to_dict(), path)


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise ValidationError([("scenario", f"no bundled scenario {name!r}; choose from {BUNDLED}")])
    return Path(str(resources.files("stvs") / "data" / f"{name}.scn"))


def load_bundled(name: str) -> GridScenario:
    return load_scenario(bundled_path(name))


def synthetic_grid(n_bus: int = 57, n_gfm: int = 4, n_gfl: int = 3, n_faults: int = 3, seed: int = 0,
                   name: str | None = None) -> GridScenario:
    """A meshed test grid for scaling studies.

    Buses form a ring with random chords; loads sit on non-device buses and
    the total load is sized to the device dispatch.  Deterministic for a seed.
    """
    rng = np.random.default_rng(seed)
    ids = list(range(1, n_bus + 1))
    lines = [Line(ids[k], ids[(k + 1) % n_bus], 0.01, float(rng.uniform(0.04, 0.08))) for k in range(n_bus)]
    seen = {tuple(sorted((ln.from_bus, ln.to_bus))) for ln in lines}
    for _ in range(n_bus // 3):
        a, b = (int(v) for v in rng.choice(ids, 2, replace=False))
        if tuple(sorted((a, b))) in seen:
            continue
        seen.add(tuple(sorted((a, b))))
        lines.append(Line(a, b, 0.01, float(rng.uniform(0.05, 0.1))))
    step = n_bus // (n_gfm + n_gfl)
    dev_buses = [1 + k * step for k in range(n_gfm + n_gfl)]
    gfm = tuple(dv.GfmDevice(f"GFM{b}", b, p_sp=0.6, slack=(k == 0)) for k, b in enumerate(dev_buses[:n_gfm]))
    gfl = tuple(dv.GflDevice(f"GFL{b}", b, p_sp=0.5) for b in dev_buses[n_gfm:])
    load_buses = [b for b in ids if b not in dev_buses]
    p_tot = 0.6 * n_gfm + 0.5 * n_gfl
    share = rng.uniform(0.5, 1.5, len(load_buses))
    share *= p_tot / share.sum()
    loads = tuple(LoadZ(b, float(p), float(0.3 * p)) for b, p in zip(load_buses, share))
    picks = [load_buses[int(k)] for k in np.linspace(0, len(load_buses) - 1, n_faults + 2)[1:-1]]
    monitored = set(picks)
    buses = tuple(Bus(b, 1.0, b in monitored) for b in ids)
    faults = tuple(FaultSpec(f"F{b}", b, 0.0, 0.05) for b in picks)
    sc = GridScenario(name=name or f"synthetic{n_bus}", buses=buses, lines=tuple(lines), loads=loads,
                      gfm_devices=gfm, gfl_devices=gfl, faults=faults)
    sc.validate()
    return sc

"""Device tunings and frozen FRT presets, plus their TOML file format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from . import devices as dv
from .errors import ValidationError
from .scenario_io import read_toml, write_toml

SHARED_KEY = "*"
TUNING_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DeviceTuning:
    name: str
    kind: str
    value: float          # GFM: x' ; GFL: b'

    @property
    def x_virtual(self) -> float:
        if self.kind == "gfm":
            return self.value
        return math.inf if self.value == 0.0 else 1.0 / self.value

    @property
    def correction_disabled(self) -> bool:
        return self.kind == "gfl" and self.value == 0.0


@dataclass
class TuningSet:
    """Per-device virtual impedances and per-fault (or shared) presets.

    Presets are xy phasors: the GFM internal voltage ``E_opt`` or the GFL
    internal current ``I_opt``.  ``theta_ref`` holds the pre-fault frame angle
    of every device (GFM ``delta0``, GFL ``theta_pll0``) used for dq views.
    """

    virtual: dict
    presets: dict = field(default_factory=dict)
    theta_ref: dict = field(default_factory=dict)
    kinds: dict = field(default_factory=dict)
    sharing: str = "per_fault"
    scenario: str = ""

    def presets_for(self, fault_id: str):
        if fault_id in self.presets:
            return self.presets[fault_id]
        if SHARED_KEY in self.presets:
            return self.presets[SHARED_KEY]
        raise ValidationError([(f"presets.{fault_id}", "no presets for fault")])

    def device_tunings(self):
        return [DeviceTuning(n, self.kinds.get(n, "gfm"), v) for n, v in self.virtual.items()]

    def preset_dq(self, fault_id: str, name: str) -> complex:
        return dv.xy_to_dq(self.presets_for(fault_id)[name], self.theta_ref.get(name, 0.0))

    def to_dict(self) -> dict:
        devs = []
        for t in self.device_tunings():
            rec = {"name": t.name, "kind": t.kind}
            if t.kind == "gfm":
                rec["x_virtual"] = t.value
            else:
                rec["b_virtual"] = t.value
                if t.value > 0:
                    rec["x_virtual"] = t.x_virtual
            rec["theta_ref"] = self.theta_ref.get(t.name, 0.0)
            devs.append(rec)
        pres = []
        for fid, per in self.presets.items():
            for name, ph in per.items():
                kind = self.kinds.get(name, "gfm")
                dq = dv.xy_to_dq(ph, self.theta_ref.get(name, 0.0))
                rec = {"fault": fid, "device": name, "x": ph.real, "y": ph.imag}
                if kind == "gfm":
                    rec["e_opt"] = abs(ph)
                    rec["delta_opt"] = math.atan2(ph.imag, ph.real)
                else:
                    rec["i_d"] = dq.real
                    rec["i_q"] = dq.imag
                pres.append(rec)
        return {"schema_version": TUNING_SCHEMA_VERSION, "scenario": self.scenario,
                "preset_sharing": self.sharing, "device": devs, "preset": pres}

    @classmethod
    def from_dict(cls, data: dict) -> "TuningSet":
        if data.get("schema_version") != TUNING_SCHEMA_VERSION:
            raise ValidationError([("schema_version", f"expected {TUNING_SCHEMA_VERSION}")])
        virtual, kinds, theta = {}, {}, {}
        issues = []
        for k, rec in enumerate(data.get("device", [])):
            name, kind = rec.get("name"), rec.get("kind")
            if kind not in ("gfm", "gfl") or not name:
                issues.append((f"device[{k}]", "needs a name and kind gfm|gfl"))
                continue
            key = "x_virtual" if kind == "gfm" else "b_virtual"
            if key not in rec:
                issues.append((f"device[{k}].{key}", "missing"))
                continue
            virtual[name] = float(rec[key])
            kinds[name] = kind
            theta[name] = float(rec.get("theta_ref", 0.0))
        presets = {}
        for k, rec in enumerate(data.get("preset", [])):
            try:
                presets.setdefault(str(rec["fault"]), {})[rec["device"]] = complex(rec["x"], rec["y"])
            except KeyError as exc:
                issues.append((f"preset[{k}]", f"missing field {exc.args[0]}"))
        if issues:
            raise ValidationError(issues)
        return cls(virtual=virtual, presets=presets, theta_ref=theta, kinds=kinds,
                   sharing=data.get("preset_sharing", "per_fault"), scenario=data.get("scenario", ""))

    def validate_against(self, scenario, config=None) -> None:
        """Check names and bounds against a scenario; raises :class:`ValidationError`."""
        cfg = config or scenario.opt
        issues = []
        for d in scenario.devices:
            if d.name not in self.virtual:
                issues.append((f"device.{d.name}", "missing tuning"))
                continue
            val = self.virtual[d.name]
            if d.kind == "gfm" and not (cfg.x_min - 1e-9 <= val <= cfg.x_max + 1e-9):
                issues.append((f"device.{d.name}.x_virtual",
                               f"{val} outside [{cfg.x_min}, {cfg.x_max}]"))
            if d.kind == "gfl" and not (cfg.b_min - 1e-9 <= val <= cfg.b_max + 1e-9):
                issues.append((f"device.{d.name}.b_virtual",
                               f"{val} outside [{cfg.b_min}, {cfg.b_max}]"))
        for fid, per in self.presets.items():
            if fid != SHARED_KEY and fid not in {f.id for f in scenario.faults}:
                issues.append((f"preset.{fid}", "unknown fault id"))
            for d in scenario.devices:
                if d.name not in per:
                    issues.append((f"preset.{fid}.{d.name}", "missing preset"))
        if issues:
            raise ValidationError(issues)


def write_tunings(tunings: TuningSet, path) -> Path:
    return write_toml(tunings.to_dict(), path)


def read_tunings(path) -> TuningSet:
    return TuningSet.from_dict(read_toml(path))

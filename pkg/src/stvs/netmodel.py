"""Nodal admittance model and the linear phasor network solve.

All quantities are per-unit on the system base.  Injected currents obey
``I = (G + jB) V``; devices enter as Norton equivalents whose shunt part is
folded into the matrix and whose source part forms the right-hand side.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularNetworkError, ValidationError

logger = logging.getLogger(__name__)

DENSE_LIMIT = 200
RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class Bus:
    id: int
    base_kv: float = 1.0
    is_monitored: bool = False


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float = 0.0

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class LoadZ:
    """Constant-impedance load specified by its power at 1.0 p.u. voltage."""

    bus: int
    p: float
    q: float

    @property
    def admittance(self) -> complex:
        # |V_nom| = 1.0 p.u. by definition of the load record
        return complex(self.p, -self.q)


@dataclass(frozen=True)
class FaultSpec:
    id: str
    bus: int
    r_f: float = 0.0
    x_f: float = 0.01
    t_fault: float = 0.1
    t_clear: float = 0.3

    @property
    def admittance(self) -> complex:
        if self.r_f == 0.0 and self.x_f == 0.0:
            raise ValidationError([(f"faults.{self.id}", "fault impedance must be nonzero")])
        return 1.0 / complex(self.r_f, self.x_f)


@dataclass(frozen=True)
class NetworkModel:
    """Immutable ``G + jB`` pair plus the bus ordering.

    Matrices are dense ``ndarray`` up to ``DENSE_LIMIT`` buses and CSR beyond.
    """

    g: object
    b: object
    bus_ids: tuple

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def bus_index(self) -> dict:
        return {bid: k for k, bid in enumerate(self.bus_ids)}

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.g)

    @property
    def y(self):
        return self.g + 1j * self.b

    def with_shunts(self, shunts: Iterable[tuple[int, complex]]) -> "NetworkModel":
        """Return a copy with ``(bus, admittance)`` shunts added on the diagonal."""
        idx = self.bus_index
        add = np.zeros(self.n_bus, dtype=complex)
        for bus, y in shunts:
            if bus not in idx:
                raise ValidationError([("bus", f"unknown bus id {bus}")])
            add[idx[bus]] += y
        if self.is_sparse:
            d = sp.diags(add, format="csr")
            return _make_model(self.g + d.real, self.b + d.imag, self.bus_ids)
        g = self.g.copy()
        b = self.b.copy()
        g[np.diag_indices(self.n_bus)] += add.real
        b[np.diag_indices(self.n_bus)] += add.imag
        return _make_model(g, b, self.bus_ids)


def _make_model(g, b, bus_ids) -> NetworkModel:
    if not sp.issparse(g):
        g = np.asarray(g, dtype=float)
        b = np.asarray(b, dtype=float)
        g.setflags(write=False)
        b.setflags(write=False)
    else:
        g = sp.csr_matrix(g)
        b = sp.csr_matrix(b)
    return NetworkModel(g=g, b=b, bus_ids=tuple(bus_ids))


def build_admittance(
    buses: Sequence[Bus], lines: Sequence[Line], loads: Sequence[LoadZ] = ()
) -> NetworkModel:
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        raise ValidationError([("buses", "bus ids must be unique")])
    idx = {bid: k for k, bid in enumerate(ids)}
    issues = []
    for k, ln in enumerate(lines):
        for end in (ln.from_bus, ln.to_bus):
            if end not in idx:
                issues.append((f"lines[{k}]", f"unknown bus id {end}"))
        if ln.from_bus == ln.to_bus:
            issues.append((f"lines[{k}]", "line must connect two distinct buses"))
        if ln.r == 0.0 and ln.x == 0.0:
            issues.append((f"lines[{k}]", "zero-impedance line"))
    for k, ld in enumerate(loads):
        if ld.bus not in idx:
            issues.append((f"loads[{k}]", f"unknown bus id {ld.bus}"))
    if issues:
        raise ValidationError(issues)

    n = len(ids)
    rows, cols, vals = [], [], []
    for ln in lines:
        i, j = idx[ln.from_bus], idx[ln.to_bus]
        ys = ln.series_admittance
        ysh = 0.5j * ln.b_sh
        rows += [i, j, i, j]
        cols += [i, j, j, i]
        vals += [ys + ysh, ys + ysh, -ys, -ys]
    for ld in loads:
        k = idx[ld.bus]
        rows.append(k)
        cols.append(k)
        vals.append(ld.admittance)
    y = sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()
    if n <= DENSE_LIMIT:
        y = y.toarray()
    return _make_model(y.real, y.imag, ids)


def apply_fault(net: NetworkModel, fault: FaultSpec) -> NetworkModel:
    if fault.bus not in net.bus_index:
        raise ValidationError([(f"faults.{fault.id}", f"unknown bus id {fault.bus}")])
    return net.with_shunts([(fault.bus, fault.admittance)])


@dataclass(frozen=True)
class Norton:
    """Device Norton equivalent: injected current ``I = source - shunt * V``."""

    bus: int
    shunt: complex
    source: complex


@dataclass
class AugmentedSystem:
    net: NetworkModel
    y_aug: object
    injection: np.ndarray
    nortons: tuple
    device_rows: np.ndarray = field(default=None)


def aggregate_devices(net: NetworkModel, nortons: Sequence[Norton]) -> AugmentedSystem:
    idx = net.bus_index
    n = net.n_bus
    inj = np.zeros(n, dtype=complex)
    diag = np.zeros(n, dtype=complex)
    rows = np.empty(len(nortons), dtype=int)
    for k, nt in enumerate(nortons):
        if nt.bus not in idx:
            raise ValidationError([(f"devices[{k}]", f"unknown bus id {nt.bus}")])
        r = idx[nt.bus]
        rows[k] = r
        diag[r] += nt.shunt
        inj[r] += nt.source
    if net.is_sparse:
        y_aug = (net.y + sp.diags(diag)).tocsc()
    else:
        y_aug = net.y + np.diag(diag)
    return AugmentedSystem(net=net, y_aug=y_aug, injection=inj, nortons=tuple(nortons), device_rows=rows)


class _ResidualLog:
    """Tracks the worst network-solve residual seen in this process."""

    def __init__(self):
        self.worst = 0.0
        self.count = 0

    def record(self, value: float) -> None:
        self.count += 1
        if value > self.worst:
            self.worst = value

    def reset(self) -> None:
        self.worst = 0.0
        self.count = 0


residual_log = _ResidualLog()


class FactorizedNetwork:
    """LU factorization of an augmented admittance matrix, reusable across right-hand sides."""

    def __init__(self, y_aug, bus_ids: Sequence[int]):
        self.y_aug = y_aug
        self.bus_ids = tuple(bus_ids)
        if sp.issparse(y_aug):
            self._check_isolated(abs(y_aug).sum(axis=1).A1)
            try:
                self._lu = spla.splu(sp.csc_matrix(y_aug))
            except RuntimeError as exc:
                raise SingularNetworkError(f"singular admittance matrix: {exc}") from exc
            self._sparse = True
        else:
            self._check_isolated(np.abs(y_aug).sum(axis=1))
            lu, piv = la.lu_factor(y_aug, check_finite=True)
            d = np.abs(np.diag(lu))
            scale = max(np.abs(y_aug).max(), 1.0)
            bad = np.flatnonzero(d < 1e-13 * scale)
            if bad.size:
                bus = self.bus_ids[int(bad[0])]
                raise SingularNetworkError(
                    f"singular admittance matrix (zero pivot near bus {bus}); "
                    "check for islanded buses without shunt", bus=bus)
            self._lu = (lu, piv)
            self._sparse = False

    def _check_isolated(self, row_abs_sums):
        zero = np.flatnonzero(row_abs_sums == 0.0)
        if zero.size:
            bus = self.bus_ids[int(zero[0])]
            raise SingularNetworkError(
                f"bus {bus} is islanded with no shunt; admittance matrix is singular", bus=bus)

    def solve(self, injection: np.ndarray) -> np.ndarray:
        if self._sparse:
            v = self._lu.solve(injection)
        else:
            v = la.lu_solve(self._lu, injection, check_finite=False)
        res = float(np.max(np.abs(injection - self.y_aug @ v))) if len(v) else 0.0
        residual_log.record(res)
        if not res <= RESIDUAL_TOL:
            raise SingularNetworkError(f"network solve residual {res:.3e} exceeds {RESIDUAL_TOL:g}")
        return v


@dataclass(frozen=True)
class NetworkSolution:
    v: np.ndarray
    device_currents: np.ndarray
    residual: float

    @property
    def v_x(self) -> np.ndarray:
        return self.v.real

    @property
    def v_y(self) -> np.ndarray:
        return self.v.imag

    @property
    def v_mag(self) -> np.ndarray:
        return np.sqrt(self.v.real ** 2 + self.v.imag ** 2)

    @property
    def theta(self) -> np.ndarray:
        return np.arctan2(self.v.imag, self.v.real)


def device_currents(nortons: Sequence[Norton], rows: np.ndarray, v: np.ndarray) -> np.ndarray:
    src = np.array([nt.source for nt in nortons], dtype=complex)
    sh = np.array([nt.shunt for nt in nortons], dtype=complex)
    return src - sh * v[rows] if len(nortons) else np.zeros(0, dtype=complex)


def solve_network(system: AugmentedSystem, factor: FactorizedNetwork | None = None) -> NetworkSolution:
    if factor is None:
        factor = FactorizedNetwork(system.y_aug, system.net.bus_ids)
    v = factor.solve(system.injection)
    res = float(np.max(np.abs(system.injection - system.y_aug @ v))) if len(v) else 0.0
    cur = device_currents(system.nortons, system.device_rows, v)
    return NetworkSolution(v=v, device_currents=cur, residual=res)
